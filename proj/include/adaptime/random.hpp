#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

#include "adaptime/tensor.hpp"

namespace adaptime {

using Rng = std::mt19937_64;

// splitmix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p));
  return h;
}

// FNV-1a, stable across platforms (unlike std::hash).
constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Tensor standard_normal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out(Shape{rows, cols});
  for (double& v : out.data()) v = normal(rng);
  return out;
}

}  // namespace adaptime

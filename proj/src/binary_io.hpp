#pragma once

// Explicit little-endian encoding, independent of host byte order.

#include <bit>
#include <cstdint>
#include <string>
#include <string_view>

#include "adaptime/error.hpp"

namespace adaptime::detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void raw(std::string_view s) { bytes_.append(s); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  const std::string& bytes() const { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string_view what) : bytes_(bytes), what_(what) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::string raw(std::size_t n) {
    need(n);
    std::string out(bytes_.substr(pos_, n));
    pos_ += n;
    return out;
  }
  std::string str() { return raw(u32()); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorKind::kData, std::string(what_) + ": truncated input");
    }
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string_view bytes_;
  std::string_view what_;
  std::size_t pos_ = 0;
};

}  // namespace adaptime::detail

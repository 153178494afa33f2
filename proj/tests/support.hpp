#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "adaptime/autodiff.hpp"
#include "adaptime/error.hpp"
#include "adaptime/random.hpp"

namespace adaptime::testing {

inline constexpr double kFiniteDifferenceStep = 1e-5;

// Relative error with a floor on the denominator so that entries whose true
// gradient is ~0 are judged on their absolute error.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using LossBuilder = std::function<Var(Tape&)>;

inline double evaluate_loss(const LossBuilder& build) {
  Tape tape;
  return build(tape).value().item();
}

struct GradCheck {
  double max_relative_error = 0.0;
  std::size_t entries = 0;
};

// Compares the taped gradient of every (or a sample of `max_entries`)
// parameter entry with central differences.
inline GradCheck check_gradients(const std::vector<Parameter*>& params, const LossBuilder& build,
                                 std::size_t max_entries = std::numeric_limits<std::size_t>::max(),
                                 std::uint64_t seed = 0, double step = kFiniteDifferenceStep) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(build(tape));
  }
  std::vector<std::pair<Parameter*, std::size_t>> entries;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) entries.emplace_back(p, i);
  }
  if (entries.size() > max_entries) {
    Rng rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(max_entries);
  }
  GradCheck out;
  for (auto [p, i] : entries) {
    const double original = p->value[i];
    p->value[i] = original + step;
    const double up = evaluate_loss(build);
    p->value[i] = original - step;
    const double down = evaluate_loss(build);
    p->value[i] = original;
    const double numeric = (up - down) / (2.0 * step);
    out.max_relative_error = std::max(out.max_relative_error, relative_error(p->grad[i], numeric));
    ++out.entries;
  }
  return out;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

}  // namespace adaptime::testing

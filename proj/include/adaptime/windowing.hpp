#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "adaptime/autodiff.hpp"

namespace adaptime {

// Assignment of each event (in sequence order) to one of `num_windows`
// aggregation windows. `occupied[k]` is true iff some event maps to k.
struct WindowPlan {
  std::size_t num_windows = 0;
  std::vector<std::size_t> assignment;
  std::vector<bool> occupied;

  // Events of window k, in order.
  std::vector<std::vector<std::size_t>> members() const;
  std::size_t last_occupied() const;
  friend bool operator==(const WindowPlan&, const WindowPlan&) = default;
};

struct PrecisionSequence {
  std::vector<double> precision;
  std::vector<double> cumulative;  // cumulative[k] = sum_{i<=k} precision[i]
  double total() const { return cumulative.empty() ? 0.0 : cumulative.back(); }
};

// Compensated (Neumaier) prefix sums. Throws kNumeric on non-positive or
// non-finite precision.
PrecisionSequence cumulative_precision(std::span<const double> precisions);

// Same, from log precisions. If exp would overflow, all values are rescaled
// by a common factor, which leaves equi-precise plans unchanged.
PrecisionSequence cumulative_precision_from_log(std::span<const double> log_precisions);

// Event i goes to min(W-1, floor(W * p*_{i-1} / P*)), with p*_{-1} = 0.
WindowPlan equiprecise_plan(const PrecisionSequence& ps, std::size_t num_windows);

// Event at time t goes to min(W-1, floor(W * t / horizon)).
WindowPlan fixed_time_plan(std::span<const double> timestamps, double horizon,
                           std::size_t num_windows);

// Event i goes to min(W-1, floor(W * i / n)).
WindowPlan fixed_count_plan(std::size_t n_events, std::size_t num_windows);

struct Aggregate {
  Var windows;  // W x d
  std::vector<bool> occupied;
};

// Pools each window's embeddings (mean by default); empty windows are zero rows.
Aggregate aggregate(const Var& embeddings, const WindowPlan& plan, PoolMode mode = PoolMode::kMean);

// Batched pooling: per-window B x d tensors, one per recurrent step.
// `embeddings` stacks all sequences' events; row_offsets[b] is the first row
// of sequence b.
std::vector<Var> aggregate_batch(const Var& embeddings, std::span<const WindowPlan> plans,
                                 std::span<const std::size_t> row_offsets,
                                 PoolMode mode = PoolMode::kMean);

}  // namespace adaptime

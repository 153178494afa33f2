#include "adaptime/windowing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "adaptime/error.hpp"

namespace adaptime {

namespace {

// Window coordinates this close below an integer are snapped up to it, so
// rounding in prefix sums cannot split an exact tie (uniform precision).
constexpr double kBoundarySnap = 1e-9;

void require_windows(std::size_t num_windows, const char* op) {
  if (num_windows == 0) fail(ErrorKind::kConfig, std::string(op) + ": need at least one window");
}

WindowPlan make_plan(std::vector<std::size_t> assignment, std::size_t num_windows) {
  WindowPlan plan;
  plan.num_windows = num_windows;
  plan.occupied.assign(num_windows, false);
  for (std::size_t k : assignment) plan.occupied[k] = true;
  plan.assignment = std::move(assignment);
  return plan;
}

std::size_t snapped_floor(double x, std::size_t num_windows) {
  double k = std::floor(x);
  if (k + 1.0 - x < kBoundarySnap) k += 1.0;
  const double last = static_cast<double>(num_windows - 1);
  return static_cast<std::size_t>(std::clamp(k, 0.0, last));
}

}  // namespace

std::vector<std::vector<std::size_t>> WindowPlan::members() const {
  std::vector<std::vector<std::size_t>> out(num_windows);
  for (std::size_t i = 0; i < assignment.size(); ++i) out[assignment[i]].push_back(i);
  return out;
}

std::size_t WindowPlan::last_occupied() const {
  for (std::size_t k = num_windows; k-- > 0;) {
    if (occupied[k]) return k;
  }
  fail(ErrorKind::kData, "window plan has no occupied window");
}

PrecisionSequence cumulative_precision(std::span<const double> precisions) {
  PrecisionSequence out;
  out.precision.assign(precisions.begin(), precisions.end());
  out.cumulative.reserve(precisions.size());
  double running = 0.0;
  double compensation = 0.0;
  for (std::size_t i = 0; i < precisions.size(); ++i) {
    const double p = precisions[i];
    if (!(p > 0.0) || !std::isfinite(p)) {
      fail(ErrorKind::kNumeric, "cumulative_precision: precision at event " + std::to_string(i) +
                                    " is not a positive finite value (" + std::to_string(p) + ")");
    }
    const double t = running + p;
    compensation += std::abs(running) >= std::abs(p) ? (running - t) + p : (p - t) + running;
    running = t;
    out.cumulative.push_back(running + compensation);
  }
  return out;
}

PrecisionSequence cumulative_precision_from_log(std::span<const double> log_precisions) {
  double max_log = -std::numeric_limits<double>::infinity();
  for (double lp : log_precisions) {
    if (std::isnan(lp)) fail(ErrorKind::kNumeric, "cumulative_precision: NaN log precision");
    max_log = std::max(max_log, lp);
  }
  // Headroom so that the sum of up to ~1e6 events cannot overflow.
  const double limit = std::log(std::numeric_limits<double>::max()) - 20.0;
  const double shift = max_log > limit ? max_log - limit : 0.0;
  std::vector<double> p(log_precisions.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_precisions[i] - shift);
  return cumulative_precision(p);
}

WindowPlan equiprecise_plan(const PrecisionSequence& ps, std::size_t num_windows) {
  require_windows(num_windows, "equiprecise_plan");
  const std::size_t n = ps.cumulative.size();
  if (n == 0) fail(ErrorKind::kData, "equiprecise_plan: empty sequence");
  const double total = ps.total();
  const double w = static_cast<double>(num_windows);
  std::vector<std::size_t> assignment(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double before = i == 0 ? 0.0 : ps.cumulative[i - 1];
    assignment[i] = snapped_floor(w * (before / total), num_windows);
  }
  return make_plan(std::move(assignment), num_windows);
}

WindowPlan fixed_time_plan(std::span<const double> timestamps, double horizon,
                           std::size_t num_windows) {
  require_windows(num_windows, "fixed_time_plan");
  if (!(horizon > 0.0)) fail(ErrorKind::kConfig, "fixed_time_plan: horizon must be positive");
  std::vector<std::size_t> assignment(timestamps.size());
  const double w = static_cast<double>(num_windows);
  for (std::size_t i = 0; i < timestamps.size(); ++i) {
    const double t = timestamps[i];
    if (i > 0 && t < timestamps[i - 1]) {
      fail(ErrorKind::kData, "fixed_time_plan: timestamps decrease at event " + std::to_string(i));
    }
    if (!(t >= 0.0 && t <= horizon)) {
      fail(ErrorKind::kData, "fixed_time_plan: timestamp " + std::to_string(t) +
                                 " outside [0, horizon]");
    }
    const double k = std::floor(w * t / horizon);
    assignment[i] = std::min(num_windows - 1, static_cast<std::size_t>(k));
  }
  return make_plan(std::move(assignment), num_windows);
}

WindowPlan fixed_count_plan(std::size_t n_events, std::size_t num_windows) {
  require_windows(num_windows, "fixed_count_plan");
  if (n_events == 0) fail(ErrorKind::kData, "fixed_count_plan: empty sequence");
  std::vector<std::size_t> assignment(n_events);
  for (std::size_t i = 0; i < n_events; ++i) {
    assignment[i] = std::min(num_windows - 1, num_windows * i / n_events);
  }
  return make_plan(std::move(assignment), num_windows);
}

Aggregate aggregate(const Var& embeddings, const WindowPlan& plan, PoolMode mode) {
  if (embeddings.value().rows() != plan.assignment.size() || embeddings.value().rank() != 2) {
    fail(ErrorKind::kShape, "aggregate: " + std::to_string(plan.assignment.size()) +
                                " assignments for embeddings of shape " +
                                shape_string(embeddings.value().shape()));
  }
  return Aggregate{pool_rows(embeddings, plan.members(), mode), plan.occupied};
}

std::vector<Var> aggregate_batch(const Var& embeddings, std::span<const WindowPlan> plans,
                                 std::span<const std::size_t> row_offsets, PoolMode mode) {
  if (plans.empty()) fail(ErrorKind::kShape, "aggregate_batch: empty batch");
  if (row_offsets.size() != plans.size()) {
    fail(ErrorKind::kShape, "aggregate_batch: offsets/plans length mismatch");
  }
  const std::size_t num_windows = plans[0].num_windows;
  std::size_t expected_rows = 0;
  for (std::size_t b = 0; b < plans.size(); ++b) {
    if (plans[b].num_windows != num_windows) {
      fail(ErrorKind::kShape, "aggregate_batch: plans disagree on window count");
    }
    if (row_offsets[b] != expected_rows) {
      fail(ErrorKind::kShape, "aggregate_batch: row offsets are not contiguous");
    }
    expected_rows += plans[b].assignment.size();
  }
  if (embeddings.value().rows() != expected_rows) {
    fail(ErrorKind::kShape, "aggregate: " + std::to_string(expected_rows) +
                                " assignments for embeddings of shape " +
                                shape_string(embeddings.value().shape()));
  }
  std::vector<std::vector<std::vector<std::size_t>>> steps(
      num_windows, std::vector<std::vector<std::size_t>>(plans.size()));
  for (std::size_t b = 0; b < plans.size(); ++b) {
    const auto& assignment = plans[b].assignment;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      steps[assignment[i]][b].push_back(row_offsets[b] + i);
    }
  }
  std::vector<Var> out;
  out.reserve(num_windows);
  for (const auto& segments : steps) out.push_back(pool_rows(embeddings, segments, mode));
  return out;
}

}  // namespace adaptime

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaptime/model.hpp"

namespace adaptime {

// ---- metrics -----------------------------------------------------------------

// Mann-Whitney AUROC; ties between a positive and a negative count 1/2.
double auroc(std::span<const double> scores, std::span<const int> labels);
// Step-wise average precision; tied scores enter the curve together.
double auprc(std::span<const double> scores, std::span<const int> labels);

inline constexpr std::size_t kMccThresholds = 100;
// Threshold j of the grid: (j + 0.5) / 100. Scores >= threshold predict 1.
double mcc_threshold(std::size_t j);
// MCC from a confusion matrix; 0 when the denominator vanishes.
double mcc(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn);
double max_mcc(std::span<const double> scores, std::span<const int> labels);

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  double mean_predicted = 0.0;  // NaN for an empty bin
  double observed = 0.0;        // NaN for an empty bin
  std::size_t count = 0;

  double midpoint() const { return 0.5 * (lower + upper); }
};

// Equal-width bins on [0, 1]; a score of exactly 1 falls in the last bin.
std::vector<CalibrationBin> calibration_curve(std::span<const double> scores,
                                              std::span<const int> labels, std::size_t bins = 10);
// Largest |mean_predicted - observed| over bins holding at least min_count scores.
double max_calibration_gap(std::span<const CalibrationBin> table, std::size_t min_count = 1);

// ---- earliness -----------------------------------------------------------------

struct Crossing {
  std::optional<std::size_t> window;  // empty: censored
};

// First window from which the trajectory stays >= threshold to the end.
Crossing first_sustained_crossing(std::span<const double> trajectory, double threshold);

struct TimingRow {
  std::string sequence_id;
  bool censored = true;
  std::size_t window = 0;
  // Last event consumed by the crossing window; empty if none yet.
  std::optional<std::size_t> event_index;
  std::optional<double> event_time;
};

// One row per label-1 sequence, in input order.
std::vector<TimingRow> earliness(std::span<const LabeledSequence> data,
                                 std::span<const Trajectory> trajectories, double threshold);

// ---- resampled reports -----------------------------------------------------------

enum class EvalMode { kVariational, kBootstrap };
std::string_view eval_mode_name(EvalMode mode);
EvalMode parse_eval_mode(std::string_view name);

struct MetricSummary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single draw
  std::vector<double> draws;
};

MetricSummary summarize(std::vector<double> draws);

struct EvalOptions {
  std::size_t draws = 100;       // variational re-samples
  std::size_t resamples = 1000;  // bootstrap re-samples; the first is the observed set
  std::uint64_t seed = 0;
  double earliness_threshold = 0.5;
  std::size_t calibration_bins = 10;
};

struct EvalReport {
  EvalMode mode = EvalMode::kVariational;
  std::string variant;
  std::size_t models = 1;
  std::size_t sequences = 0;
  std::size_t positives = 0;
  std::size_t skipped_draws = 0;  // single-class bootstrap re-samples
  MetricSummary auroc;
  MetricSummary auprc;
  MetricSummary max_mcc;
  std::vector<double> mean_probabilities;  // per sequence, averaged over draws/models
  std::vector<CalibrationBin> calibration;
  std::vector<TimingRow> timing;

  nlohmann::json to_json() const;
  std::string calibration_csv() const;
  std::string timing_csv() const;
};

// Variational mode: one Bayesian model, embedding noise re-drawn per draw.
EvalReport variational_report(const SequenceModel& model, std::span<const LabeledSequence> data,
                              const EvalOptions& options);
// Bootstrap mode: ensemble of deterministic models, evaluation set re-sampled.
EvalReport bootstrap_report(std::span<const SequenceModel* const> models,
                            std::span<const LabeledSequence> data, const EvalOptions& options);

std::vector<int> labels_of(std::span<const LabeledSequence> data);

}  // namespace adaptime

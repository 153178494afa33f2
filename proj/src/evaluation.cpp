#include "adaptime/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "adaptime/csv.hpp"
#include "adaptime/error.hpp"
#include "adaptime/random.hpp"

namespace adaptime {

namespace {

struct ClassCounts {
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

ClassCounts check_inputs(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size()) {
    fail(ErrorKind::kShape, std::string(what) + ": " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  }
  ClassCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) fail(ErrorKind::kNumeric, std::string(what) + ": non-finite score");
    if (labels[i] == 1) ++c.positives;
    else if (labels[i] == 0) ++c.negatives;
    else fail(ErrorKind::kData, std::string(what) + ": labels must be 0 or 1");
  }
  return c;
}

void require_both(const ClassCounts& c, const char* what) {
  if (c.positives == 0 || c.negatives == 0) {
    fail(ErrorKind::kData, std::string(what) + ": both classes must be present");
  }
}

std::vector<std::size_t> order_by_score(std::span<const double> scores, bool descending) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return idx;
}

bool has_both_classes(std::span<const int> labels) {
  bool pos = false;
  bool neg = false;
  for (int y : labels) (y == 1 ? pos : neg) = true;
  return pos && neg;
}

nlohmann::json optional_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

nlohmann::json summary_json(const MetricSummary& m) {
  return {{"mean", m.mean}, {"sd", m.sd}, {"draws", m.draws.size()}};
}

}  // namespace

// ---- metrics -----------------------------------------------------------------

double auroc(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = check_inputs(scores, labels, "auroc");
  require_both(c, "auroc");
  const auto idx = order_by_score(scores, false);
  // Twice the Mann-Whitney U, kept integral so ties stay exact.
  std::uint64_t twice_u = 0;
  std::uint64_t negatives_below = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0;
    std::uint64_t neg = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? pos : neg) += 1;
      ++j;
    }
    twice_u += pos * (2 * negatives_below + neg);
    negatives_below += neg;
    i = j;
  }
  return static_cast<double>(twice_u) /
         (2.0 * static_cast<double>(c.positives) * static_cast<double>(c.negatives));
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = check_inputs(scores, labels, "auprc");
  if (c.positives == 0) fail(ErrorKind::kData, "auprc: no positive labels");
  const auto idx = order_by_score(scores, true);
  double ap = 0.0;
  std::size_t tp = 0;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::size_t group_tp = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      group_tp += static_cast<std::size_t>(labels[idx[j]]);
      ++j;
    }
    tp += group_tp;
    seen = j;
    if (group_tp > 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(seen);
      ap += static_cast<double>(group_tp) / static_cast<double>(c.positives) * precision;
    }
    i = j;
  }
  return ap;
}

double mcc_threshold(std::size_t j) {
  return (static_cast<double>(j) + 0.5) / static_cast<double>(kMccThresholds);
}

double mcc(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
  const double a = static_cast<double>(tp + fp);
  const double b = static_cast<double>(tp + fn);
  const double c = static_cast<double>(tn + fp);
  const double d = static_cast<double>(tn + fn);
  if (a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0) return 0.0;
  const double num = static_cast<double>(tp) * static_cast<double>(tn) -
                     static_cast<double>(fp) * static_cast<double>(fn);
  return num / std::sqrt(a * b * c * d);
}

double max_mcc(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = check_inputs(scores, labels, "max_mcc");
  require_both(c, "max_mcc");
  std::vector<double> pos;
  std::vector<double> neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(scores[i]);
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  double best = -1.0;
  for (std::size_t j = 0; j < kMccThresholds; ++j) {
    const double t = mcc_threshold(j);
    const auto tp = static_cast<std::size_t>(pos.end() - std::lower_bound(pos.begin(), pos.end(), t));
    const auto fp = static_cast<std::size_t>(neg.end() - std::lower_bound(neg.begin(), neg.end(), t));
    best = std::max(best, mcc(tp, fp, neg.size() - fp, pos.size() - tp));
  }
  return best;
}

std::vector<CalibrationBin> calibration_curve(std::span<const double> scores,
                                              std::span<const int> labels, std::size_t bins) {
  check_inputs(scores, labels, "calibration_curve");
  if (bins < 2) fail(ErrorKind::kConfig, "calibration_curve: need at least 2 bins");
  std::vector<CalibrationBin> table(bins);
  std::vector<double> score_sum(bins, 0.0);
  std::vector<std::size_t> pos(bins, 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = scores[i];
    if (s < 0.0 || s > 1.0) fail(ErrorKind::kRange, "calibration_curve: score outside [0, 1]");
    const auto b = std::min(bins - 1, static_cast<std::size_t>(s * static_cast<double>(bins)));
    ++table[b].count;
    score_sum[b] += s;
    pos[b] += static_cast<std::size_t>(labels[i]);
  }
  for (std::size_t b = 0; b < bins; ++b) {
    CalibrationBin& bin = table[b];
    bin.lower = static_cast<double>(b) / static_cast<double>(bins);
    bin.upper = static_cast<double>(b + 1) / static_cast<double>(bins);
    const double n = static_cast<double>(bin.count);
    bin.mean_predicted = bin.count ? score_sum[b] / n : std::numeric_limits<double>::quiet_NaN();
    bin.observed = bin.count ? static_cast<double>(pos[b]) / n : std::numeric_limits<double>::quiet_NaN();
  }
  return table;
}

double max_calibration_gap(std::span<const CalibrationBin> table, std::size_t min_count) {
  double gap = 0.0;
  for (const CalibrationBin& bin : table) {
    if (bin.count >= std::max<std::size_t>(1, min_count)) {
      gap = std::max(gap, std::abs(bin.mean_predicted - bin.observed));
    }
  }
  return gap;
}

// ---- earliness -----------------------------------------------------------------

Crossing first_sustained_crossing(std::span<const double> trajectory, double threshold) {
  Crossing out;
  for (std::size_t k = trajectory.size(); k-- > 0;) {
    if (trajectory[k] < threshold) break;
    out.window = k;
  }
  return out;
}

std::vector<TimingRow> earliness(std::span<const LabeledSequence> data,
                                 std::span<const Trajectory> trajectories, double threshold) {
  if (data.size() != trajectories.size()) {
    fail(ErrorKind::kShape, "earliness: sequence and trajectory counts differ");
  }
  std::vector<TimingRow> rows;
  for (std::size_t s = 0; s < data.size(); ++s) {
    if (data[s].label != 1) continue;
    TimingRow row;
    row.sequence_id = data[s].id;
    const Crossing c = first_sustained_crossing(trajectories[s].probabilities, threshold);
    if (c.window) {
      row.censored = false;
      row.window = *c.window;
      const auto& assignment = trajectories[s].plan.assignment;
      for (std::size_t i = 0; i < assignment.size() && assignment[i] <= row.window; ++i) {
        row.event_index = i;
      }
      if (row.event_index) row.event_time = data[s].times[*row.event_index];
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---- reports -------------------------------------------------------------------

std::string_view eval_mode_name(EvalMode mode) {
  return mode == EvalMode::kVariational ? "variational" : "bootstrap";
}

EvalMode parse_eval_mode(std::string_view name) {
  if (name == "variational") return EvalMode::kVariational;
  if (name == "bootstrap") return EvalMode::kBootstrap;
  fail(ErrorKind::kConfig, "unknown mode '" + std::string(name) + "' (expected variational or bootstrap)");
}

MetricSummary summarize(std::vector<double> draws) {
  MetricSummary m;
  m.draws = std::move(draws);
  if (m.draws.empty()) {
    m.mean = m.sd = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  const auto [lo, hi] = std::minmax_element(m.draws.begin(), m.draws.end());
  if (*lo == *hi) {
    m.mean = *lo;
    m.sd = 0.0;
    return m;
  }
  const double n = static_cast<double>(m.draws.size());
  m.mean = std::accumulate(m.draws.begin(), m.draws.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : m.draws) ss += (d - m.mean) * (d - m.mean);
  m.sd = std::sqrt(ss / (n - 1.0));
  return m;
}

std::vector<int> labels_of(std::span<const LabeledSequence> data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(s.label);
  return out;
}

namespace {

struct DrawMetrics {
  std::vector<double> auroc;
  std::vector<double> auprc;
  std::vector<double> mcc;
};

void add_draw(DrawMetrics& m, std::span<const double> scores, std::span<const int> labels) {
  m.auroc.push_back(auroc(scores, labels));
  m.auprc.push_back(auprc(scores, labels));
  m.mcc.push_back(max_mcc(scores, labels));
}

void accumulate_trajectories(std::vector<Trajectory>& sum, std::vector<Trajectory>&& draw) {
  if (sum.empty()) {
    sum = std::move(draw);
    return;
  }
  for (std::size_t s = 0; s < sum.size(); ++s) {
    for (std::size_t k = 0; k < sum[s].probabilities.size(); ++k) {
      sum[s].probabilities[k] += draw[s].probabilities[k];
    }
  }
}

void finish_report(EvalReport& r, std::vector<Trajectory>& mean_traj, double count,
                   std::span<const LabeledSequence> data, const DrawMetrics& m,
                   const EvalOptions& options) {
  for (auto& t : mean_traj) {
    for (double& p : t.probabilities) p /= count;
    r.mean_probabilities.push_back(t.probabilities.back());
  }
  const std::vector<int> labels = labels_of(data);
  r.sequences = data.size();
  r.positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  r.auroc = summarize(m.auroc);
  r.auprc = summarize(m.auprc);
  r.max_mcc = summarize(m.mcc);
  r.calibration = calibration_curve(r.mean_probabilities, labels, options.calibration_bins);
  r.timing = earliness(data, mean_traj, options.earliness_threshold);
}

}  // namespace

EvalReport variational_report(const SequenceModel& model, std::span<const LabeledSequence> data,
                              const EvalOptions& options) {
  if (!model.bayesian()) {
    fail(ErrorKind::kConfig, "variational mode needs a Bayesian checkpoint, got " +
                                 std::string(variant_name(model.config().variant)));
  }
  if (options.draws == 0) fail(ErrorKind::kConfig, "variational mode needs at least one draw");
  const std::vector<int> labels = labels_of(data);
  if (!has_both_classes(labels)) fail(ErrorKind::kData, "evaluation data must contain both classes");
  EvalReport r;
  r.mode = EvalMode::kVariational;
  r.variant = variant_name(model.config().variant);
  DrawMetrics m;
  std::vector<Trajectory> sum;
  for (std::size_t d = 0; d < options.draws; ++d) {
    const NoiseSpec noise{true, derive_seed({options.seed, 0xd2a3ULL, d})};
    std::vector<Trajectory> traj = predict_trajectories(model, data, noise);
    std::vector<double> terminal;
    for (const auto& t : traj) terminal.push_back(t.probabilities.back());
    add_draw(m, terminal, labels);
    accumulate_trajectories(sum, std::move(traj));
  }
  finish_report(r, sum, static_cast<double>(options.draws), data, m, options);
  return r;
}

EvalReport bootstrap_report(std::span<const SequenceModel* const> models,
                            std::span<const LabeledSequence> data, const EvalOptions& options) {
  if (models.empty()) fail(ErrorKind::kConfig, "bootstrap mode needs at least one checkpoint");
  if (options.resamples == 0) fail(ErrorKind::kConfig, "bootstrap mode needs at least one resample");
  const Variant variant = models.front()->config().variant;
  for (const SequenceModel* model : models) {
    if (model->bayesian()) {
      fail(ErrorKind::kConfig, "bootstrap mode needs deterministic checkpoints, got " +
                                   std::string(variant_name(model->config().variant)));
    }
    if (model->config().variant != variant) {
      fail(ErrorKind::kConfig, "bootstrap ensemble mixes variants");
    }
  }
  const std::vector<int> labels = labels_of(data);
  if (!has_both_classes(labels)) fail(ErrorKind::kData, "evaluation data must contain both classes");
  EvalReport r;
  r.mode = EvalMode::kBootstrap;
  r.variant = variant_name(variant);
  r.models = models.size();
  std::vector<Trajectory> sum;
  for (const SequenceModel* model : models) {
    accumulate_trajectories(sum, predict_trajectories(*model, data, NoiseSpec{false, 0}));
  }
  std::vector<double> ensemble;
  for (const auto& t : sum) ensemble.push_back(t.probabilities.back() / static_cast<double>(models.size()));

  DrawMetrics m;
  const std::size_t n = data.size();
  std::vector<double> scores(n);
  std::vector<int> picked(n);
  for (std::size_t draw = 0; draw < options.resamples; ++draw) {
    if (draw == 0) {
      add_draw(m, ensemble, labels);
      continue;
    }
    Rng rng(derive_seed({options.seed, 0xb007ULL, draw}));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = pick(rng);
      scores[i] = ensemble[k];
      picked[i] = labels[k];
    }
    if (!has_both_classes(picked)) {
      ++r.skipped_draws;
      continue;
    }
    add_draw(m, scores, picked);
  }
  finish_report(r, sum, static_cast<double>(models.size()), data, m, options);
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cal = nlohmann::json::array();
  for (const auto& b : calibration) {
    cal.push_back({{"lower", b.lower},
                   {"upper", b.upper},
                   {"midpoint", b.midpoint()},
                   {"mean_predicted", optional_number(b.mean_predicted)},
                   {"observed", optional_number(b.observed)},
                   {"count", b.count}});
  }
  nlohmann::json rows = nlohmann::json::array();
  std::size_t censored = 0;
  for (const auto& t : timing) {
    censored += t.censored ? 1 : 0;
    rows.push_back({{"sequence_id", t.sequence_id},
                    {"censored", t.censored},
                    {"window", t.censored ? nlohmann::json(nullptr) : nlohmann::json(t.window)},
                    {"event_index", t.event_index ? nlohmann::json(*t.event_index) : nlohmann::json(nullptr)},
                    {"event_time", t.event_time ? nlohmann::json(*t.event_time) : nlohmann::json(nullptr)}});
  }
  return {{"schema", "adaptime.eval_report/1"},
          {"mode", std::string(eval_mode_name(mode))},
          {"variant", variant},
          {"models", models},
          {"sequences", sequences},
          {"positives", positives},
          {"skipped_draws", skipped_draws},
          {"metrics", {{"auroc", summary_json(auroc)}, {"auprc", summary_json(auprc)}, {"max_mcc", summary_json(max_mcc)}}},
          {"calibration", std::move(cal)},
          {"max_calibration_gap", max_calibration_gap(calibration)},
          {"timing", {{"rows", std::move(rows)}, {"censored", censored}}}};
}

std::string EvalReport::calibration_csv() const {
  std::string out = "bin,lower,upper,midpoint,mean_predicted,observed,count\n";
  for (std::size_t b = 0; b < calibration.size(); ++b) {
    const auto& bin = calibration[b];
    out += std::to_string(b) + ',' + format_double(bin.lower) + ',' + format_double(bin.upper) + ',' +
           format_double(bin.midpoint()) + ',' + csv_number(bin.mean_predicted) + ',' +
           csv_number(bin.observed) + ',' + std::to_string(bin.count) + '\n';
  }
  return out;
}

std::string EvalReport::timing_csv() const {
  std::string out = "sequence_id,censored,window,event_index,event_time\n";
  for (const auto& t : timing) {
    out += csv_field(t.sequence_id) + ',' + (t.censored ? "1" : "0") + ',' +
           (t.censored ? std::string() : std::to_string(t.window)) + ',' +
           (t.event_index ? std::to_string(*t.event_index) : std::string()) + ',' +
           (t.event_time ? format_double(*t.event_time) : std::string()) + '\n';
  }
  return out;
}

}  // namespace adaptime

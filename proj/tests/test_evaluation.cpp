#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "adaptime/evaluation.hpp"
#include "support.hpp"

using namespace adaptime;

namespace {

struct Scored {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Scores on a coarse grid (ties) with labels correlated with the score.
Scored random_scored(std::size_t n, std::uint64_t seed, double signal = 1.0, bool ties = true) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scored out;
  for (std::size_t i = 0; i < n; ++i) {
    double s = u(rng);
    if (ties) s = std::round(s * 20.0) / 20.0;
    const double p = 0.5 + signal * (s - 0.5) * 0.8;
    out.scores.push_back(std::clamp(s, 0.0, 1.0));
    out.labels.push_back(u(rng) < p ? 1 : 0);
  }
  if (std::count(out.labels.begin(), out.labels.end(), 1) == 0) out.labels[0] = 1;
  if (std::count(out.labels.begin(), out.labels.end(), 0) == 0) out.labels[0] = 0;
  return out;
}

double pairwise_auroc(const Scored& d) {
  double wins = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < d.scores.size(); ++i) {
    if (d.labels[i] != 1) continue;
    for (std::size_t j = 0; j < d.scores.size(); ++j) {
      if (d.labels[j] != 0) continue;
      pairs += 1;
      wins += d.scores[i] > d.scores[j] ? 1.0 : d.scores[i] == d.scores[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

// Average precision from every distinct threshold, highest first.
double exhaustive_auprc(const Scored& d) {
  std::vector<double> thresholds = d.scores;
  std::sort(thresholds.rbegin(), thresholds.rend());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  const double positives = static_cast<double>(std::count(d.labels.begin(), d.labels.end(), 1));
  double ap = 0.0;
  double previous_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0;
    double predicted = 0;
    for (std::size_t i = 0; i < d.scores.size(); ++i) {
      if (d.scores[i] >= t) {
        predicted += 1;
        tp += d.labels[i];
      }
    }
    const double recall = tp / positives;
    ap += (recall - previous_recall) * (tp / predicted);
    previous_recall = recall;
  }
  return ap;
}

double mcc_at(const Scored& d, double t) {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < d.scores.size(); ++i) {
    const bool predicted = d.scores[i] >= t;
    if (predicted && d.labels[i]) ++tp;
    else if (predicted) ++fp;
    else if (d.labels[i]) ++fn;
    else ++tn;
  }
  return mcc(tp, fp, tn, fn);
}

double exact_max_mcc(const Scored& d) {
  double best = -1.0;
  std::vector<double> thresholds = d.scores;
  thresholds.push_back(2.0);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  // Sweep in one pass over sorted scores.
  std::vector<std::size_t> order(d.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.scores[a] < d.scores[b]; });
  const std::size_t pos = static_cast<std::size_t>(std::count(d.labels.begin(), d.labels.end(), 1));
  const std::size_t neg = d.scores.size() - pos;
  std::size_t below_pos = 0, below_neg = 0, k = 0;
  for (double t : thresholds) {
    while (k < order.size() && d.scores[order[k]] < t) {
      (d.labels[order[k]] ? below_pos : below_neg) += 1;
      ++k;
    }
    best = std::max(best, mcc(pos - below_pos, neg - below_neg, below_neg, below_pos));
  }
  return best;
}

LabeledSequence sequence(std::string id, std::vector<Token> tokens, int label) {
  std::vector<double> times;
  for (std::size_t i = 0; i < tokens.size(); ++i) times.push_back(static_cast<double>(i));
  return LabeledSequence{std::move(id), std::move(tokens), std::move(times), label};
}

// Sequences whose label is whether token 1 dominates; gives a model
// something to separate after training-free random initialisation.
std::vector<LabeledSequence> labelled_sequences(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<Token> token(0, 5);
  std::uniform_int_distribution<std::size_t> length(2, 12);
  std::vector<LabeledSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Token> tokens(length(rng));
    for (Token& t : tokens) t = token(rng);
    out.push_back(sequence("s" + std::to_string(i), tokens, static_cast<int>(i % 3 == 0)));
  }
  return out;
}

ModelConfig tiny(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.vocab_size = 6;
  c.embedding_dim = 3;
  c.hidden_dim = 4;
  c.num_windows = 4;
  c.horizon_hours = 12.0;
  return c;
}

}  // namespace

TEST_CASE("AUROC equals the pairwise-count oracle exactly") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Scored d = random_scored(150, seed);
    CHECK(auroc(d.scores, d.labels) == pairwise_auroc(d));
  }
}

TEST_CASE("AUPRC equals the exhaustive-threshold oracle to 1e-12") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Scored d = random_scored(200, seed + 100, 1.0, seed % 2 == 0);
    CHECK(std::abs(auprc(d.scores, d.labels) - exhaustive_auprc(d)) < 1e-12);
  }
}

TEST_CASE("grid max-MCC is within 0.02 of the exact-threshold optimum at n = 10^4") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scored d = random_scored(10'000, seed + 200, 1.0, false);
    const double grid = max_mcc(d.scores, d.labels);
    const double exact = exact_max_mcc(d);
    CHECK(grid <= exact + 1e-12);
    CHECK(exact - grid < 0.02);
    double brute = -1.0;
    for (std::size_t j = 0; j < kMccThresholds; ++j) brute = std::max(brute, mcc_at(d, mcc_threshold(j)));
    CHECK(grid == doctest::Approx(brute).epsilon(1e-15));
  }
}

TEST_CASE("uninformative scores give AUROC 0.5 +- 0.02") {
  const Scored d = random_scored(10'000, 300, 0.0, false);
  CHECK(std::abs(auroc(d.scores, d.labels) - 0.5) < 0.02);
}

TEST_CASE("metrics are invariant under strictly monotone score transforms") {
  const Scored d = random_scored(500, 400);
  Scored t = d;
  for (double& s : t.scores) s = std::pow(s, 1.5);
  CHECK(auroc(t.scores, t.labels) == auroc(d.scores, d.labels));
  CHECK(auprc(t.scores, t.labels) == auprc(d.scores, d.labels));
  CHECK(std::abs(max_mcc(t.scores, t.labels) - max_mcc(d.scores, d.labels)) < 0.02);
}

TEST_CASE("AUROC of negated tie-free scores is the complement") {
  const Scored d = random_scored(300, 500, 1.0, false);
  std::vector<double> neg(d.scores);
  for (double& s : neg) s = -s;
  CHECK(auroc(d.scores, d.labels) + auroc(neg, d.labels) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("metric ranges and degenerate inputs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scored d = random_scored(60, seed + 600, seed % 2 ? 1.0 : -1.0);
    const double a = auroc(d.scores, d.labels);
    const double p = auprc(d.scores, d.labels);
    const double m = max_mcc(d.scores, d.labels);
    CHECK((a >= 0 && a <= 1));
    CHECK((p >= 0 && p <= 1));
    CHECK((m >= -1 && m <= 1));
  }
  CHECK(mcc(5, 0, 0, 0) == 0.0);
  CHECK(mcc(3, 0, 4, 0) == 1.0);
  const std::vector<double> s{0.1, 0.2};
  const std::vector<int> one_class{1, 1};
  CHECK_THROWS_AS(auroc(s, one_class), Error);
  const std::vector<int> no_pos{0, 0};
  CHECK_THROWS_AS(auprc(s, no_pos), Error);
  const std::vector<int> bad{0, 2};
  CHECK_THROWS_AS(auroc(s, bad), Error);
  CHECK(mcc_threshold(0) == 0.005);
  CHECK(mcc_threshold(99) == 0.995);
}

TEST_CASE("calibration: Bernoulli(score) labels are calibrated within 0.05 at n = 10^4") {
  Rng rng(700);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 10'000; ++i) {
    scores.push_back(u(rng));
    labels.push_back(u(rng) < scores.back() ? 1 : 0);
  }
  const auto table = calibration_curve(scores, labels);
  CHECK(max_calibration_gap(table) < 0.05);
  std::size_t total = 0;
  for (const auto& bin : table) total += bin.count;
  CHECK(total == 10'000);
}

TEST_CASE("calibration: one occupied bin, edges and errors") {
  const std::vector<double> scores{0.31, 0.32, 0.35, 1.0, 0.0};
  const std::vector<int> labels{1, 0, 0, 1, 0};
  const auto table = calibration_curve(scores, labels, 10);
  REQUIRE(table.size() == 10);
  CHECK(table[3].count == 3);
  CHECK(table[3].observed == doctest::Approx(1.0 / 3.0));
  CHECK(table[9].count == 1);
  CHECK(table[0].count == 1);
  CHECK(std::isnan(table[5].observed));
  CHECK(table[5].count == 0);
  CHECK(max_calibration_gap(table) == doctest::Approx(1.0 / 3.0 - 0.98 / 3.0).epsilon(1e-9));
  CHECK_THROWS_AS(calibration_curve(scores, labels, 1), Error);
  const std::vector<double> outside{1.2};
  const std::vector<int> y{1};
  CHECK_THROWS_AS(calibration_curve(outside, y), Error);
}

TEST_CASE("first sustained crossing") {
  const std::vector<double> rising{0.1, 0.6, 0.7};
  CHECK(first_sustained_crossing(rising, 0.5).window == 1u);
  const std::vector<double> never{0.1, 0.2, 0.3};
  CHECK_FALSE(first_sustained_crossing(never, 0.5).window.has_value());
  const std::vector<double> dip{0.9, 0.4, 0.8, 0.9};
  CHECK(first_sustained_crossing(dip, 0.5).window == 2u);
  const std::vector<double> late_drop{0.9, 0.9, 0.2};
  CHECK_FALSE(first_sustained_crossing(late_drop, 0.5).window.has_value());
}

TEST_CASE("earliness rows: one per positive, event of the crossing window") {
  const std::vector<LabeledSequence> data{sequence("a", {0, 1, 2, 3}, 1), sequence("b", {0}, 0),
                                          sequence("c", {1, 1}, 1)};
  std::vector<Trajectory> traj(3);
  traj[0] = Trajectory{{0.2, 0.7, 0.8}, fixed_count_plan(4, 3)};
  traj[1] = Trajectory{{0.9, 0.9, 0.9}, fixed_count_plan(1, 3)};
  traj[2] = Trajectory{{0.1, 0.2, 0.3}, fixed_count_plan(2, 3)};
  const auto rows = earliness(data, traj, 0.5);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].sequence_id == "a");
  CHECK_FALSE(rows[0].censored);
  CHECK(rows[0].window == 1);
  // fixed_count_plan(4, 3) = (0, 0, 1, 2): event 2 is the last in window 1.
  CHECK(rows[0].event_index == 2u);
  CHECK(rows[0].event_time == 2.0);
  CHECK(rows[1].censored);
}

TEST_CASE("summaries use the sample standard deviation") {
  const MetricSummary s = summarize({1, 2, 3, 4});
  CHECK(s.mean == 2.5);
  CHECK(s.sd == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
  CHECK(summarize({0.7}).sd == 0.0);
  CHECK(summarize({0.3, 0.3, 0.3}).sd == 0.0);
}

TEST_CASE("bootstrap with one model and one resample reproduces the point metrics") {
  const auto data = labelled_sequences(120, 800);
  const SequenceModel model(tiny(Variant::kDetCount), 801);
  const std::vector<const SequenceModel*> models{&model};
  EvalOptions options;
  options.resamples = 1;
  const EvalReport r = bootstrap_report(models, data, options);
  const std::vector<double> p = predict(model, data, NoiseSpec{false, 0});
  const std::vector<int> y = labels_of(data);
  CHECK(r.auroc.mean == auroc(p, y));
  CHECK(r.auprc.mean == auprc(p, y));
  CHECK(r.max_mcc.mean == max_mcc(p, y));
  CHECK(r.auroc.sd == 0.0);
  CHECK(r.mean_probabilities == p);
  CHECK(r.positives == 40);
}

TEST_CASE("bootstrap AUROC spread agrees with the Hanley-McNeil standard error") {
  const auto data = labelled_sequences(400, 900);
  const SequenceModel model(tiny(Variant::kDetTime), 901);
  const std::vector<const SequenceModel*> models{&model};
  EvalOptions options;
  options.resamples = 1000;
  options.seed = 3;
  const EvalReport r = bootstrap_report(models, data, options);
  const double a = r.auroc.draws.front();
  const double np = static_cast<double>(r.positives);
  const double nn = static_cast<double>(r.sequences - r.positives);
  const double q1 = a / (2 - a);
  const double q2 = 2 * a * a / (1 + a);
  const double se = std::sqrt((a * (1 - a) + (np - 1) * (q1 - a * a) + (nn - 1) * (q2 - a * a)) / (np * nn));
  CHECK(r.auroc.sd > se / 1.5);
  CHECK(r.auroc.sd < se * 1.5);
  CHECK(r.auroc.draws.size() + r.skipped_draws == 1000);
}

TEST_CASE("bootstrap ensembles average member probabilities") {
  const auto data = labelled_sequences(60, 1000);
  const SequenceModel a(tiny(Variant::kDetCount), 1);
  const SequenceModel b(tiny(Variant::kDetCount), 2);
  const std::vector<const SequenceModel*> models{&a, &b};
  EvalOptions options;
  options.resamples = 5;
  const EvalReport r = bootstrap_report(models, data, options);
  const auto pa = predict(a, data, {false, 0});
  const auto pb = predict(b, data, {false, 0});
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(r.mean_probabilities[i] == doctest::Approx(0.5 * (pa[i] + pb[i])).epsilon(1e-15));
  }
  CHECK(r.models == 2);
  const SequenceModel other(tiny(Variant::kDetTime), 3);
  const std::vector<const SequenceModel*> mixed{&a, &other};
  CHECK_THROWS_AS(bootstrap_report(mixed, data, options), Error);
  const SequenceModel bayes(tiny(Variant::kBayesCount), 4);
  const std::vector<const SequenceModel*> wrong{&bayes};
  CHECK_THROWS_AS(bootstrap_report(wrong, data, options), Error);
}

TEST_CASE("variational report: reproducible draws with spread from embedding noise") {
  const auto data = labelled_sequences(90, 1100);
  const SequenceModel model(tiny(Variant::kBayesPstar), 1101);
  EvalOptions options;
  options.draws = 20;
  options.seed = 9;
  const EvalReport a = variational_report(model, data, options);
  const EvalReport b = variational_report(model, data, options);
  CHECK(a.auroc.draws == b.auroc.draws);
  CHECK(a.auroc.draws.size() == 20);
  CHECK(a.auroc.sd > 0.0);
  CHECK(a.timing.size() == a.positives);
  const nlohmann::json j = a.to_json();
  CHECK(j.at("schema") == "adaptime.eval_report/1");
  CHECK(j.at("mode") == "variational");
  CHECK(j.at("metrics").at("auroc").at("draws") == 20);
  std::size_t total = 0;
  for (const auto& bin : a.calibration) total += bin.count;
  CHECK(total == data.size());
  const SequenceModel det(tiny(Variant::kDetCount), 1);
  CHECK_THROWS_AS(variational_report(det, data, options), Error);
  CHECK(parse_eval_mode(eval_mode_name(EvalMode::kBootstrap)) == EvalMode::kBootstrap);
}

TEST_CASE("report CSVs carry one row per bin and per positive") {
  const auto data = labelled_sequences(30, 1200);
  const SequenceModel model(tiny(Variant::kBayesCount), 1201);
  EvalOptions options;
  options.draws = 3;
  const EvalReport r = variational_report(model, data, options);
  const std::string cal = r.calibration_csv();
  const std::string timing = r.timing_csv();
  CHECK(std::count(cal.begin(), cal.end(), '\n') == 11);
  CHECK(static_cast<std::size_t>(std::count(timing.begin(), timing.end(), '\n')) == r.positives + 1);
  CHECK(cal.rfind("bin,lower,upper,midpoint,mean_predicted,observed,count\n", 0) == 0);
  CHECK(timing.rfind("sequence_id,censored,window,event_index,event_time\n", 0) == 0);
}

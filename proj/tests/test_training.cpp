#include <doctest.h>

#include <cmath>

#include "adaptime/synth.hpp"
#include "adaptime/training.hpp"
#include "support.hpp"

using namespace adaptime;
using adaptime::testing::check_gradients;

namespace {

nlohmann::json full_config() {
  return {{"variant", "bayes-pstar"}, {"learning_rate", 0.01}, {"l2", 0.0},  {"prior_sigma", 0.5},
          {"embedding_dim", 16},      {"hidden_dim", 32},      {"batch_size", 64}, {"kl_scale", 1.0},
          {"epochs", 3},              {"seed", 1}};
}

std::string config_error(const nlohmann::json& j) {
  try {
    TrainConfig::from_json(j);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kConfig);
    return e.what();
  }
  FAIL("expected a config error");
  return {};
}

struct Splits {
  std::vector<LabeledSequence> train;
  std::vector<LabeledSequence> valid;
  std::size_t vocab = 0;
};

Splits synthetic_splits(std::size_t patients, std::uint64_t seed) {
  GeneratorConfig g;
  g.num_patients = patients;
  const SyntheticData synth = synthesize(g, seed);
  DataOptions options;
  options.split_seed = seed;
  PreparedData prepared = prepare_data(synth.events, synth.label_map(), options);
  return Splits{std::move(prepared.cache.train), std::move(prepared.cache.valid), prepared.vocabulary.size()};
}

std::vector<LabeledSequence> toy_sequences(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<Token> token(0, static_cast<Token>(vocab - 1));
  std::uniform_int_distribution<std::size_t> length(1, 8);
  std::vector<LabeledSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledSequence s{"t" + std::to_string(i), {}, {}, static_cast<int>(i % 2)};
    double t = 0.0;
    for (std::size_t k = length(rng); k > 0; --k) {
      s.tokens.push_back(token(rng));
      s.times.push_back(t += 1.0);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<const LabeledSequence*> pointers(const std::vector<LabeledSequence>& data) {
  std::vector<const LabeledSequence*> out;
  for (const auto& s : data) out.push_back(&s);
  return out;
}

ModelConfig small(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.vocab_size = 7;
  c.embedding_dim = 4;
  c.hidden_dim = 6;
  c.num_windows = 3;
  c.horizon_hours = 9.0;
  return c;
}

// Copies every shared parameter of `det` into `bayes`, with mu = the
// deterministic table and sigma collapsed to softplus(rho).
void bridge(const SequenceModel& det, SequenceModel& bayes, double rho) {
  bayes.variational().mu().value = det.deterministic().weights().value;
  bayes.variational().rho().value.fill(rho);
  const auto src = det.lstm().parameters();
  const auto dst = bayes.lstm().parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
  bayes.head().weight().value = det.head().weight().value;
  bayes.head().bias().value = det.head().bias().value;
}

}  // namespace

// ---- configuration ---------------------------------------------------------

TEST_CASE("config: round trip and optional keys") {
  const TrainConfig c = TrainConfig::from_json(full_config());
  CHECK(c.variant == Variant::kBayesPstar);
  CHECK(c.num_windows == 48);
  CHECK(c.grad_clip == 5.0);
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  nlohmann::json j = full_config();
  j["pooling"] = "sum";
  j["num_windows"] = 12;
  const TrainConfig d = TrainConfig::from_json(j);
  CHECK(d.pooling == PoolMode::kSum);
  CHECK(d.num_windows == 12);
}

TEST_CASE("config: a missing required field is named") {
  for (const char* key : {"variant", "learning_rate", "l2", "prior_sigma", "embedding_dim", "hidden_dim",
                          "batch_size", "kl_scale", "epochs", "seed"}) {
    nlohmann::json j = full_config();
    j.erase(key);
    INFO(key);
    CHECK(config_error(j).find(std::string("missing required field '") + key + "'") != std::string::npos);
  }
}

TEST_CASE("config: unknown fields, ranges and fixed batch size are all reported") {
  nlohmann::json j = full_config();
  j["learning_rat"] = 0.1;
  j["batch_size"] = 32;
  j["hidden_dim"] = 33;
  j["learning_rate"] = 1.0;
  const std::string message = config_error(j);
  CHECK(message.find("learning_rat'") != std::string::npos);
  CHECK(message.find("batch_size") != std::string::npos);
  CHECK(message.find("hidden_dim") != std::string::npos);
  CHECK(message.find("learning_rate must lie") != std::string::npos);
  j = full_config();
  j["variant"] = "lstm";
  CHECK(config_error(j).find("variant") != std::string::npos);
  j = full_config();
  j["data"] = nlohmann::json::object();
  CHECK_NOTHROW(TrainConfig::from_json(j, {"data"}));
}

// ---- loss ------------------------------------------------------------------

TEST_CASE("BCE from logits matches the probability-space oracle and stays finite") {
  Tape tape;
  const std::vector<double> z{-30, -3, -0.5, 0, 0.7, 4, 30};
  Tensor logits(Shape{z.size(), 1}, z);
  Tensor ones(Shape{z.size(), 1}, 1.0);
  Tensor zeros(Shape{z.size(), 1}, 0.0);
  const Var pos = bce_with_logits(tape.constant(logits), ones);
  const Var neg = bce_with_logits(tape.constant(logits), zeros);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    CHECK(pos.value()[i] == doctest::Approx(-std::log(p)).epsilon(1e-12));
    CHECK(neg.value()[i] == doctest::Approx(std::log(1.0 + std::exp(z[i]))).epsilon(1e-12));
  }
  const Var extreme = bce_with_logits(tape.constant(Tensor(Shape{1, 1}, 800.0)), Tensor(Shape{1, 1}, 0.0));
  CHECK(extreme.value()[0] == doctest::Approx(800.0));
}

TEST_CASE("ELBO terms: KL scaled by kl_scale / n_train, L2 on weight matrices") {
  const auto data = toy_sequences(5, 7, 1);
  const auto batch = pointers(data);
  SequenceModel model(small(Variant::kBayesCount), 2);
  TrainConfig config;
  config.kl_scale = 2.0;
  config.l2 = 0.003;
  Tape tape;
  const LossTerms terms = elbo_loss(tape, model, batch, config, 40, NoiseSpec{true, 3});
  CHECK(terms.kl == doctest::Approx(2.0 * model.variational().kl_to_prior() / 40.0).epsilon(1e-13));
  double l2 = 0.0;
  for (Parameter* p : model.penalised_parameters()) {
    for (double w : p->value.data()) l2 += w * w;
  }
  CHECK(terms.l2 == doctest::Approx(0.003 * l2).epsilon(1e-13));
  CHECK(terms.total.value().item() == doctest::Approx(terms.nll + terms.kl + terms.l2).epsilon(1e-13));
  config.kl_scale = 0.0;
  Tape again;
  CHECK(elbo_loss(again, model, batch, config, 40, {true, 3}).kl == 0.0);
}

TEST_CASE("ELBO gradients match central differences") {
  const auto data = toy_sequences(4, 7, 4);
  const auto batch = pointers(data);
  for (Variant v : kAllVariants) {
    SequenceModel model(small(v), 5);
    // Constant initial rho gives uniform precision, which puts equi-precise
    // boundaries exactly on ties; check at a generic point instead.
    if (model.bayesian()) {
      model.variational().rho().value = adaptime::testing::random_tensor({7, 4}, 50, -2.0, 0.5);
    }
    TrainConfig config;
    config.l2 = 0.01;
    const auto result = check_gradients(model.parameters(), [&](Tape& tape) {
      return elbo_loss(tape, model, batch, config, 10, NoiseSpec{true, 6}).total;
    });
    INFO(variant_name(v));
    CHECK(result.max_relative_error < 1e-4);
  }
}

TEST_CASE("degeneracy bridge: sigma -> 0, kl_scale = 0 and copied weights reproduce the deterministic model") {
  const auto data = toy_sequences(12, 7, 7);
  const std::vector<std::pair<Variant, Variant>> pairs{{Variant::kDetCount, Variant::kBayesCount},
                                                       {Variant::kDetTime, Variant::kBayesTime}};
  for (const auto& [d, b] : pairs) {
    const SequenceModel det(small(d), 8);
    SequenceModel bayes(small(b), 9);
    bridge(det, bayes, -30.0);
    const auto pd = predict(det, data, NoiseSpec{false, 0});
    const auto pb = predict(bayes, data, NoiseSpec{true, 10});
    for (std::size_t i = 0; i < data.size(); ++i) CHECK(std::abs(pd[i] - pb[i]) < 1e-10);
    TrainConfig config;
    config.kl_scale = 0.0;
    const auto batch = pointers(data);
    SequenceModel det_copy = det;
    Tape t1;
    Tape t2;
    const double ld = elbo_loss(t1, det_copy, batch, config, 12, {false, 0}).total.value().item();
    const double lb = elbo_loss(t2, bayes, batch, config, 12, {true, 10}).total.value().item();
    CHECK(std::abs(ld - lb) < 1e-10);
  }
}

// ---- optimiser -------------------------------------------------------------

TEST_CASE("Adam: first step moves by lr * sign(g) and bias correction holds") {
  Parameter p("p", Tensor::vector({1.0, -2.0, 0.5}));
  p.grad = Tensor::vector({0.3, -4.0, 1e-3});
  std::vector<Parameter*> params{&p};
  AdamState state;
  adam_step(params, state, 0.01);
  CHECK(state.step == 1);
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
  CHECK(p.value[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-9));
  CHECK(p.value[2] == doctest::Approx(0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-9));
  CHECK(state.first[0][1] == doctest::Approx(0.1 * -4.0));
  CHECK(state.second[0][1] == doctest::Approx(0.001 * 16.0));
}

TEST_CASE("Adam: a small step decreases a convex quadratic and converges on x^2") {
  Parameter x("x", Tensor::scalar(5.0));
  std::vector<Parameter*> params{&x};
  AdamState state;
  for (int i = 0; i < 100; ++i) {
    const double before = x.value[0] * x.value[0];
    x.grad = Tensor::scalar(2.0 * x.value[0]);
    adam_step(params, state, 0.1);
    if (i == 0) CHECK(x.value[0] * x.value[0] < before);
  }
  CHECK(std::abs(x.value[0]) < 0.5);
}

TEST_CASE("gradient clipping bounds the joint norm and reports the original") {
  Parameter a("a", Tensor::vector({0, 0}));
  Parameter b("b", Tensor::vector({0}));
  a.grad = Tensor::vector({3, 4});
  b.grad = Tensor::vector({12});
  std::vector<Parameter*> params{&a, &b};
  CHECK(clip_gradient_norm(params, 5.0) == doctest::Approx(13.0));
  const double after = std::sqrt(a.grad[0] * a.grad[0] + a.grad[1] * a.grad[1] + b.grad[0] * b.grad[0]);
  CHECK(after == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(a.grad[0] / a.grad[1] == doctest::Approx(0.75));
  CHECK(clip_gradient_norm(params, 100.0) == doctest::Approx(5.0));
  CHECK(after == doctest::Approx(5.0));
}

// ---- trainer ---------------------------------------------------------------

TEST_CASE("trainer: deterministic, resumable and logs epoch 0") {
  const Splits s = synthetic_splits(150, 11);
  TrainConfig c = TrainConfig::from_json(full_config());
  c.num_windows = 12;
  Trainer a(c, s.vocab, s.train, s.valid);
  std::vector<std::size_t> seen;
  a.train_to(3, [&](std::size_t epoch, const Trainer&) { seen.push_back(epoch); });
  CHECK(seen == std::vector<std::size_t>{0, 1, 2, 3});
  Trainer b(c, s.vocab, s.train, s.valid);
  b.train_to(1);
  b.train_to(3);
  CHECK(a.log() == b.log());
  const auto pa = a.model().parameters();
  const auto pb = b.model().parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  CHECK(a.log().front().epoch == 0);
  CHECK(a.log().front().split == "valid");
  CHECK(a.log().size() == 1 + 2 * 3);
  const std::string csv = metrics_csv(a.log());
  CHECK(csv.rfind("epoch,split,loss,auroc,auprc\n", 0) == 0);
  CHECK(a.validation_loss() == a.log().back().loss);
}

TEST_CASE("trainer: learning lowers validation loss on the synthetic task") {
  const Splits s = synthetic_splits(300, 12);
  TrainConfig c = TrainConfig::from_json(full_config());
  c.variant = Variant::kDetCount;
  Trainer t(c, s.vocab, s.train, s.valid);
  t.train_to(3);
  CHECK(t.log().back().loss < t.log().front().loss);
}

TEST_CASE("trainer: divergence is a numeric error with context") {
  const Splits s = synthetic_splits(100, 13);
  const TrainConfig c = TrainConfig::from_json(full_config());
  Trainer t(c, s.vocab, s.train, s.valid);
  t.model().head().weight().value.fill(1e307);
  try {
    t.train_to(1);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNumeric);
  }
}

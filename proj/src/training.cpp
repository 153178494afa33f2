#include "adaptime/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "adaptime/csv.hpp"
#include "adaptime/error.hpp"
#include "adaptime/evaluation.hpp"
#include "adaptime/random.hpp"

namespace adaptime {

namespace {

bool is_count(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

std::string_view pooling_key(PoolMode mode) { return mode == PoolMode::kMean ? "mean" : "sum"; }

template <typename T, std::size_t N>
bool one_of(T value, const T (&options)[N]) {
  return std::find(std::begin(options), std::end(options), value) != std::end(options);
}

template <std::size_t N>
std::string list_string(const std::size_t (&options)[N]) {
  std::string out = "{";
  for (std::size_t i = 0; i < N; ++i) out += (i ? ", " : "") + std::to_string(options[i]);
  return out + "}";
}

double metric_or_nan(double (*metric)(std::span<const double>, std::span<const int>),
                     std::span<const double> scores, std::span<const int> labels) {
  const bool pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
  const bool neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
  if (!pos || !neg) return std::nan("");
  return metric(scores, labels);
}

double frobenius(const Tensor& t) {
  double ss = 0.0;
  for (double v : t.data()) ss += v * v;
  return std::sqrt(ss);
}

}  // namespace

// ---- config ----------------------------------------------------------------

std::vector<std::string> TrainConfig::problems() const {
  std::vector<std::string> out;
  auto check = [&](bool ok, std::string message) {
    if (!ok) out.push_back(std::move(message));
  };
  check(learning_rate >= 1e-5 && learning_rate <= 0.1, "learning_rate must lie in [1e-5, 0.1]");
  check(l2 >= 0.0 && l2 <= 0.01, "l2 must lie in [0, 0.01]");
  check(prior_sigma >= 0.1 && prior_sigma <= 1.0, "prior_sigma must lie in [0.1, 1.0]");
  check(one_of(embedding_dim, kEmbeddingDims), "embedding_dim must be one of " + list_string(kEmbeddingDims));
  check(one_of(hidden_dim, kHiddenDims), "hidden_dim must be one of " + list_string(kHiddenDims));
  check(batch_size == kBatchSize, "batch_size must be 64");
  check(std::isfinite(kl_scale) && kl_scale >= 0.0, "kl_scale must be a finite number >= 0");
  check(num_windows >= 1, "num_windows must be >= 1");
  check(std::isfinite(horizon_hours) && horizon_hours > 0.0, "horizon_hours must be positive");
  check(std::isfinite(grad_clip) && grad_clip > 0.0, "grad_clip must be positive");
  return out;
}

void TrainConfig::validate() const {
  const auto list = problems();
  if (list.empty()) return;
  std::string message = "invalid training config:";
  for (const auto& p : list) message += "\n  - " + p;
  fail(ErrorKind::kConfig, message);
}

ModelConfig TrainConfig::model_config(std::size_t vocab_size) const {
  ModelConfig m;
  m.variant = variant;
  m.vocab_size = vocab_size;
  m.embedding_dim = embedding_dim;
  m.hidden_dim = hidden_dim;
  m.num_windows = num_windows;
  m.horizon_hours = horizon_hours;
  m.prior_sigma = prior_sigma;
  m.pooling = pooling;
  return m;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"variant", std::string(variant_name(variant))},
          {"learning_rate", learning_rate},
          {"l2", l2},
          {"prior_sigma", prior_sigma},
          {"embedding_dim", embedding_dim},
          {"hidden_dim", hidden_dim},
          {"batch_size", batch_size},
          {"kl_scale", kl_scale},
          {"epochs", epochs},
          {"seed", seed},
          {"num_windows", num_windows},
          {"horizon_hours", horizon_hours},
          {"pooling", std::string(pooling_key(pooling))},
          {"grad_clip", grad_clip}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const std::set<std::string>& extra_keys) {
  if (!j.is_object()) fail(ErrorKind::kConfig, "training config must be a JSON object");
  TrainConfig c;
  std::vector<std::string> errors;
  std::set<std::string> known(extra_keys);

  auto field = [&](const char* key, bool required, auto&& read) {
    known.insert(key);
    if (!j.contains(key)) {
      if (required) errors.push_back(std::string("missing required field '") + key + "'");
      return;
    }
    if (const std::string problem = read(j.at(key)); !problem.empty()) {
      errors.push_back(std::string("field '") + key + "' " + problem);
    }
  };
  auto real = [](double& out) {
    return [&out](const nlohmann::json& v) -> std::string {
      if (!v.is_number()) return "must be a number";
      out = v.get<double>();
      return {};
    };
  };
  auto count = [](std::size_t& out) {
    return [&out](const nlohmann::json& v) -> std::string {
      if (!is_count(v)) return "must be a non-negative integer";
      out = v.get<std::size_t>();
      return {};
    };
  };

  field("variant", true, [&](const nlohmann::json& v) -> std::string {
    if (!v.is_string()) return "must be a string";
    try {
      c.variant = parse_variant(v.get<std::string>());
    } catch (const Error& e) {
      return e.what();
    }
    return {};
  });
  field("learning_rate", true, real(c.learning_rate));
  field("l2", true, real(c.l2));
  field("prior_sigma", true, real(c.prior_sigma));
  field("embedding_dim", true, count(c.embedding_dim));
  field("hidden_dim", true, count(c.hidden_dim));
  field("batch_size", true, count(c.batch_size));
  field("kl_scale", true, real(c.kl_scale));
  field("epochs", true, count(c.epochs));
  field("seed", true, [&](const nlohmann::json& v) -> std::string {
    if (!is_count(v)) return "must be a non-negative integer";
    c.seed = v.get<std::uint64_t>();
    return {};
  });
  field("num_windows", false, count(c.num_windows));
  field("horizon_hours", false, real(c.horizon_hours));
  field("pooling", false, [&](const nlohmann::json& v) -> std::string {
    if (v == "mean") c.pooling = PoolMode::kMean;
    else if (v == "sum") c.pooling = PoolMode::kSum;
    else return "must be \"mean\" or \"sum\"";
    return {};
  });
  field("grad_clip", false, real(c.grad_clip));
  for (const auto& item : j.items()) {
    if (!known.contains(item.key())) errors.push_back("unknown field '" + item.key() + "'");
  }
  for (auto& p : c.problems()) errors.push_back(std::move(p));
  if (!errors.empty()) {
    std::string message = "invalid training config:";
    for (const auto& e : errors) message += "\n  - " + e;
    fail(ErrorKind::kConfig, message);
  }
  return c;
}

// ---- loss ------------------------------------------------------------------

Var bce_with_logits(const Var& logits, const Tensor& labels) {
  Var y = logits.tape().constant(labels);
  return softplus(logits) - logits * y;
}

LossTerms elbo_loss(Tape& tape, SequenceModel& model, std::span<const LabeledSequence* const> batch,
                    const TrainConfig& config, std::size_t n_train, const NoiseSpec& noise) {
  if (n_train == 0) fail(ErrorKind::kData, "elbo_loss: empty training set");
  const ForwardOutput fwd = model.forward(tape, batch, noise);
  Tensor labels(Shape{batch.size(), 1});
  for (std::size_t b = 0; b < batch.size(); ++b) labels[b] = static_cast<double>(batch[b]->label);

  LossTerms out;
  out.logits = fwd.terminal_logits;
  Var nll = mean(bce_with_logits(fwd.terminal_logits, labels));
  out.nll = nll.value().item();
  out.total = nll;
  if (model.bayesian() && config.kl_scale > 0.0) {
    Var kl = scale(model.kl(tape), config.kl_scale / static_cast<double>(n_train));
    out.kl = kl.value().item();
    out.total = out.total + kl;
  }
  if (config.l2 > 0.0) {
    Var penalty;
    for (Parameter* p : model.penalised_parameters()) {
      Var w = bind(tape, *p);
      Var term = sum(w * w);
      penalty = penalty.valid() ? penalty + term : term;
    }
    if (penalty.valid()) {
      penalty = scale(penalty, config.l2);
      out.l2 = penalty.value().item();
      out.total = out.total + penalty;
    }
  }
  return out;
}

// ---- optimiser -------------------------------------------------------------

void adam_step(std::span<Parameter* const> params, AdamState& state, double learning_rate,
               const AdamOptions& options) {
  if (state.first.empty()) {
    for (const Parameter* p : params) {
      state.first.push_back(Tensor::zeros_like(p->value));
      state.second.push_back(Tensor::zeros_like(p->value));
    }
  }
  if (state.first.size() != params.size()) {
    fail(ErrorKind::kShape, "adam: parameter count changed between steps");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(options.beta1, t);
  const double c2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = state.first[k];
    Tensor& v = state.second[k];
    if (m.shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
      fail(ErrorKind::kShape, "adam: buffer shape mismatch for '" + p.name + "'");
    }
    auto value = p.value.data();
    auto grad = p.grad.data();
    auto m1 = m.data();
    auto m2 = v.data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      m1[i] = options.beta1 * m1[i] + (1.0 - options.beta1) * grad[i];
      m2[i] = options.beta2 * m2[i] + (1.0 - options.beta2) * grad[i] * grad[i];
      value[i] -= learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + options.epsilon);
    }
  }
}

double clip_gradient_norm(std::span<Parameter* const> params, double max_norm) {
  double ss = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.data()) ss += g * g;
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Parameter* p : params) {
      for (double& g : p->grad.data()) g *= factor;
    }
  }
  return norm;
}

// ---- training loop ---------------------------------------------------------

std::string metrics_csv(std::span<const MetricRow> rows) {
  std::string out = "epoch,split,loss,auroc,auprc\n";
  for (const MetricRow& r : rows) {
    out += std::to_string(r.epoch) + ',' + r.split + ',' + format_double(r.loss) + ',' +
           format_double(r.auroc) + ',' + format_double(r.auprc) + '\n';
  }
  return out;
}

std::uint64_t evaluation_noise_seed(std::uint64_t seed) { return derive_seed({seed, 0xe7a1ULL}); }

Trainer::Trainer(const TrainConfig& config, std::size_t vocab_size,
                 std::span<const LabeledSequence> train, std::span<const LabeledSequence> valid)
    : config_(config), train_(train), valid_(valid) {
  config_.validate();
  if (train_.empty()) fail(ErrorKind::kData, "training split is empty");
  model_ = SequenceModel(config_.model_config(vocab_size), config_.seed);
}

SplitMetrics Trainer::evaluate(std::span<const LabeledSequence> data) const {
  SplitMetrics m;
  if (data.empty()) {
    m.loss = m.auroc = m.auprc = std::nan("");
    return m;
  }
  const NoiseSpec noise{model_.bayesian(), evaluation_noise_seed(config_.seed)};
  const std::vector<double> logits = predict_logits(model_, data, noise, config_.batch_size);
  const std::vector<int> labels = labels_of(data);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    total += stable_softplus(logits[i]) - labels[i] * logits[i];
  }
  m.loss = total / static_cast<double>(logits.size());
  m.auroc = metric_or_nan(&auroc, logits, labels);
  m.auprc = metric_or_nan(&auprc, logits, labels);
  return m;
}

void Trainer::train_to(std::size_t epochs, const EpochCallback& on_epoch) {
  if (!started_) {
    started_ = true;
    last_valid_ = evaluate(valid_);
    log_.push_back(MetricRow{0, "valid", last_valid_.loss, last_valid_.auroc, last_valid_.auprc});
    if (on_epoch) on_epoch(0, *this);
  }
  while (epoch_ < epochs) {
    run_epoch();
    last_valid_ = evaluate(valid_);
    log_.push_back(MetricRow{epoch_, "valid", last_valid_.loss, last_valid_.auroc, last_valid_.auprc});
    if (on_epoch) on_epoch(epoch_, *this);
  }
}

void Trainer::run_epoch() {
  const std::size_t epoch = epoch_ + 1;
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed({config_.seed, 0x5b0ffULL, epoch}));
  std::shuffle(order.begin(), order.end(), rng);
  const NoiseSpec noise{true, derive_seed({config_.seed, 0x40153ULL, epoch})};
  const std::vector<Parameter*> params = model_.parameters();

  double loss_sum = 0.0;
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t start = 0, batch_no = 0; start < order.size(); start += config_.batch_size, ++batch_no) {
    const std::size_t end = std::min(order.size(), start + config_.batch_size);
    std::vector<const LabeledSequence*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&train_[order[i]]);
    for (Parameter* p : params) p->zero_grad();
    try {
      Tape tape;
      const LossTerms loss = elbo_loss(tape, model_, batch, config_, train_.size(), noise);
      if (!std::isfinite(loss.total.value().item())) fail(ErrorKind::kNumeric, "loss is not finite");
      tape.backward(loss.total);
      const double norm = clip_gradient_norm(params, config_.grad_clip);
      if (!std::isfinite(norm)) fail(ErrorKind::kNumeric, "gradient norm is not finite");
      adam_step(params, adam_, config_.learning_rate);
      loss_sum += loss.total.value().item() * static_cast<double>(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        scores.push_back(loss.logits.value()[b]);
        labels.push_back(batch[b]->label);
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kNumeric) throw;
      fail(ErrorKind::kNumeric, "training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_no) + ": " + e.what() + "\n" + diagnostics());
    }
  }
  epoch_ = epoch;
  log_.push_back(MetricRow{epoch_, "train", loss_sum / static_cast<double>(order.size()),
                           metric_or_nan(&auroc, scores, labels), metric_or_nan(&auprc, scores, labels)});
}

std::string Trainer::diagnostics() const {
  std::ostringstream out;
  out << "parameter norms:";
  for (const Parameter* p : model_.parameters()) {
    out << "\n  " << p->name << ": |value|=" << frobenius(p->value) << " |grad|=" << frobenius(p->grad);
  }
  if (model_.bayesian()) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (double rho : model_.variational().rho().value.data()) {
      const double sigma = stable_softplus(rho);
      lo = std::min(lo, sigma);
      hi = std::max(hi, sigma);
    }
    out << "\nsigma range: [" << lo << ", " << hi << "]";
  }
  return out.str();
}

}  // namespace adaptime

#include "adaptime/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>

#include "adaptime/csv.hpp"
#include "adaptime/error.hpp"
#include "adaptime/random.hpp"

namespace adaptime {

namespace {

Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Rng rng(seed);
  std::uniform_real_distribution<double> uniform(-limit, limit);
  Tensor t(Shape{fan_in, fan_out});
  for (double& v : t.data()) v = uniform(rng);
  return t;
}

// Rows of the result are orthonormal: the transpose of a (4h x h) matrix with
// orthonormal columns, from QR of a Gaussian matrix with R's signs folded in.
Tensor orthogonal_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  const Tensor g = standard_normal(cols, rows, seed);
  Eigen::MatrixXd a(cols, rows);
  for (std::size_t i = 0; i < cols; ++i) {
    for (std::size_t j = 0; j < rows; ++j) a(i, j) = g(i, j);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(cols, rows);
  const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(rows, rows).triangularView<Eigen::Upper>();
  for (std::size_t j = 0; j < rows; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  Tensor out(Shape{rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = q(j, i);
  }
  return out;
}

Tensor affine_vector(std::size_t n, double value) { return Tensor(Shape{n}, value); }

void require_initial_invariants(const Tensor& recurrent, const Tensor& bias, std::size_t h) {
  const std::size_t g = recurrent.cols();
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t b = 0; b < h; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g; ++j) dot += recurrent(a, j) * recurrent(b, j);
      if (std::abs(dot - (a == b ? 1.0 : 0.0)) > 1e-10) {
        fail(ErrorKind::kNumeric, "lstm init: recurrent weights are not orthonormal");
      }
    }
  }
  for (std::size_t j = 0; j < g; ++j) {
    if (bias[j] != (j >= h && j < 2 * h ? 1.0 : 0.0)) fail(ErrorKind::kNumeric, "lstm init: bad gate bias");
  }
}

}  // namespace

std::string_view variant_name(Variant variant) {
  switch (variant) {
    case Variant::kDetTime: return "det-time";
    case Variant::kDetCount: return "det-count";
    case Variant::kBayesTime: return "bayes-time";
    case Variant::kBayesCount: return "bayes-count";
    case Variant::kBayesPstar: return "bayes-pstar";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  fail(ErrorKind::kConfig, "unknown variant '" + std::string(name) +
                               "' (expected det-time, det-count, bayes-time, bayes-count, bayes-pstar)");
}

bool is_bayesian(Variant variant) {
  return variant == Variant::kBayesTime || variant == Variant::kBayesCount ||
         variant == Variant::kBayesPstar;
}

WindowPolicy window_policy(Variant variant) {
  switch (variant) {
    case Variant::kDetTime:
    case Variant::kBayesTime: return WindowPolicy::kFixedTime;
    case Variant::kDetCount:
    case Variant::kBayesCount: return WindowPolicy::kFixedCount;
    case Variant::kBayesPstar: return WindowPolicy::kCumulativePrecision;
  }
  return WindowPolicy::kFixedCount;
}

void ModelConfig::validate() const {
  std::string problems;
  auto check = [&](bool ok, const char* msg) {
    if (!ok) problems += std::string(problems.empty() ? "" : "; ") + msg;
  };
  check(vocab_size > 0, "vocab_size must be positive");
  check(embedding_dim > 0, "embedding_dim must be positive");
  check(hidden_dim > 0, "hidden_dim must be positive");
  check(num_windows > 0, "num_windows must be positive");
  check(horizon_hours > 0.0, "horizon_hours must be positive");
  check(!is_bayesian(variant) || prior_sigma > 0.0, "prior_sigma must be positive");
  if (!problems.empty()) fail(ErrorKind::kConfig, "model config: " + problems);
}

// ---- LayerNormLstm ---------------------------------------------------------

LayerNormLstm::LayerNormLstm(std::size_t input_dim, std::size_t hidden_dim, std::uint64_t seed) {
  const std::size_t g = 4 * hidden_dim;
  input_weights_ = Parameter("lstm.input_weights", glorot_uniform(input_dim, g, derive_seed({seed, 1})));
  recurrent_weights_ =
      Parameter("lstm.recurrent_weights", orthogonal_rows(hidden_dim, g, derive_seed({seed, 2})));
  Tensor bias(Shape{g});
  for (std::size_t j = hidden_dim; j < 2 * hidden_dim; ++j) bias[j] = 1.0;
  bias_ = Parameter("lstm.bias", std::move(bias));
  ln_input_gain_ = Parameter("lstm.ln_input_gain", affine_vector(g, 1.0));
  ln_input_bias_ = Parameter("lstm.ln_input_bias", affine_vector(g, 0.0));
  ln_recurrent_gain_ = Parameter("lstm.ln_recurrent_gain", affine_vector(g, 1.0));
  ln_recurrent_bias_ = Parameter("lstm.ln_recurrent_bias", affine_vector(g, 0.0));
  ln_cell_gain_ = Parameter("lstm.ln_cell_gain", affine_vector(hidden_dim, 1.0));
  ln_cell_bias_ = Parameter("lstm.ln_cell_bias", affine_vector(hidden_dim, 0.0));
  require_initial_invariants(recurrent_weights_.value, bias_.value, hidden_dim);
}

LayerNormLstm::State LayerNormLstm::initial_state(Tape& tape, std::size_t batch) const {
  const Tensor zeros(Shape{batch, hidden_dim()});
  return State{tape.constant(zeros), tape.constant(zeros)};
}

template <typename Self>
LayerNormLstm::State LayerNormLstm::step_impl(Self& self, Tape& tape, const Var& x,
                                              const State& state, const Tensor* keep) {
  const std::size_t h = self.hidden_dim();
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != self.input_dim() || state.h.value().rows() != xv.rows() ||
      state.h.value().cols() != h) {
    fail(ErrorKind::kShape, "lstm_step: input " + shape_string(xv.shape()) + " vs state " +
                                shape_string(state.h.value().shape()));
  }
  const Var from_input = layer_norm(matmul(x, bind(tape, self.input_weights_))) *
                             bind(tape, self.ln_input_gain_) +
                         bind(tape, self.ln_input_bias_);
  const Var from_state = layer_norm(matmul(state.h, bind(tape, self.recurrent_weights_))) *
                             bind(tape, self.ln_recurrent_gain_) +
                         bind(tape, self.ln_recurrent_bias_);
  const Var preact = from_input + from_state + bind(tape, self.bias_);
  const Var in_gate = sigmoid(slice_cols(preact, 0, h));
  const Var forget_gate = sigmoid(slice_cols(preact, h, 2 * h));
  const Var candidate = tanh(slice_cols(preact, 2 * h, 3 * h));
  const Var out_gate = sigmoid(slice_cols(preact, 3 * h, 4 * h));
  const Var c = forget_gate * state.c + in_gate * candidate;
  const Var normed_c =
      layer_norm(c) * bind(tape, self.ln_cell_gain_) + bind(tape, self.ln_cell_bias_);
  const Var hidden = out_gate * tanh(normed_c);
  if (keep == nullptr) return State{hidden, c};
  if (keep->rows() != xv.rows() || keep->cols() != 1) {
    fail(ErrorKind::kShape, "lstm_step: mask " + shape_string(keep->shape()) + " for batch of " +
                                std::to_string(xv.rows()));
  }
  Tensor hold(keep->shape());
  for (std::size_t i = 0; i < hold.size(); ++i) hold[i] = 1.0 - (*keep)[i];
  const Var keep_var = tape.constant(*keep);
  const Var hold_var = tape.constant(std::move(hold));
  return State{keep_var * hidden + hold_var * state.h, keep_var * c + hold_var * state.c};
}

LayerNormLstm::State LayerNormLstm::step(Tape& tape, const Var& x, const State& state,
                                         const Tensor* keep) {
  return step_impl(*this, tape, x, state, keep);
}

LayerNormLstm::State LayerNormLstm::step(Tape& tape, const Var& x, const State& state,
                                         const Tensor* keep) const {
  return step_impl(*this, tape, x, state, keep);
}

std::vector<Parameter*> LayerNormLstm::parameters() {
  return {&input_weights_,     &recurrent_weights_, &bias_,         &ln_input_gain_,
          &ln_input_bias_,     &ln_recurrent_gain_, &ln_recurrent_bias_, &ln_cell_gain_,
          &ln_cell_bias_};
}

std::vector<const Parameter*> LayerNormLstm::parameters() const {
  auto mutable_params = const_cast<LayerNormLstm*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

// ---- OutputHead -------------------------------------------------------------

OutputHead::OutputHead(std::size_t hidden_dim, std::uint64_t seed)
    : weight_("head.weight", glorot_uniform(hidden_dim, 1, seed)),
      bias_("head.bias", Tensor(Shape{1}, 0.0)) {}

// ---- SequenceModel ------------------------------------------------------------

Tensor sequence_noise(const LabeledSequence& seq, std::size_t dim, const NoiseSpec& noise) {
  if (!noise.sample) return Tensor(Shape{seq.size(), dim});
  return standard_normal(seq.size(), dim, derive_seed({noise.seed, fnv1a(seq.id)}));
}

SequenceModel::SequenceModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  if (bayesian()) {
    variational_.emplace(config.vocab_size, config.embedding_dim, config.prior_sigma,
                         derive_seed({seed, 10}));
  } else {
    deterministic_.emplace(config.vocab_size, config.embedding_dim, derive_seed({seed, 10}));
  }
  lstm_ = LayerNormLstm(config.embedding_dim, config.hidden_dim, derive_seed({seed, 20}));
  head_ = OutputHead(config.hidden_dim, derive_seed({seed, 30}));
}

VariationalEmbedding& SequenceModel::variational() {
  if (!variational_) fail(ErrorKind::kConfig, "model has no variational embedding");
  return *variational_;
}
const VariationalEmbedding& SequenceModel::variational() const {
  if (!variational_) fail(ErrorKind::kConfig, "model has no variational embedding");
  return *variational_;
}
DeterministicEmbedding& SequenceModel::deterministic() {
  if (!deterministic_) fail(ErrorKind::kConfig, "model has no deterministic embedding");
  return *deterministic_;
}
const DeterministicEmbedding& SequenceModel::deterministic() const {
  if (!deterministic_) fail(ErrorKind::kConfig, "model has no deterministic embedding");
  return *deterministic_;
}

PrecisionSequence SequenceModel::precision_sequence(const LabeledSequence& seq) const {
  const auto& table = variational();
  std::vector<double> log_p(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) log_p[i] = table.token_log_precision(seq.tokens[i]);
  return cumulative_precision_from_log(log_p);
}

WindowPlan SequenceModel::plan(const LabeledSequence& seq) const {
  if (seq.tokens.empty()) fail(ErrorKind::kData, "sequence '" + seq.id + "' has no events");
  switch (window_policy(config_.variant)) {
    case WindowPolicy::kFixedTime:
      return fixed_time_plan(seq.times, config_.horizon_hours, config_.num_windows);
    case WindowPolicy::kFixedCount:
      return fixed_count_plan(seq.size(), config_.num_windows);
    case WindowPolicy::kCumulativePrecision:
      return equiprecise_plan(precision_sequence(seq), config_.num_windows);
  }
  fail(ErrorKind::kConfig, "unhandled window policy");
}

template <typename Self>
ForwardOutput SequenceModel::forward_impl(Self& self, Tape& tape,
                                          std::span<const LabeledSequence* const> batch,
                                          const NoiseSpec& noise) {
  if (batch.empty()) fail(ErrorKind::kShape, "forward: empty batch");
  ForwardOutput out;
  const std::size_t d = self.config_.embedding_dim;
  std::vector<Token> tokens;
  std::vector<std::size_t> offsets;
  for (const LabeledSequence* seq : batch) {
    out.plans.push_back(self.plan(*seq));
    offsets.push_back(tokens.size());
    tokens.insert(tokens.end(), seq->tokens.begin(), seq->tokens.end());
  }
  Var embeddings;
  if (self.variational_) {
    Tensor eps(Shape{tokens.size(), d});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Tensor part = sequence_noise(*batch[b], d, noise);
      std::copy(part.data().begin(), part.data().end(), eps.data().begin() + offsets[b] * d);
    }
    embeddings = self.variational_->sample(tape, tokens, eps);
  } else {
    embeddings = self.deterministic_->lookup(tape, tokens);
  }
  const std::vector<Var> steps =
      aggregate_batch(embeddings, out.plans, offsets, self.config_.pooling);

  const std::size_t n = batch.size();
  LayerNormLstm::State state = self.lstm_.initial_state(tape, n);
  Tensor keep(Shape{n, 1});
  for (std::size_t k = 0; k < steps.size(); ++k) {
    std::size_t active = 0;
    for (std::size_t b = 0; b < n; ++b) {
      keep[b] = out.plans[b].occupied[k] ? 1.0 : 0.0;
      active += out.plans[b].occupied[k] ? 1 : 0;
    }
    if (active == n) {
      state = self.lstm_.step(tape, steps[k], state, nullptr);
    } else if (active > 0) {
      state = self.lstm_.step(tape, steps[k], state, &keep);
    }
    out.step_logits.push_back(self.head_.logits(tape, state.h));
  }
  out.terminal_logits = out.step_logits.back();
  return out;
}

ForwardOutput SequenceModel::forward(Tape& tape, std::span<const LabeledSequence* const> batch,
                                     const NoiseSpec& noise) {
  return forward_impl(*this, tape, batch, noise);
}

ForwardOutput SequenceModel::forward(Tape& tape, std::span<const LabeledSequence* const> batch,
                                     const NoiseSpec& noise) const {
  return forward_impl(*this, tape, batch, noise);
}

Var SequenceModel::kl(Tape& tape) {
  if (!variational_) return tape.constant(Tensor::scalar(0.0));
  return variational_->kl_to_prior(tape);
}

std::vector<Parameter*> SequenceModel::parameters() {
  std::vector<Parameter*> out;
  if (variational_) {
    out.push_back(&variational_->mu());
    out.push_back(&variational_->rho());
  } else {
    out.push_back(&deterministic_->weights());
  }
  for (Parameter* p : lstm_.parameters()) out.push_back(p);
  out.push_back(&head_.weight());
  out.push_back(&head_.bias());
  return out;
}

std::vector<const Parameter*> SequenceModel::parameters() const {
  auto mutable_params = const_cast<SequenceModel*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

std::vector<Parameter*> SequenceModel::penalised_parameters() {
  std::vector<Parameter*> out;
  if (deterministic_) out.push_back(&deterministic_->weights());
  out.push_back(&lstm_.input_weights());
  out.push_back(&lstm_.recurrent_weights());
  out.push_back(&head_.weight());
  return out;
}

namespace {

template <typename Fn>
void for_each_batch(std::span<const LabeledSequence> data, std::size_t batch_size, Fn fn) {
  if (batch_size == 0) fail(ErrorKind::kConfig, "batch size must be positive");
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<const LabeledSequence*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&data[i]);
    fn(start, batch);
  }
}

}  // namespace

std::vector<double> predict_logits(const SequenceModel& model, std::span<const LabeledSequence> data,
                                   const NoiseSpec& noise, std::size_t batch_size) {
  std::vector<double> out(data.size());
  for_each_batch(data, batch_size, [&](std::size_t start, const auto& batch) {
    Tape tape;
    const ForwardOutput fwd = model.forward(tape, batch, noise);
    for (std::size_t b = 0; b < batch.size(); ++b) out[start + b] = fwd.terminal_logits.value()[b];
  });
  return out;
}

std::vector<double> predict(const SequenceModel& model, std::span<const LabeledSequence> data,
                            const NoiseSpec& noise, std::size_t batch_size) {
  std::vector<double> out = predict_logits(model, data, noise, batch_size);
  for (double& z : out) z = stable_sigmoid(z);
  return out;
}

std::vector<Trajectory> predict_trajectories(const SequenceModel& model,
                                             std::span<const LabeledSequence> data,
                                             const NoiseSpec& noise, std::size_t batch_size) {
  std::vector<Trajectory> out(data.size());
  for_each_batch(data, batch_size, [&](std::size_t start, const auto& batch) {
    Tape tape;
    ForwardOutput fwd = model.forward(tape, batch, noise);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Trajectory& t = out[start + b];
      for (const Var& logits : fwd.step_logits) t.probabilities.push_back(stable_sigmoid(logits.value()[b]));
      t.plan = std::move(fwd.plans[b]);
    }
  });
  return out;
}

std::string window_table_csv(const SequenceModel& model, std::span<const LabeledSequence> data,
                             std::optional<std::size_t> epoch) {
  std::string out = epoch ? "epoch," : "";
  out += "sequence_id,event_index,time,token,log_precision,precision,cumulative_precision,window\n";
  const std::string prefix = epoch ? std::to_string(*epoch) + "," : "";
  for (const LabeledSequence& seq : data) {
    const WindowPlan plan = model.plan(seq);
    std::optional<PrecisionSequence> ps;
    if (model.bayesian()) ps = model.precision_sequence(seq);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      out += prefix + csv_field(seq.id) + ',' + std::to_string(i) + ',' + format_double(seq.times[i]) + ',' +
             std::to_string(seq.tokens[i]) + ',';
      if (ps) {
        out += format_double(model.variational().token_log_precision(seq.tokens[i])) + ',' +
               format_double(ps->precision[i]) + ',' + format_double(ps->cumulative[i]) + ',';
      } else {
        out += ",,,";
      }
      out += std::to_string(plan.assignment[i]) + '\n';
    }
  }
  return out;
}

}  // namespace adaptime

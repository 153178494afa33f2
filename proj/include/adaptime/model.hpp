#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "adaptime/autodiff.hpp"
#include "adaptime/embedding.hpp"
#include "adaptime/sequence.hpp"
#include "adaptime/windowing.hpp"

namespace adaptime {

// Embedding kind x windowing policy combinations.
enum class Variant { kDetTime, kDetCount, kBayesTime, kBayesCount, kBayesPstar };
enum class WindowPolicy { kFixedTime, kFixedCount, kCumulativePrecision };

std::string_view variant_name(Variant variant);
Variant parse_variant(std::string_view name);
bool is_bayesian(Variant variant);
WindowPolicy window_policy(Variant variant);
inline constexpr Variant kAllVariants[] = {Variant::kDetTime, Variant::kDetCount,
                                           Variant::kBayesTime, Variant::kBayesCount,
                                           Variant::kBayesPstar};

struct ModelConfig {
  Variant variant = Variant::kBayesPstar;
  std::size_t vocab_size = 0;
  std::size_t embedding_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t num_windows = 48;
  double horizon_hours = 48.0;
  double prior_sigma = 0.5;
  PoolMode pooling = PoolMode::kMean;

  void validate() const;
};

// LSTM with layer normalisation on the input and recurrent pre-activation
// streams and on the cell state. Gate order in the 4h block: i, f, g, o.
// Weights multiply from the right: preact = x * W_in + h * W_rec.
class LayerNormLstm {
 public:
  struct State {
    Var h;
    Var c;
  };

  LayerNormLstm() = default;
  LayerNormLstm(std::size_t input_dim, std::size_t hidden_dim, std::uint64_t seed);

  std::size_t input_dim() const { return input_weights_.value.rows(); }
  std::size_t hidden_dim() const { return recurrent_weights_.value.rows(); }

  State initial_state(Tape& tape, std::size_t batch) const;

  // `keep` (B x 1, entries 0/1) selects rows that advance; other rows keep
  // their previous state unchanged. Null means every row advances.
  State step(Tape& tape, const Var& x, const State& state, const Tensor* keep);
  State step(Tape& tape, const Var& x, const State& state, const Tensor* keep) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  Parameter& input_weights() { return input_weights_; }
  Parameter& recurrent_weights() { return recurrent_weights_; }
  Parameter& bias() { return bias_; }
  const Parameter& input_weights() const { return input_weights_; }
  const Parameter& recurrent_weights() const { return recurrent_weights_; }
  const Parameter& bias() const { return bias_; }

 private:
  template <typename Self>
  static State step_impl(Self& self, Tape& tape, const Var& x, const State& state,
                         const Tensor* keep);

  Parameter input_weights_;      // d x 4h
  Parameter recurrent_weights_;  // h x 4h
  Parameter bias_;               // 4h, forget slice starts at 1
  Parameter ln_input_gain_, ln_input_bias_;
  Parameter ln_recurrent_gain_, ln_recurrent_bias_;
  Parameter ln_cell_gain_, ln_cell_bias_;
};

class OutputHead {
 public:
  OutputHead() = default;
  OutputHead(std::size_t hidden_dim, std::uint64_t seed);

  Var logits(Tape& tape, const Var& h) { return matmul(h, bind(tape, weight_)) + bind(tape, bias_); }
  Var logits(Tape& tape, const Var& h) const {
    return matmul(h, bind(tape, weight_)) + bind(tape, bias_);
  }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  Parameter weight_;  // h x 1
  Parameter bias_;    // scalar (shape [1])
};

// Embedding noise for one forward pass. With sample=false a variational model
// uses its posterior means.
struct NoiseSpec {
  bool sample = true;
  std::uint64_t seed = 0;
};

// Per-sequence noise stream; depends only on the seed and the sequence id so
// batching never changes what a sequence sees.
Tensor sequence_noise(const LabeledSequence& seq, std::size_t dim, const NoiseSpec& noise);

struct ForwardOutput {
  Var terminal_logits;          // B x 1, state after the last occupied window
  std::vector<Var> step_logits;  // W entries of B x 1
  std::vector<WindowPlan> plans;
};

class SequenceModel {
 public:
  SequenceModel() = default;
  SequenceModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  bool bayesian() const { return is_bayesian(config_.variant); }

  PrecisionSequence precision_sequence(const LabeledSequence& seq) const;
  WindowPlan plan(const LabeledSequence& seq) const;

  ForwardOutput forward(Tape& tape, std::span<const LabeledSequence* const> batch,
                        const NoiseSpec& noise);
  ForwardOutput forward(Tape& tape, std::span<const LabeledSequence* const> batch,
                        const NoiseSpec& noise) const;

  // KL(q || prior) of the embedding table; zero for deterministic models.
  Var kl(Tape& tape);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  // Parameters subject to the L2 penalty (weight matrices, not biases/gains or
  // variational parameters).
  std::vector<Parameter*> penalised_parameters();

  VariationalEmbedding& variational();
  const VariationalEmbedding& variational() const;
  DeterministicEmbedding& deterministic();
  const DeterministicEmbedding& deterministic() const;
  LayerNormLstm& lstm() { return lstm_; }
  const LayerNormLstm& lstm() const { return lstm_; }
  OutputHead& head() { return head_; }
  const OutputHead& head() const { return head_; }

 private:
  template <typename Self>
  static ForwardOutput forward_impl(Self& self, Tape& tape,
                                    std::span<const LabeledSequence* const> batch,
                                    const NoiseSpec& noise);

  ModelConfig config_;
  std::optional<VariationalEmbedding> variational_;
  std::optional<DeterministicEmbedding> deterministic_;
  LayerNormLstm lstm_;
  OutputHead head_;
};

struct Trajectory {
  std::vector<double> probabilities;  // one per window
  WindowPlan plan;
};

// Terminal logits / probabilities for each sequence, batched.
std::vector<double> predict_logits(const SequenceModel& model, std::span<const LabeledSequence> data,
                                   const NoiseSpec& noise, std::size_t batch_size = 64);
std::vector<double> predict(const SequenceModel& model, std::span<const LabeledSequence> data,
                            const NoiseSpec& noise, std::size_t batch_size = 64);
std::vector<Trajectory> predict_trajectories(const SequenceModel& model,
                                             std::span<const LabeledSequence> data,
                                             const NoiseSpec& noise, std::size_t batch_size = 64);

// One CSV row per event: sequence_id, event_index, time, token,
// log_precision, precision, cumulative_precision, window. Precision columns
// are empty for deterministic models; precisions may carry a common rescale
// (see cumulative_precision_from_log). With an epoch, an epoch column leads.
std::string window_table_csv(const SequenceModel& model, std::span<const LabeledSequence> data,
                             std::optional<std::size_t> epoch = std::nullopt);

}  // namespace adaptime

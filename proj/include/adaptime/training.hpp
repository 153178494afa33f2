#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaptime/autodiff.hpp"
#include "adaptime/model.hpp"
#include "adaptime/sequence.hpp"

namespace adaptime {

inline constexpr std::size_t kBatchSize = 64;
inline constexpr std::size_t kEmbeddingDims[] = {16, 32, 48, 64};
inline constexpr std::size_t kHiddenDims[] = {16, 32, 64, 128, 256, 512};

struct TrainConfig {
  Variant variant = Variant::kBayesPstar;
  double learning_rate = 1e-3;
  double l2 = 0.0;
  double prior_sigma = 0.5;
  std::size_t embedding_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t batch_size = kBatchSize;
  double kl_scale = 1.0;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  // Optional keys.
  std::size_t num_windows = 48;
  double horizon_hours = 48.0;
  PoolMode pooling = PoolMode::kMean;
  double grad_clip = 5.0;

  std::vector<std::string> problems() const;
  void validate() const;
  ModelConfig model_config(std::size_t vocab_size) const;

  nlohmann::json to_json() const;
  // Every required key must be present; all problems are reported together.
  // Keys in `extra_keys` are ignored, any other unknown key is an error.
  static TrainConfig from_json(const nlohmann::json& j, const std::set<std::string>& extra_keys = {});
};

// ---- loss ------------------------------------------------------------------

struct LossTerms {
  Var total;
  Var logits;          // B x 1
  double nll = 0.0;    // mean binary cross-entropy
  double kl = 0.0;     // kl_scale * KL / n_train
  double l2 = 0.0;
};

// Binary cross-entropy from logits, elementwise: softplus(z) - y z.
Var bce_with_logits(const Var& logits, const Tensor& labels);

LossTerms elbo_loss(Tape& tape, SequenceModel& model, std::span<const LabeledSequence* const> batch,
                    const TrainConfig& config, std::size_t n_train, const NoiseSpec& noise);

// ---- optimiser -------------------------------------------------------------

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Tensor> first;
  std::vector<Tensor> second;
  std::size_t step = 0;
};

// Bias-corrected Adam update from each parameter's accumulated gradient.
void adam_step(std::span<Parameter* const> params, AdamState& state, double learning_rate,
               const AdamOptions& options = {});

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_gradient_norm(std::span<Parameter* const> params, double max_norm);

// ---- training loop ---------------------------------------------------------

struct MetricRow {
  std::size_t epoch = 0;
  std::string split;  // "train" or "valid"
  double loss = 0.0;
  double auroc = 0.0;  // NaN when a split has a single class
  double auprc = 0.0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

std::string metrics_csv(std::span<const MetricRow> rows);

// Validation metrics with a fixed embedding-noise seed.
struct SplitMetrics {
  double loss = 0.0;
  double auroc = 0.0;
  double auprc = 0.0;
};

class Trainer {
 public:
  using EpochCallback = std::function<void(std::size_t epoch, const Trainer&)>;

  Trainer(const TrainConfig& config, std::size_t vocab_size, std::span<const LabeledSequence> train,
          std::span<const LabeledSequence> valid);

  // Runs epochs until `epochs` have completed. The first call logs and
  // reports epoch 0 (the initialisation). Resumed training matches a single
  // uninterrupted run.
  void train_to(std::size_t epochs, const EpochCallback& on_epoch = {});

  std::size_t epochs_completed() const { return epoch_; }
  const TrainConfig& config() const { return config_; }
  const SequenceModel& model() const { return model_; }
  SequenceModel& model() { return model_; }
  const std::vector<MetricRow>& log() const { return log_; }
  double validation_loss() const { return last_valid_.loss; }
  const SplitMetrics& validation() const { return last_valid_; }

  SplitMetrics evaluate(std::span<const LabeledSequence> data) const;

 private:
  void run_epoch();
  std::string diagnostics() const;

  TrainConfig config_;
  std::span<const LabeledSequence> train_;
  std::span<const LabeledSequence> valid_;
  SequenceModel model_;
  AdamState adam_;
  std::size_t epoch_ = 0;
  bool started_ = false;
  std::vector<MetricRow> log_;
  SplitMetrics last_valid_;
};

// Noise seed used for validation and reporting during training.
std::uint64_t evaluation_noise_seed(std::uint64_t seed);

}  // namespace adaptime

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaptime/training.hpp"

namespace adaptime {

// Search ranges. Learning rate and L2 are sampled log-uniformly, so their
// lower bounds must be positive; prior_sigma uniformly; dims by choice.
struct SweepSpace {
  double learning_rate_min = 1e-5;
  double learning_rate_max = 0.1;
  double l2_min = 1e-6;
  double l2_max = 0.01;
  double prior_sigma_min = 0.1;
  double prior_sigma_max = 1.0;
  std::vector<std::size_t> embedding_dims{std::begin(kEmbeddingDims), std::end(kEmbeddingDims)};
  std::vector<std::size_t> hidden_dims{std::begin(kHiddenDims), std::end(kHiddenDims)};

  std::vector<std::string> problems() const;
  void validate() const;
  nlohmann::json to_json() const;
  static SweepSpace from_json(const nlohmann::json& j);
};

// One successive-halving bracket: rung i of s + 1 trains to
// max(1, round(max_iter * eta^(i - s))) epochs and keeps the best
// max(1, floor(n / eta)) trials for the next rung.
struct HalvingSchedule {
  std::size_t s = 2;
  std::size_t eta = 3;
  std::size_t max_iter = 10;

  std::vector<std::size_t> rung_epochs() const;
  std::size_t survivors(std::size_t population) const;
  void validate() const;
};

std::vector<TrainConfig> sample_candidates(const TrainConfig& base, const SweepSpace& space,
                                           std::size_t count, std::uint64_t seed);

struct TrialRecord {
  std::size_t trial = 0;
  std::size_t rung = 0;
  std::size_t epochs = 0;
  double validation_loss = 0.0;  // +inf if the trial diverged
  bool promoted = false;
};

struct SweepResult {
  std::vector<TrainConfig> candidates;
  std::vector<TrialRecord> records;  // rung-major, trial order within a rung
  std::vector<std::size_t> rung_populations;
  std::size_t best = 0;
  double best_loss = 0.0;

  std::string trials_csv() const;
  nlohmann::json to_json() const;
};

// Trains trial `trial` (config `config`) until `epochs` epochs have completed
// and returns its validation loss. Called with increasing epochs per trial;
// must be safe to call concurrently for different trials.
using TrialRunner = std::function<double(std::size_t trial, const TrainConfig& config, std::size_t epochs)>;

// Ranks by validation loss, ties by trial index. Diverged trials
// (kNumeric) rank last. `jobs` trials of a rung run concurrently.
SweepResult successive_halving(std::span<const TrainConfig> candidates, const HalvingSchedule& schedule,
                               const TrialRunner& runner, std::size_t jobs = 1);

// TrialRunner backed by resumable Trainers, one per trial.
class TrainingRunner {
 public:
  TrainingRunner(std::size_t vocab_size, std::span<const LabeledSequence> train,
                 std::span<const LabeledSequence> valid);

  double operator()(std::size_t trial, const TrainConfig& config, std::size_t epochs);
  const Trainer& trainer(std::size_t trial) const;

 private:
  std::size_t vocab_size_;
  std::span<const LabeledSequence> train_;
  std::span<const LabeledSequence> valid_;
  mutable std::mutex mutex_;
  std::map<std::size_t, std::unique_ptr<Trainer>> trainers_;
};

}  // namespace adaptime

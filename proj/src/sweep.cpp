#include "adaptime/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <thread>

#include "adaptime/csv.hpp"
#include "adaptime/error.hpp"
#include "adaptime/random.hpp"

namespace adaptime {

namespace {

double log_uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& options) {
  std::uniform_int_distribution<std::size_t> u(0, options.size() - 1);
  return options[u(rng)];
}

}  // namespace

// ---- space -----------------------------------------------------------------

std::vector<std::string> SweepSpace::problems() const {
  std::vector<std::string> out;
  auto check = [&](bool ok, std::string message) {
    if (!ok) out.push_back(std::move(message));
  };
  check(learning_rate_min >= 1e-5 && learning_rate_min <= learning_rate_max && learning_rate_max <= 0.1,
        "learning rate range must satisfy 1e-5 <= min <= max <= 0.1");
  check(l2_min > 0.0 && l2_min <= l2_max && l2_max <= 0.01,
        "l2 range must satisfy 0 < min <= max <= 0.01 (log-uniform)");
  check(prior_sigma_min >= 0.1 && prior_sigma_min <= prior_sigma_max && prior_sigma_max <= 1.0,
        "prior_sigma range must satisfy 0.1 <= min <= max <= 1.0");
  check(!embedding_dims.empty(), "embedding_dims must not be empty");
  check(!hidden_dims.empty(), "hidden_dims must not be empty");
  for (std::size_t d : embedding_dims) {
    check(std::find(std::begin(kEmbeddingDims), std::end(kEmbeddingDims), d) != std::end(kEmbeddingDims),
          "embedding dim " + std::to_string(d) + " is not allowed");
  }
  for (std::size_t d : hidden_dims) {
    check(std::find(std::begin(kHiddenDims), std::end(kHiddenDims), d) != std::end(kHiddenDims),
          "hidden dim " + std::to_string(d) + " is not allowed");
  }
  return out;
}

void SweepSpace::validate() const {
  const auto list = problems();
  if (list.empty()) return;
  std::string message = "invalid sweep space:";
  for (const auto& p : list) message += "\n  - " + p;
  fail(ErrorKind::kConfig, message);
}

nlohmann::json SweepSpace::to_json() const {
  return {{"learning_rate", {learning_rate_min, learning_rate_max}},
          {"l2", {l2_min, l2_max}},
          {"prior_sigma", {prior_sigma_min, prior_sigma_max}},
          {"embedding_dims", embedding_dims},
          {"hidden_dims", hidden_dims}};
}

SweepSpace SweepSpace::from_json(const nlohmann::json& j) {
  SweepSpace s;
  try {
    auto range = [&](const char* key, double& lo, double& hi) {
      if (!j.contains(key)) return;
      const auto pair = j.at(key).get<std::vector<double>>();
      if (pair.size() != 2) fail(ErrorKind::kConfig, std::string("sweep space '") + key + "' needs [min, max]");
      lo = pair[0];
      hi = pair[1];
    };
    range("learning_rate", s.learning_rate_min, s.learning_rate_max);
    range("l2", s.l2_min, s.l2_max);
    range("prior_sigma", s.prior_sigma_min, s.prior_sigma_max);
    if (j.contains("embedding_dims")) s.embedding_dims = j.at("embedding_dims").get<std::vector<std::size_t>>();
    if (j.contains("hidden_dims")) s.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
    for (const auto& item : j.items()) {
      static const std::set<std::string> known{"learning_rate", "l2", "prior_sigma", "embedding_dims",
                                               "hidden_dims"};
      if (!known.contains(item.key())) fail(ErrorKind::kConfig, "unknown sweep space key '" + item.key() + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("sweep space: ") + e.what());
  }
  s.validate();
  return s;
}

// ---- schedule --------------------------------------------------------------

std::vector<std::size_t> HalvingSchedule::rung_epochs() const {
  validate();
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i <= s; ++i) {
    const double r = static_cast<double>(max_iter) *
                     std::pow(static_cast<double>(eta), static_cast<double>(i) - static_cast<double>(s));
    out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(r))));
  }
  return out;
}

std::size_t HalvingSchedule::survivors(std::size_t population) const {
  return std::max<std::size_t>(1, population / eta);
}

void HalvingSchedule::validate() const {
  if (eta < 2) fail(ErrorKind::kConfig, "successive halving needs eta >= 2");
  if (max_iter < 1) fail(ErrorKind::kConfig, "successive halving needs max_iter >= 1");
}

std::vector<TrainConfig> sample_candidates(const TrainConfig& base, const SweepSpace& space,
                                           std::size_t count, std::uint64_t seed) {
  space.validate();
  std::vector<TrainConfig> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed({seed, 0x5eedULL, i}));
    TrainConfig c = base;
    c.learning_rate = log_uniform(rng, space.learning_rate_min, space.learning_rate_max);
    c.l2 = log_uniform(rng, space.l2_min, space.l2_max);
    c.prior_sigma = std::uniform_real_distribution<double>(space.prior_sigma_min, space.prior_sigma_max)(rng);
    c.embedding_dim = pick(rng, space.embedding_dims);
    c.hidden_dim = pick(rng, space.hidden_dims);
    c.seed = derive_seed({base.seed, 0x7a1ULL, i});
    out.push_back(c);
  }
  return out;
}

// ---- successive halving ----------------------------------------------------

SweepResult successive_halving(std::span<const TrainConfig> candidates, const HalvingSchedule& schedule,
                               const TrialRunner& runner, std::size_t jobs) {
  if (candidates.empty()) fail(ErrorKind::kConfig, "sweep: no candidates to evaluate");
  const std::vector<std::size_t> rungs = schedule.rung_epochs();
  SweepResult result;
  result.candidates.assign(candidates.begin(), candidates.end());

  std::vector<std::size_t> alive(candidates.size());
  std::iota(alive.begin(), alive.end(), 0);
  for (std::size_t rung = 0; rung < rungs.size(); ++rung) {
    result.rung_populations.push_back(alive.size());
    std::vector<double> losses(alive.size());
    std::vector<std::exception_ptr> errors(alive.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t k = next++; k < alive.size(); k = next++) {
        try {
          const double loss = runner(alive[k], candidates[alive[k]], rungs[rung]);
          losses[k] = std::isfinite(loss) ? loss : std::numeric_limits<double>::infinity();
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::kNumeric) errors[k] = std::current_exception();
          losses[k] = std::numeric_limits<double>::infinity();
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
    };
    const std::size_t threads = std::clamp<std::size_t>(jobs, 1, alive.size());
    if (threads == 1) {
      work();
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    std::vector<std::size_t> order(alive.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return losses[a] < losses[b] || (losses[a] == losses[b] && alive[a] < alive[b]);
    });
    const bool last = rung + 1 == rungs.size();
    const std::size_t keep = last ? 1 : schedule.survivors(alive.size());
    std::vector<bool> promoted(alive.size(), false);
    for (std::size_t r = 0; r < keep; ++r) promoted[order[r]] = !last;
    for (std::size_t k = 0; k < alive.size(); ++k) {
      result.records.push_back(TrialRecord{alive[k], rung, rungs[rung], losses[k], promoted[k]});
    }
    if (last) {
      result.best = alive[order.front()];
      result.best_loss = losses[order.front()];
      break;
    }
    std::vector<std::size_t> next_alive;
    for (std::size_t r = 0; r < keep; ++r) next_alive.push_back(alive[order[r]]);
    std::sort(next_alive.begin(), next_alive.end());
    alive = std::move(next_alive);
  }
  return result;
}

std::string SweepResult::trials_csv() const {
  std::string out = "trial,rung,epochs,learning_rate,l2,prior_sigma,embedding_dim,hidden_dim,validation_loss,promoted\n";
  for (const TrialRecord& r : records) {
    const TrainConfig& c = candidates[r.trial];
    out += std::to_string(r.trial) + ',' + std::to_string(r.rung) + ',' + std::to_string(r.epochs) + ',' +
           format_double(c.learning_rate) + ',' + format_double(c.l2) + ',' + format_double(c.prior_sigma) +
           ',' + std::to_string(c.embedding_dim) + ',' + std::to_string(c.hidden_dim) + ',' +
           format_double(r.validation_loss) + ',' + (r.promoted ? "1" : "0") + '\n';
  }
  return out;
}

nlohmann::json SweepResult::to_json() const {
  return {{"best_trial", best},
          {"best_validation_loss", best_loss},
          {"rung_populations", rung_populations},
          {"best_config", candidates.at(best).to_json()}};
}

// ---- runner ----------------------------------------------------------------

TrainingRunner::TrainingRunner(std::size_t vocab_size, std::span<const LabeledSequence> train,
                               std::span<const LabeledSequence> valid)
    : vocab_size_(vocab_size), train_(train), valid_(valid) {}

double TrainingRunner::operator()(std::size_t trial, const TrainConfig& config, std::size_t epochs) {
  Trainer* trainer = nullptr;
  {
    std::lock_guard lock(mutex_);
    auto& slot = trainers_[trial];
    if (!slot) slot = std::make_unique<Trainer>(config, vocab_size_, train_, valid_);
    trainer = slot.get();
  }
  trainer->train_to(epochs);
  return trainer->validation_loss();
}

const Trainer& TrainingRunner::trainer(std::size_t trial) const {
  std::lock_guard lock(mutex_);
  auto it = trainers_.find(trial);
  if (it == trainers_.end()) fail(ErrorKind::kRange, "no trainer for trial " + std::to_string(trial));
  return *it->second;
}

}  // namespace adaptime

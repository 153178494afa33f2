#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adaptime/data.hpp"

namespace adaptime {

// Synthetic ICU-style event streams. Event times follow a piecewise Poisson
// process: rate base_rate * (1 + burst_intensity) on [0, burst_hours), then
// base_rate until the horizon. Each event is the risk token (variable d0,
// category c0) with probability risk_mix, else a uniformly chosen variable
// with a uniformly chosen value. A risk_prone_fraction of patients draw
// risk_mix_high, the rest risk_mix_low. The label is
// Bernoulli(sigmoid(risk_weight * n + bias)) where n counts risk tokens in
// [risk_epoch_start, risk_epoch_end) and the bias is solved so the mean label
// probability equals the prevalence.
struct GeneratorConfig {
  std::size_t num_patients = 2000;
  std::size_t num_discrete_variables = 4;
  std::size_t categories_per_variable = 5;
  std::size_t num_continuous_variables = 4;
  double base_rate = 2.0;  // events per hour
  double burst_intensity = 4.0;
  double burst_hours = 6.0;
  double horizon_hours = 48.0;
  double risk_epoch_start = 0.0;
  double risk_epoch_end = 6.0;
  double risk_weight = 1.0;
  double risk_prone_fraction = 0.132;
  double risk_mix_high = 0.3;
  double risk_mix_low = 0.02;
  double prevalence = 0.132;

  // All violations, empty when valid.
  std::vector<std::string> problems() const;
  void validate() const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are an error.
  static GeneratorConfig from_json(const nlohmann::json& j);
};

inline constexpr const char* kRiskVariable = "d0";
inline constexpr const char* kRiskCategory = "c0";

struct SyntheticData {
  std::vector<EventRecord> events;
  std::vector<std::pair<std::string, int>> labels;
  std::vector<std::size_t> risk_counts;  // per patient, in label order
  double label_bias = 0.0;
  std::vector<std::string> warnings;

  nlohmann::json summary() const;
  std::map<std::string, int> label_map() const;
};

SyntheticData synthesize(const GeneratorConfig& config, std::uint64_t seed);

}  // namespace adaptime

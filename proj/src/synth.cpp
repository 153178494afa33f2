#include "adaptime/synth.hpp"

#include <charconv>
#include <cmath>
#include <random>

#include "adaptime/autodiff.hpp"
#include "adaptime/error.hpp"
#include "adaptime/random.hpp"

namespace adaptime {

namespace {

bool is_count(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

template <typename Config>
auto size_fields(Config& c) {
  return std::vector<std::pair<const char*, decltype(&c.num_patients)>>{
      {"num_patients", &c.num_patients},
      {"num_discrete_variables", &c.num_discrete_variables},
      {"categories_per_variable", &c.categories_per_variable},
      {"num_continuous_variables", &c.num_continuous_variables},
  };
}

template <typename Config>
auto real_fields(Config& c) {
  return std::vector<std::pair<const char*, decltype(&c.base_rate)>>{
      {"base_rate", &c.base_rate},
      {"burst_intensity", &c.burst_intensity},
      {"burst_hours", &c.burst_hours},
      {"horizon_hours", &c.horizon_hours},
      {"risk_epoch_start", &c.risk_epoch_start},
      {"risk_epoch_end", &c.risk_epoch_end},
      {"risk_weight", &c.risk_weight},
      {"risk_prone_fraction", &c.risk_prone_fraction},
      {"risk_mix_high", &c.risk_mix_high},
      {"risk_mix_low", &c.risk_mix_low},
      {"prevalence", &c.prevalence},
  };
}

std::string fixed3(double v) {
  char buffer[64];
  const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), v, std::chars_format::fixed, 3);
  return std::string(buffer, ptr);
}

std::string patient_name(std::size_t index) {
  std::string digits = std::to_string(index);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return "p" + digits;
}

double mean_label_probability(std::span<const std::size_t> counts, double weight, double bias) {
  double total = 0.0;
  for (std::size_t n : counts) total += stable_sigmoid(weight * static_cast<double>(n) + bias);
  return total / static_cast<double>(counts.size());
}

}  // namespace

std::vector<std::string> GeneratorConfig::problems() const {
  std::vector<std::string> out;
  auto check = [&](bool ok, const std::string& message) {
    if (!ok) out.push_back(message);
  };
  auto finite = [](double v) { return std::isfinite(v); };
  for (const auto& [name, ptr] : real_fields(*this)) {
    check(finite(*ptr), std::string(name) + " must be finite");
  }
  check(num_discrete_variables >= 1, "num_discrete_variables must be >= 1 (d0 carries the risk token)");
  check(categories_per_variable >= 2, "categories_per_variable must be >= 2");
  check(base_rate > 0.0, "base_rate must be positive");
  check(burst_intensity >= 0.0, "burst_intensity must be >= 0");
  check(horizon_hours > 0.0, "horizon_hours must be positive");
  check(burst_hours >= 0.0 && burst_hours <= horizon_hours, "burst_hours must lie in [0, horizon_hours]");
  check(risk_epoch_start >= 0.0 && risk_epoch_start < risk_epoch_end &&
            risk_epoch_end <= horizon_hours,
        "risk epoch must satisfy 0 <= start < end <= horizon_hours");
  check(risk_weight >= 0.0, "risk_weight must be >= 0");
  check(risk_prone_fraction >= 0.0 && risk_prone_fraction <= 1.0, "risk_prone_fraction must lie in [0, 1]");
  check(risk_mix_high >= 0.0 && risk_mix_high <= 1.0, "risk_mix_high must lie in [0, 1]");
  check(risk_mix_low >= 0.0 && risk_mix_low <= 1.0, "risk_mix_low must lie in [0, 1]");
  check(prevalence > 0.0 && prevalence < 1.0, "prevalence must lie in (0, 1)");
  return out;
}

void GeneratorConfig::validate() const {
  const auto list = problems();
  if (list.empty()) return;
  std::string message = "invalid generator config:";
  for (const auto& p : list) message += "\n  - " + p;
  fail(ErrorKind::kConfig, message);
}

nlohmann::json GeneratorConfig::to_json() const {
  nlohmann::json j;
  for (const auto& [name, ptr] : size_fields(*this)) j[name] = *ptr;
  for (const auto& [name, ptr] : real_fields(*this)) j[name] = *ptr;
  return j;
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::kConfig, "generator config must be a JSON object");
  GeneratorConfig c;
  std::vector<std::string> errors;
  std::set<std::string> known;
  for (const auto& [name, ptr] : size_fields(c)) {
    known.insert(name);
    if (!j.contains(name)) continue;
    if (!is_count(j[name])) errors.push_back(std::string(name) + " must be a non-negative integer");
    else *ptr = j[name].get<std::size_t>();
  }
  for (const auto& [name, ptr] : real_fields(c)) {
    known.insert(name);
    if (!j.contains(name)) continue;
    if (!j[name].is_number()) errors.push_back(std::string(name) + " must be a number");
    else *ptr = j[name].get<double>();
  }
  for (const auto& item : j.items()) {
    if (!known.contains(item.key())) errors.push_back("unknown key '" + item.key() + "'");
  }
  for (auto& p : c.problems()) errors.push_back(std::move(p));
  if (!errors.empty()) {
    std::string message = "invalid generator config:";
    for (const auto& e : errors) message += "\n  - " + e;
    fail(ErrorKind::kConfig, message);
  }
  return c;
}

nlohmann::json SyntheticData::summary() const {
  std::size_t positives = 0;
  for (const auto& [id, label] : labels) positives += static_cast<std::size_t>(label);
  const double n = static_cast<double>(labels.size());
  return {{"patients", labels.size()},
          {"events", events.size()},
          {"positives", positives},
          {"empirical_prevalence", labels.empty() ? 0.0 : static_cast<double>(positives) / n},
          {"mean_events_per_patient", labels.empty() ? 0.0 : static_cast<double>(events.size()) / n},
          {"label_bias", label_bias},
          {"warnings", warnings}};
}

std::map<std::string, int> SyntheticData::label_map() const {
  return std::map<std::string, int>(labels.begin(), labels.end());
}

SyntheticData synthesize(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();
  SyntheticData out;
  if (config.num_patients == 0) {
    out.warnings.push_back("num_patients is 0; output contains headers only");
    return out;
  }
  const std::size_t n_vars = config.num_discrete_variables + config.num_continuous_variables;
  std::vector<double> label_draws;
  for (std::size_t p = 0; p < config.num_patients; ++p) {
    Rng rng(derive_seed({seed, 0x5e0ULL, p}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick_var(0, n_vars - 1);
    std::uniform_int_distribution<std::size_t> pick_cat(0, config.categories_per_variable - 1);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const std::string id = patient_name(p);
    label_draws.push_back(unit(rng));
    const double mix = unit(rng) < config.risk_prone_fraction ? config.risk_mix_high : config.risk_mix_low;
    const double burst_rate = config.base_rate * (1.0 + config.burst_intensity);
    std::size_t risk_count = 0;
    double t = 0.0;
    while (true) {
      const bool in_burst = t < config.burst_hours;
      const double rate = in_burst ? burst_rate : config.base_rate;
      const double next = t + std::exponential_distribution<double>(rate)(rng);
      if (in_burst && next >= config.burst_hours) {
        // Memoryless restart at the rate change.
        t = config.burst_hours;
        continue;
      }
      t = next;
      if (t >= config.horizon_hours) break;
      EventRecord e{id, t, {}, {}};
      if (unit(rng) < mix) {
        e.variable_id = kRiskVariable;
        e.value = kRiskCategory;
      } else {
        const std::size_t v = pick_var(rng);
        if (v < config.num_discrete_variables) {
          e.variable_id = "d" + std::to_string(v);
          e.value = "c" + std::to_string(pick_cat(rng));
        } else {
          e.variable_id = "x" + std::to_string(v - config.num_discrete_variables);
          e.value = fixed3(gauss(rng));
        }
      }
      if (e.variable_id == kRiskVariable && e.value == kRiskCategory && t >= config.risk_epoch_start &&
          t < config.risk_epoch_end) {
        ++risk_count;
      }
      out.events.push_back(std::move(e));
    }
    out.risk_counts.push_back(risk_count);
    out.labels.emplace_back(id, 0);
  }

  double lo = -60.0;
  double hi = 60.0;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (mean_label_probability(out.risk_counts, config.risk_weight, mid) < config.prevalence) lo = mid;
    else hi = mid;
  }
  out.label_bias = 0.5 * (lo + hi);
  for (std::size_t p = 0; p < out.labels.size(); ++p) {
    const double prob =
        stable_sigmoid(config.risk_weight * static_cast<double>(out.risk_counts[p]) + out.label_bias);
    out.labels[p].second = label_draws[p] < prob ? 1 : 0;
  }
  return out;
}

}  // namespace adaptime

#include "adaptime/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

#include "adaptime/checkpoint.hpp"
#include "adaptime/csv.hpp"
#include "adaptime/data.hpp"
#include "adaptime/evaluation.hpp"
#include "adaptime/hashing.hpp"
#include "adaptime/sweep.hpp"
#include "adaptime/synth.hpp"
#include "adaptime/training.hpp"

namespace adaptime {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return kExitConfig;
    case ErrorKind::kData: return kExitData;
    case ErrorKind::kNumeric: return kExitNumeric;
    case ErrorKind::kIo: return kExitIo;
    case ErrorKind::kShape:
    case ErrorKind::kRange: return kExitInternal;
  }
  return kExitInternal;
}

namespace {

// ---- run bookkeeping ---------------------------------------------------------

class Run {
 public:
  Run(std::string command, std::vector<std::string> args, fs::path out_dir)
      : command_(std::move(command)), args_(std::move(args)), out_dir_(fs::absolute(std::move(out_dir))) {
    std::error_code ec;
    fs::create_directories(out_dir_, ec);
    if (ec) fail(ErrorKind::kIo, "cannot create output directory '" + out_dir_.string() + "': " + ec.message());
  }

  const fs::path& out_dir() const { return out_dir_; }

  void input(const fs::path& path) {
    inputs_.push_back({{"path", fs::absolute(path).lexically_normal().string()}, {"sha256", sha256_file(path)}});
  }

  void write(const std::string& relative, std::string_view bytes) {
    write_file(out_dir_ / relative, bytes);
    outputs_[relative] = sha256_hex(bytes);
  }

  void set_config(json config) { config_ = std::move(config); }
  void set_seed(std::uint64_t seed) { seed_ = seed; }

  void finish(std::ostream& out) {
    json outputs = json::array();
    for (const auto& [path, hash] : outputs_) outputs.push_back({{"path", path}, {"sha256", hash}});
    const json manifest = {{"schema", "adaptime.manifest/1"},
                           {"tool_version", std::string(kToolVersion)},
                           {"command", command_},
                           {"args", args_},
                           {"cwd", fs::current_path().string()},
                           {"seed", seed_ ? json(*seed_) : json(nullptr)},
                           {"config", config_},
                           {"inputs", inputs_},
                           {"outputs", std::move(outputs)},
                           {"out_dir", out_dir_.string()}};
    write_file(out_dir_ / "manifest.json", manifest.dump(2) + "\n");
    out << command_ << ": wrote " << outputs_.size() << " files and manifest.json to " << out_dir_.string()
        << "\n";
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  fs::path out_dir_;
  json inputs_ = json::array();
  std::map<std::string, std::string> outputs_;
  json config_ = json::object();
  std::optional<std::uint64_t> seed_;
};

fs::path default_out(const std::string& command) {
  if (const char* root = std::getenv("ADAPTIME_OUT"); root != nullptr && *root != '\0') {
    return fs::path(root) / command;
  }
  return fs::path("runs") / command;
}

json read_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

fs::path resolve(const fs::path& base_dir, const std::string& value) {
  const fs::path p(value);
  return p.is_absolute() ? p : (base_dir / p).lexically_normal();
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

// ---- data sections -------------------------------------------------------------

struct LoadedData {
  Vocabulary vocabulary;
  SequenceCache cache;
};

void apply_data_options(const json& j, DataOptions& options, std::vector<std::string>& errors) {
  try {
    if (j.contains("split_seed")) options.split_seed = j.at("split_seed").get<std::uint64_t>();
    if (j.contains("horizon_hours")) options.tokenize.horizon_hours = j.at("horizon_hours").get<double>();
    if (j.contains("missing_epoch_hours")) {
      options.tokenize.missing_epoch_hours = j.at("missing_epoch_hours").get<double>();
    }
    if (j.contains("expected_variables")) {
      options.tokenize.expected_variables = j.at("expected_variables").get<std::vector<std::string>>();
    }
    if (j.contains("categorical_variables")) {
      const auto list = j.at("categorical_variables").get<std::vector<std::string>>();
      options.vocabulary.categorical_variables = {list.begin(), list.end()};
    }
    if (j.contains("unknown_variables")) {
      const std::string policy = j.at("unknown_variables").get<std::string>();
      if (policy == "skip") options.tokenize.unknown_variables = UnknownVariablePolicy::kSkip;
      else if (policy == "error") options.tokenize.unknown_variables = UnknownVariablePolicy::kError;
      else errors.push_back("data.unknown_variables must be \"skip\" or \"error\"");
    }
  } catch (const json::exception& e) {
    errors.push_back(std::string("data options: ") + e.what());
  }
}

const std::set<std::string> kDataOptionKeys{"split_seed",         "horizon_hours",
                                            "missing_epoch_hours", "expected_variables",
                                            "categorical_variables", "unknown_variables"};

void write_prepared(Run& run, const PreparedData& prepared) {
  run.write("vocabulary.json", pretty(prepared.vocabulary.to_json()));
  run.write("sequences.bin", encode_sequence_cache(prepared.cache));
  run.write("ingestion_report.json", pretty(prepared.report.to_json()));
}

LoadedData load_cache(Run& run, const fs::path& cache_path, const fs::path& vocab_path) {
  run.input(cache_path);
  run.input(vocab_path);
  LoadedData out{Vocabulary::from_json(read_json_file(vocab_path)), decode_sequence_cache(read_file(cache_path))};
  if (out.vocabulary.hash() != out.cache.vocab_hash) {
    fail(ErrorKind::kData, "vocabulary '" + vocab_path.string() + "' does not match sequence cache '" +
                               cache_path.string() + "'");
  }
  return out;
}

// Either {"cache": ..., "vocabulary": ...} or {"events": ..., "labels": ..., options}.
LoadedData load_data_section(Run& run, const json& section, const fs::path& base_dir) {
  if (!section.is_object()) fail(ErrorKind::kConfig, "config field 'data' must be an object");
  std::vector<std::string> errors;
  auto path_of = [&](const char* key) -> std::optional<fs::path> {
    if (!section.contains(key)) return std::nullopt;
    if (!section.at(key).is_string()) {
      errors.push_back(std::string("data.") + key + " must be a path string");
      return std::nullopt;
    }
    return resolve(base_dir, section.at(key).get<std::string>());
  };
  const auto cache = path_of("cache");
  const auto vocab = path_of("vocabulary");
  const auto events = path_of("events");
  const auto labels = path_of("labels");
  DataOptions options;
  apply_data_options(section, options, errors);
  std::set<std::string> known(kDataOptionKeys);
  known.insert({"cache", "vocabulary", "events", "labels"});
  for (const auto& item : section.items()) {
    if (!known.contains(item.key())) errors.push_back("unknown field 'data." + item.key() + "'");
  }
  if (cache && !vocab) errors.push_back("data.cache needs data.vocabulary");
  if (!cache && !(events && labels)) errors.push_back("data needs either cache + vocabulary or events + labels");
  if (cache && (events || labels)) errors.push_back("data must not mix cache and events/labels");
  if (!errors.empty()) {
    std::string message = "invalid data section:";
    for (const auto& e : errors) message += "\n  - " + e;
    fail(ErrorKind::kConfig, message);
  }
  if (cache) return load_cache(run, *cache, *vocab);
  run.input(*events);
  run.input(*labels);
  PreparedData prepared = prepare_data(read_events_csv(*events), read_labels_csv(*labels), options);
  write_prepared(run, prepared);
  return LoadedData{std::move(prepared.vocabulary), std::move(prepared.cache)};
}

// ---- checkpoints ---------------------------------------------------------------

struct LoadedModel {
  std::string path;
  SequenceModel model;
};

LoadedModel load_model(Run& run, const std::string& path, const SequenceCache& cache) {
  run.input(path);
  const Checkpoint ckpt = read_checkpoint(path);
  const std::string hash = ckpt.metadata.value("vocab_hash", std::string());
  if (hash != cache.vocab_hash) {
    fail(ErrorKind::kData, "checkpoint '" + path +
                               "' was trained on a different vocabulary than the evaluation data; "
                               "results would be incomparable");
  }
  return LoadedModel{path, model_from_checkpoint(ckpt)};
}

json checkpoint_metadata(const TrainConfig& config, std::size_t epochs, const LoadedData& data) {
  return {{"tool_version", std::string(kToolVersion)},
          {"train_config", config.to_json()},
          {"epochs_completed", epochs},
          {"vocab_hash", data.cache.vocab_hash},
          {"vocab_size", data.vocabulary.size()}};
}

std::string epoch_file(std::size_t epoch) {
  std::string digits = std::to_string(epoch);
  if (digits.size() < 3) digits.insert(0, 3 - digits.size(), '0');
  return "windows/epoch_" + digits + ".csv";
}

// Training/sweep configs: TrainConfig keys plus "data" (and "sweep").
json load_train_json(const fs::path& path, const std::optional<std::uint64_t>& seed,
                     const std::optional<std::string>& variant, const std::optional<std::size_t>& epochs) {
  json j = read_json_file(path);
  if (!j.is_object()) fail(ErrorKind::kConfig, "config must be a JSON object");
  if (seed) j["seed"] = *seed;
  if (variant) j["variant"] = *variant;
  if (epochs) j["epochs"] = *epochs;
  return j;
}

// ---- commands ----------------------------------------------------------------

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> variant;
  std::optional<std::size_t> epochs;
};

fs::path out_dir(const Common& c, const std::string& command) {
  return c.out.empty() ? default_out(command) : fs::path(c.out);
}

void cmd_synth(const Common& c, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Run run("synth", args, out_dir(c, "synth"));
  GeneratorConfig config;
  if (!c.config.empty()) {
    run.input(c.config);
    config = GeneratorConfig::from_json(read_json_file(c.config));
  }
  const std::uint64_t seed = c.seed.value_or(0);
  const SyntheticData data = synthesize(config, seed);
  for (const auto& w : data.warnings) err << "warning: " << w << "\n";
  run.write("events.csv", events_to_csv(data.events));
  run.write("labels.csv", labels_to_csv(data.labels));
  run.write("generator.json", pretty({{"config", config.to_json()}, {"seed", seed}, {"summary", data.summary()}}));
  run.set_config(config.to_json());
  run.set_seed(seed);
  run.finish(out);
}

void cmd_prepare(const Common& c, const std::string& events, const std::string& labels,
                 const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Run run("prepare", args, out_dir(c, "prepare"));
  DataOptions options;
  json config = json::object();
  if (!c.config.empty()) {
    run.input(c.config);
    config = read_json_file(c.config);
    std::vector<std::string> errors;
    apply_data_options(config, options, errors);
    for (const auto& item : config.items()) {
      if (!kDataOptionKeys.contains(item.key())) errors.push_back("unknown field '" + item.key() + "'");
    }
    if (!errors.empty()) {
      std::string message = "invalid data config:";
      for (const auto& e : errors) message += "\n  - " + e;
      fail(ErrorKind::kConfig, message);
    }
  }
  if (c.seed) options.split_seed = *c.seed;
  run.input(events);
  run.input(labels);
  const PreparedData prepared = prepare_data(read_events_csv(fs::path(events)), read_labels_csv(fs::path(labels)), options);
  for (const auto& w : prepared.report.warnings) err << "warning: " << w << "\n";
  write_prepared(run, prepared);
  config["split_seed"] = options.split_seed;
  run.set_config(config);
  run.set_seed(options.split_seed);
  run.finish(out);
}

void cmd_train(const Common& c, std::size_t snapshot_limit, const std::vector<std::string>& args,
               std::ostream& out) {
  if (c.config.empty()) fail(ErrorKind::kConfig, "train needs --config");
  const json j = load_train_json(c.config, c.seed, c.variant, c.epochs);
  const TrainConfig config = TrainConfig::from_json(j, {"data"});
  if (!j.contains("data")) fail(ErrorKind::kConfig, "missing required field 'data'");
  Run run("train", args, out_dir(c, "train"));
  run.input(c.config);
  const LoadedData data = load_data_section(run, j.at("data"), fs::path(c.config).parent_path());

  Trainer trainer(config, data.vocabulary.size(), data.cache.train, data.cache.valid);
  const bool snapshots = config.variant == Variant::kBayesPstar;
  const std::span<const LabeledSequence> valid = data.cache.valid;
  const auto snapshot_set = valid.first(std::min(valid.size(), snapshot_limit));
  trainer.train_to(config.epochs, [&](std::size_t epoch, const Trainer& t) {
    if (snapshots) run.write(epoch_file(epoch), window_table_csv(t.model(), snapshot_set, epoch));
    const MetricRow& row = t.log().back();
    out << "epoch " << epoch << " valid loss " << format_double(row.loss) << " auroc "
        << format_double(row.auroc) << "\n";
  });
  run.write("model.ckpt", encode_checkpoint(model_checkpoint(
                              trainer.model(), checkpoint_metadata(config, trainer.epochs_completed(), data))));
  run.write("metrics.csv", metrics_csv(trainer.log()));
  run.write("train_config.json", pretty(config.to_json()));
  json resolved = config.to_json();
  resolved["data"] = j.at("data");
  run.set_config(resolved);
  run.set_seed(config.seed);
  run.finish(out);
}

void cmd_sweep(const Common& c, std::size_t jobs, const std::vector<std::string>& args, std::ostream& out) {
  if (c.config.empty()) fail(ErrorKind::kConfig, "sweep needs --config");
  const json j = load_train_json(c.config, c.seed, c.variant, std::nullopt);
  const TrainConfig base = TrainConfig::from_json(j, {"data", "sweep"});
  if (!j.contains("data")) fail(ErrorKind::kConfig, "missing required field 'data'");
  const json sweep = j.value("sweep", json::object());
  HalvingSchedule schedule;
  SweepSpace space;
  std::size_t count = 9;
  try {
    schedule.s = sweep.value("s", schedule.s);
    schedule.eta = sweep.value("eta", schedule.eta);
    schedule.max_iter = sweep.value("max_iter", schedule.max_iter);
    count = sweep.value("candidates", count);
    if (sweep.contains("space")) space = SweepSpace::from_json(sweep.at("space"));
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("sweep section: ") + e.what());
  }
  schedule.validate();
  if (count == 0) fail(ErrorKind::kConfig, "sweep.candidates must be >= 1");

  Run run("sweep", args, out_dir(c, "sweep"));
  run.input(c.config);
  const LoadedData data = load_data_section(run, j.at("data"), fs::path(c.config).parent_path());
  const std::vector<TrainConfig> candidates = sample_candidates(base, space, count, base.seed);
  TrainingRunner runner(data.vocabulary.size(), data.cache.train, data.cache.valid);
  const SweepResult result = successive_halving(
      candidates, schedule,
      [&](std::size_t trial, const TrainConfig& config, std::size_t epochs) {
        return runner(trial, config, epochs);
      },
      jobs);
  const Trainer& best = runner.trainer(result.best);
  run.write("best_model.ckpt", encode_checkpoint(model_checkpoint(
                                   best.model(), checkpoint_metadata(best.config(), best.epochs_completed(), data))));
  run.write("trials.csv", result.trials_csv());
  run.write("sweep.json", pretty(result.to_json()));
  TrainConfig best_config = result.candidates[result.best];
  best_config.epochs = best.epochs_completed();
  run.write("best_config.json", pretty(best_config.to_json()));
  json resolved = base.to_json();
  resolved["data"] = j.at("data");
  resolved["sweep"] = {{"s", schedule.s}, {"eta", schedule.eta}, {"max_iter", schedule.max_iter},
                       {"candidates", count}, {"space", space.to_json()}};
  run.set_config(resolved);
  run.set_seed(base.seed);
  out << "sweep: best trial " << result.best << " validation loss " << format_double(result.best_loss) << "\n";
  run.finish(out);
}

struct EvalFlags {
  std::vector<std::string> checkpoints;
  std::string data;
  std::string vocabulary;
  std::string split = "test";
  std::string mode;
  std::size_t draws = 100;
  std::size_t resamples = 1000;
  double threshold = 0.5;
  std::size_t limit = 0;
};

EvalOptions eval_options(const Common& c, const EvalFlags& f) {
  EvalOptions o;
  o.draws = f.draws;
  o.resamples = f.resamples;
  o.seed = c.seed.value_or(0);
  o.earliness_threshold = f.threshold;
  return o;
}

SequenceCache load_eval_cache(Run& run, const EvalFlags& f) {
  if (f.data.empty()) fail(ErrorKind::kConfig, "--data (sequence cache) is required");
  run.input(f.data);
  return decode_sequence_cache(read_file(f.data));
}

EvalReport evaluate_group(const std::vector<LoadedModel>& group, std::span<const LabeledSequence> data,
                          std::optional<EvalMode> mode, const EvalOptions& options) {
  const bool bayes = group.front().model.bayesian();
  const EvalMode m = mode.value_or(bayes ? EvalMode::kVariational : EvalMode::kBootstrap);
  if (m == EvalMode::kVariational) {
    if (group.size() != 1) fail(ErrorKind::kConfig, "variational mode takes exactly one checkpoint");
    return variational_report(group.front().model, data, options);
  }
  std::vector<const SequenceModel*> models;
  for (const auto& g : group) models.push_back(&g.model);
  return bootstrap_report(models, data, options);
}

json eval_config(const Common& c, const EvalFlags& f) {
  return {{"checkpoints", f.checkpoints}, {"data", f.data}, {"split", f.split}, {"mode", f.mode},
          {"draws", f.draws}, {"resamples", f.resamples}, {"threshold", f.threshold},
          {"seed", c.seed.value_or(0)}};
}

void cmd_eval(const Common& c, const EvalFlags& f, const std::vector<std::string>& args, std::ostream& out) {
  if (f.checkpoints.empty()) fail(ErrorKind::kConfig, "eval needs at least one --checkpoint");
  std::optional<EvalMode> mode;
  if (!f.mode.empty()) mode = parse_eval_mode(f.mode);
  Run run("eval", args, out_dir(c, "eval"));
  const SequenceCache cache = load_eval_cache(run, f);
  std::vector<LoadedModel> group;
  for (const auto& arg : f.checkpoints) {
    for (const auto& path : split_commas(arg)) group.push_back(load_model(run, path, cache));
  }
  const EvalReport report = evaluate_group(group, cache.split(f.split), mode, eval_options(c, f));
  run.write("report.json", pretty(report.to_json()));
  run.write("calibration.csv", report.calibration_csv());
  run.write("timing.csv", report.timing_csv());
  run.set_config(eval_config(c, f));
  run.set_seed(c.seed.value_or(0));
  out << "eval: auroc " << format_double(report.auroc.mean) << " +/- " << format_double(report.auroc.sd)
      << ", auprc " << format_double(report.auprc.mean) << " +/- " << format_double(report.auprc.sd)
      << ", max mcc " << format_double(report.max_mcc.mean) << " +/- " << format_double(report.max_mcc.sd)
      << "\n";
  run.finish(out);
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void cmd_compare(const Common& c, const EvalFlags& f, const std::vector<std::string>& args, std::ostream& out) {
  if (f.checkpoints.size() < 2) fail(ErrorKind::kConfig, "compare needs at least two --checkpoint entries");
  Run run("compare", args, out_dir(c, "compare"));
  const SequenceCache cache = load_eval_cache(run, f);
  const std::span<const LabeledSequence> data = cache.split(f.split);
  const EvalOptions options = eval_options(c, f);

  std::vector<std::string> names;
  std::vector<EvalReport> reports;
  std::map<std::string, std::size_t> seen;
  for (const auto& arg : f.checkpoints) {
    std::vector<LoadedModel> group;
    for (const auto& path : split_commas(arg)) group.push_back(load_model(run, path, cache));
    if (group.empty()) fail(ErrorKind::kConfig, "empty --checkpoint entry");
    reports.push_back(evaluate_group(group, data, std::nullopt, options));
    const std::string base(variant_name(group.front().model.config().variant));
    const std::size_t k = ++seen[base];
    names.push_back(k == 1 ? base : base + "#" + std::to_string(k));
  }

  std::string table = "model,variant,mode,models,auroc_mean,auroc_sd,auprc_mean,auprc_sd,max_mcc_mean,"
                      "max_mcc_sd,sequences,positives,censored,median_event_index\n";
  json rows = json::array();
  std::vector<std::vector<double>> crossing(reports.size());
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const EvalReport& rep = reports[r];
    std::size_t censored = 0;
    std::vector<double> events;
    for (const auto& t : rep.timing) {
      censored += t.censored ? 1 : 0;
      const double e = (!t.censored && t.event_index) ? static_cast<double>(*t.event_index)
                                                      : std::numeric_limits<double>::infinity();
      crossing[r].push_back(e);
      if (std::isfinite(e)) events.push_back(e);
    }
    const double med = median(events);
    table += csv_field(names[r]) + ',' + rep.variant + ',' + std::string(eval_mode_name(rep.mode)) + ',' +
             std::to_string(rep.models) + ',' + format_double(rep.auroc.mean) + ',' + format_double(rep.auroc.sd) +
             ',' + format_double(rep.auprc.mean) + ',' + format_double(rep.auprc.sd) + ',' +
             format_double(rep.max_mcc.mean) + ',' + format_double(rep.max_mcc.sd) + ',' +
             std::to_string(rep.sequences) + ',' + std::to_string(rep.positives) + ',' +
             std::to_string(censored) + ',' + (std::isfinite(med) ? format_double(med) : std::string()) + '\n';
    json row = rep.to_json();
    row.erase("timing");
    row["model"] = names[r];
    row["censored"] = censored;
    row["median_event_index"] = std::isfinite(med) ? json(med) : json(nullptr);
    rows.push_back(std::move(row));
  }

  std::string early = "sequence_id";
  for (const auto& name : names) {
    early += ',' + csv_field(name + ".window") + ',' + csv_field(name + ".event_index") + ',' +
             csv_field(name + ".event_time") + ',' + csv_field(name + ".censored");
  }
  early += '\n';
  const std::size_t n_rows = reports.front().timing.size();
  for (std::size_t i = 0; i < n_rows; ++i) {
    early += csv_field(reports.front().timing[i].sequence_id);
    for (const auto& rep : reports) {
      const TimingRow& t = rep.timing[i];
      early += ',' + (t.censored ? std::string() : std::to_string(t.window)) + ',' +
               (t.event_index ? std::to_string(*t.event_index) : std::string()) + ',' +
               (t.event_time ? format_double(*t.event_time) : std::string()) + ',' + (t.censored ? "1" : "0");
    }
    early += '\n';
  }

  json pairs = json::array();
  for (std::size_t a = 0; a < reports.size(); ++a) {
    for (std::size_t b = a + 1; b < reports.size(); ++b) {
      std::size_t a_first = 0, b_first = 0, ties = 0;
      for (std::size_t i = 0; i < n_rows; ++i) {
        if (crossing[a][i] < crossing[b][i]) ++a_first;
        else if (crossing[b][i] < crossing[a][i]) ++b_first;
        else ++ties;
      }
      const char* direction = a_first > b_first ? "first earlier" : b_first > a_first ? "second earlier" : "even";
      pairs.push_back({{"first", names[a]}, {"second", names[b]}, {"first_earlier", a_first},
                       {"second_earlier", b_first}, {"ties", ties}, {"direction", direction}});
    }
  }
  run.write("comparison.csv", table);
  run.write("earliness.csv", early);
  run.write("comparison.json", pretty({{"schema", "adaptime.comparison/1"},
                                       {"split", f.split},
                                       {"earliness_threshold", f.threshold},
                                       {"rows", std::move(rows)},
                                       {"earliness_pairs", std::move(pairs)}}));
  run.set_config(eval_config(c, f));
  run.set_seed(c.seed.value_or(0));
  out << table;
  run.finish(out);
}

void cmd_inspect(const Common& c, const EvalFlags& f, const std::vector<std::string>& args, std::ostream& out) {
  if (f.checkpoints.size() != 1) fail(ErrorKind::kConfig, "inspect-windows takes exactly one --checkpoint");
  Run run("inspect-windows", args, out_dir(c, "inspect-windows"));
  const SequenceCache cache = load_eval_cache(run, f);
  const LoadedModel model = load_model(run, f.checkpoints.front(), cache);
  std::span<const LabeledSequence> data = cache.split(f.split);
  if (f.limit > 0) data = data.first(std::min(data.size(), f.limit));
  run.write("windows.csv", window_table_csv(model.model, data));
  run.set_config({{"checkpoint", f.checkpoints.front()}, {"data", f.data}, {"split", f.split}, {"limit", f.limit}});
  run.finish(out);
}

int dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err);

std::vector<std::string> with_out(std::vector<std::string> args, const std::string& dir) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--out" && i + 1 < args.size()) {
      args[i + 1] = dir;
      return args;
    }
    if (args[i].rfind("--out=", 0) == 0) {
      args[i] = "--out=" + dir;
      return args;
    }
  }
  args.push_back("--out");
  args.push_back(dir);
  return args;
}

void cmd_replay(const std::string& manifest_path, const std::string& out_override, std::ostream& out,
                std::ostream& err) {
  const json manifest = read_json_file(manifest_path);
  std::vector<std::string> args;
  fs::path original_out;
  fs::path cwd;
  try {
    if (manifest.at("schema") != "adaptime.manifest/1") fail(ErrorKind::kData, "not an adaptime manifest");
    args = manifest.at("args").get<std::vector<std::string>>();
    original_out = manifest.at("out_dir").get<std::string>();
    cwd = manifest.at("cwd").get<std::string>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kData, std::string("manifest: ") + e.what());
  }
  for (const auto& input : manifest.at("inputs")) {
    const std::string path = input.at("path");
    if (!fs::exists(path)) fail(ErrorKind::kIo, "replay: input '" + path + "' no longer exists");
    if (sha256_file(path) != input.at("sha256").get<std::string>()) {
      fail(ErrorKind::kData, "replay: input '" + path + "' changed since the recorded run");
    }
  }
  const fs::path target = fs::absolute(out_override.empty() ? fs::path(original_out.string() + ".replay")
                                                            : fs::path(out_override));
  const fs::path previous = fs::current_path();
  int code = kExitOk;
  {
    std::error_code ec;
    fs::current_path(cwd, ec);
    if (ec) fail(ErrorKind::kIo, "replay: cannot enter recorded directory '" + cwd.string() + "'");
    std::ostringstream quiet;
    code = dispatch(with_out(args, target.string()), quiet, err);
    fs::current_path(previous);
  }
  if (code != kExitOk) fail(ErrorKind::kData, "replay: command exited with code " + std::to_string(code));
  const json replayed = read_json_file(target / "manifest.json");
  std::map<std::string, std::string> want;
  std::map<std::string, std::string> got;
  for (const auto& o : manifest.at("outputs")) want[o.at("path")] = o.at("sha256");
  for (const auto& o : replayed.at("outputs")) got[o.at("path")] = o.at("sha256");
  std::size_t mismatches = 0;
  for (const auto& [path, hash] : want) {
    auto it = got.find(path);
    if (it == got.end()) {
      err << "replay: missing output " << path << "\n";
      ++mismatches;
    } else if (it->second != hash) {
      err << "replay: output differs: " << path << "\n";
      ++mismatches;
    }
  }
  for (const auto& [path, hash] : got) {
    if (!want.contains(path)) {
      err << "replay: unexpected output " << path << "\n";
      ++mismatches;
    }
  }
  if (mismatches > 0) {
    fail(ErrorKind::kData, "replay: " + std::to_string(mismatches) + " of " + std::to_string(want.size()) +
                               " outputs do not match");
  }
  out << "replay: " << want.size() << " outputs byte-identical (" << target.string() << ")\n";
}

int dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adaptive prediction timing: variational embeddings, equi-precise windows, LSTM.", "adaptime"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  Common common;
  EvalFlags eval;
  std::string events;
  std::string labels;
  std::size_t snapshot_limit = std::numeric_limits<std::size_t>::max();
  std::size_t jobs = 1;
  std::string manifest;

  auto add_out = [&](CLI::App* sub) {
    sub->add_option("--out", common.out, "Output directory (default: $ADAPTIME_OUT/<command> or runs/<command>)");
  };
  auto add_seed = [&](CLI::App* sub, const char* help) { sub->add_option("--seed", common.seed, help); };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic event stream and labels");
  synth->add_option("--config", common.config, "Generator config JSON (defaults if omitted)")->check(CLI::ExistingFile);
  add_seed(synth, "Generator seed (default 0)");
  add_out(synth);

  auto* prepare = app.add_subcommand("prepare", "Fit the vocabulary, tokenise and split event CSVs");
  prepare->add_option("--events", events, "Event CSV (patient_id,time,variable_id,value)")->required()->check(CLI::ExistingFile);
  prepare->add_option("--labels", labels, "Label CSV (patient_id,label)")->required()->check(CLI::ExistingFile);
  prepare->add_option("--config", common.config, "Data options JSON")->check(CLI::ExistingFile);
  add_seed(prepare, "Split seed (overrides split_seed)");
  add_out(prepare);

  auto* train = app.add_subcommand("train", "Train one model variant");
  train->add_option("--config", common.config, "Training config JSON")->required()->check(CLI::ExistingFile);
  add_seed(train, "Override the config seed");
  train->add_option("--variant", common.variant, "Override the variant (det-time, det-count, bayes-time, bayes-count, bayes-pstar)");
  train->add_option("--epochs", common.epochs, "Override the epoch count");
  train->add_option("--snapshot-limit", snapshot_limit, "Validation sequences per window snapshot (bayes-pstar)");
  add_out(train);

  auto* sweep = app.add_subcommand("sweep", "Successive-halving hyperparameter sweep");
  sweep->add_option("--config", common.config, "Training config JSON with a 'sweep' section")->required()->check(CLI::ExistingFile);
  add_seed(sweep, "Override the config seed");
  sweep->add_option("--variant", common.variant, "Override the variant");
  sweep->add_option("--jobs", jobs, "Trials trained concurrently per rung");
  add_out(sweep);

  auto add_eval_flags = [&](CLI::App* sub, bool with_mode) {
    sub->add_option("--checkpoint", eval.checkpoints,
                    "Checkpoint path; comma-separated paths form a bootstrap ensemble")->required();
    sub->add_option("--data", eval.data, "Sequence cache (sequences.bin)")->required()->check(CLI::ExistingFile);
    sub->add_option("--split", eval.split, "train, valid or test (default test)");
    if (with_mode) {
      sub->add_option("--mode", eval.mode, "variational or bootstrap (default: by checkpoint kind)");
      sub->add_option("--draws", eval.draws, "Variational re-samples (default 100)");
      sub->add_option("--resamples", eval.resamples, "Bootstrap re-samples (default 1000)");
      sub->add_option("--threshold", eval.threshold, "Earliness probability threshold (default 0.5)");
      add_seed(sub, "Resampling seed (default 0)");
    }
    add_out(sub);
  };
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint or deterministic ensemble");
  add_eval_flags(ev, true);
  auto* compare = app.add_subcommand("compare", "Compare variants on the same data, with paired earliness");
  add_eval_flags(compare, true);
  auto* inspect = app.add_subcommand("inspect-windows", "Per-event precision and window assignment CSV");
  add_eval_flags(inspect, false);
  inspect->add_option("--limit", eval.limit, "Maximum number of sequences (0 = all)");

  auto* replay = app.add_subcommand("replay", "Re-run a command from its manifest and verify output hashes");
  replay->add_option("--manifest", manifest, "manifest.json of an earlier run")->required()->check(CLI::ExistingFile);
  replay->add_option("--out", common.out, "Replay directory (default: <recorded out>.replay)");

  std::vector<const char*> argv{"adaptime"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  const std::vector<std::string> recorded(args.begin(), args.end());
  if (synth->parsed()) cmd_synth(common, recorded, out, err);
  else if (prepare->parsed()) cmd_prepare(common, events, labels, recorded, out, err);
  else if (train->parsed()) cmd_train(common, snapshot_limit, recorded, out);
  else if (sweep->parsed()) cmd_sweep(common, jobs, recorded, out);
  else if (ev->parsed()) cmd_eval(common, eval, recorded, out);
  else if (compare->parsed()) cmd_compare(common, eval, recorded, out);
  else if (inspect->parsed()) cmd_inspect(common, eval, recorded, out);
  else if (replay->parsed()) cmd_replay(manifest, common.out, out, err);
  return kExitOk;
}

}  // namespace

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const Error& e) {
    err << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error [internal]: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace adaptime

#include "adaptime/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "adaptime/csv.hpp"
#include "adaptime/error.hpp"
#include "adaptime/hashing.hpp"
#include "adaptime/random.hpp"
#include "binary_io.hpp"

namespace adaptime {

namespace {

std::optional<double> parse_double(const std::string& text) {
  double value = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) return std::nullopt;
  return value;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

std::map<std::string, std::size_t> header_index(const std::string& line,
                                                std::initializer_list<const char*> required,
                                                const char* what) {
  const auto cols = split_csv_line(line);
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < cols.size(); ++i) idx[cols[i]] = i;
  for (const char* col : required) {
    if (!idx.contains(col)) fail(ErrorKind::kData, std::string(what) + ": missing column '" + col + "'");
  }
  return idx;
}

}  // namespace

// ---- CSV -------------------------------------------------------------------

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field += c;
    }
  }
  if (quoted) fail(ErrorKind::kData, "csv: unterminated quote");
  out.push_back(std::move(field));
  return out;
}

std::vector<EventRecord> read_events_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::kData, "events csv: missing header");
  strip_cr(line);
  const auto idx = header_index(line, {"patient_id", "time", "variable_id", "value"}, "events csv");
  std::vector<EventRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() < idx.size()) {
      fail(ErrorKind::kData, "events csv line " + std::to_string(line_no) + ": expected " +
                                 std::to_string(idx.size()) + " fields");
    }
    EventRecord rec;
    rec.patient_id = fields[idx.at("patient_id")];
    const auto t = parse_double(fields[idx.at("time")]);
    if (!t || *t < 0.0) {
      fail(ErrorKind::kData, "events csv line " + std::to_string(line_no) +
                                 ": time must be a non-negative number");
    }
    rec.time = *t;
    rec.variable_id = fields[idx.at("variable_id")];
    rec.value = fields[idx.at("value")];
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<EventRecord> read_events_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open events csv '" + path.string() + "'");
  return read_events_csv(in);
}

std::map<std::string, int> read_labels_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::kData, "labels csv: missing header");
  strip_cr(line);
  const auto idx = header_index(line, {"patient_id", "label"}, "labels csv");
  std::map<std::string, int> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() < idx.size()) {
      fail(ErrorKind::kData, "labels csv line " + std::to_string(line_no) + ": too few fields");
    }
    const std::string& label = fields[idx.at("label")];
    if (label != "0" && label != "1") {
      fail(ErrorKind::kData, "labels csv line " + std::to_string(line_no) + ": label must be 0 or 1");
    }
    if (!out.emplace(fields[idx.at("patient_id")], label == "1" ? 1 : 0).second) {
      fail(ErrorKind::kData, "labels csv line " + std::to_string(line_no) + ": duplicate patient");
    }
  }
  return out;
}

std::map<std::string, int> read_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open labels csv '" + path.string() + "'");
  return read_labels_csv(in);
}

std::string events_to_csv(std::span<const EventRecord> events) {
  std::string out = "patient_id,time,variable_id,value\n";
  for (const EventRecord& e : events) {
    out += csv_field(e.patient_id) + ',' + format_double(e.time) + ',' + csv_field(e.variable_id) +
           ',' + csv_field(e.value) + '\n';
  }
  return out;
}

std::string labels_to_csv(const std::vector<std::pair<std::string, int>>& labels) {
  std::string out = "patient_id,label\n";
  for (const auto& [id, label] : labels) out += csv_field(id) + ',' + std::to_string(label) + '\n';
  return out;
}

std::vector<Patient> group_patients(std::span<const EventRecord> events,
                                    const std::map<std::string, int>& labels) {
  std::map<std::string, Patient> by_id;
  for (const auto& [id, label] : labels) by_id[id] = Patient{id, {}, label};
  for (const EventRecord& e : events) {
    auto it = by_id.find(e.patient_id);
    if (it == by_id.end()) fail(ErrorKind::kData, "patient '" + e.patient_id + "' has no label");
    it->second.events.push_back(e);
  }
  std::vector<Patient> out;
  out.reserve(by_id.size());
  for (auto& [id, patient] : by_id) {
    std::stable_sort(patient.events.begin(), patient.events.end(),
                     [](const EventRecord& a, const EventRecord& b) { return a.time < b.time; });
    out.push_back(std::move(patient));
  }
  return out;
}

// ---- vocabulary ------------------------------------------------------------

double nearest_rank_quantile(std::span<const double> sorted, std::size_t k, std::size_t q) {
  if (sorted.empty()) fail(ErrorKind::kData, "quantile of empty sample");
  const std::size_t n = sorted.size();
  const std::size_t rank = std::max<std::size_t>(1, (k * n + q - 1) / q);
  return sorted[std::min(rank, n) - 1];
}

std::size_t Vocabulary::bin_of(const VariableInfo& variable, double value) {
  return static_cast<std::size_t>(
      std::lower_bound(variable.cuts.begin(), variable.cuts.end(), value) - variable.cuts.begin());
}

Vocabulary Vocabulary::fit(std::span<const Patient> train, const VocabularyOptions& options,
                           std::vector<std::string>* warnings) {
  std::map<std::string, std::vector<std::string>> observed;
  for (const Patient& p : train) {
    for (const EventRecord& e : p.events) observed[e.variable_id].push_back(e.value);
  }
  for (const std::string& v : options.categorical_variables) {
    if (!observed.contains(v) && warnings != nullptr) {
      warnings->push_back("variable '" + v + "' has no training observations; excluded");
    }
  }
  Vocabulary vocab;
  for (auto& [id, values] : observed) {
    VariableInfo info;
    info.id = id;
    std::vector<double> numbers;
    bool numeric = !options.categorical_variables.contains(id);
    for (const std::string& v : values) {
      if (!numeric) break;
      if (auto d = parse_double(v)) numbers.push_back(*d);
      else numeric = false;
    }
    info.continuous = numeric;
    if (numeric) {
      std::sort(numbers.begin(), numbers.end());
      for (std::size_t k = 1; k < kQuantileBins; ++k) {
        info.cuts.push_back(nearest_rank_quantile(numbers, k, kQuantileBins));
      }
    } else {
      std::set<std::string> cats(values.begin(), values.end());
      info.categories.assign(cats.begin(), cats.end());
    }
    vocab.variables_.push_back(std::move(info));
  }
  vocab.build_index();
  return vocab;
}

void Vocabulary::build_index() {
  index_.clear();
  meanings_.clear();
  for (std::size_t v = 0; v < variables_.size(); ++v) {
    VariableInfo& info = variables_[v];
    index_[info.id] = v;
    info.first_token = static_cast<Token>(meanings_.size());
    if (info.continuous) {
      for (std::size_t b = 0; b < kQuantileBins; ++b) {
        meanings_.push_back(TokenMeaning{info.id, TokenMeaning::Kind::kBin, b, {}});
      }
    } else {
      for (const std::string& c : info.categories) {
        meanings_.push_back(TokenMeaning{info.id, TokenMeaning::Kind::kCategory, 0, c});
      }
    }
    info.missing_token = static_cast<Token>(meanings_.size());
    meanings_.push_back(TokenMeaning{info.id, TokenMeaning::Kind::kMissing, 0, {}});
  }
}

const VariableInfo* Vocabulary::find(const std::string& variable) const {
  auto it = index_.find(variable);
  return it == index_.end() ? nullptr : &variables_[it->second];
}

std::optional<Token> Vocabulary::token_for(const std::string& variable, const std::string& value,
                                           bool* unseen_category) const {
  const VariableInfo* info = find(variable);
  if (info == nullptr) return std::nullopt;
  if (unseen_category != nullptr) *unseen_category = false;
  if (info->continuous) {
    if (auto d = parse_double(value)) {
      return info->first_token + static_cast<Token>(bin_of(*info, *d));
    }
  } else {
    auto it = std::lower_bound(info->categories.begin(), info->categories.end(), value);
    if (it != info->categories.end() && *it == value) {
      return info->first_token + static_cast<Token>(it - info->categories.begin());
    }
  }
  if (unseen_category != nullptr) *unseen_category = true;
  return info->missing_token;
}

std::optional<Token> Vocabulary::missing_token(const std::string& variable) const {
  const VariableInfo* info = find(variable);
  if (info == nullptr) return std::nullopt;
  return info->missing_token;
}

const TokenMeaning& Vocabulary::meaning(Token token) const {
  if (token >= meanings_.size()) {
    fail(ErrorKind::kRange, "token " + std::to_string(token) + " outside vocabulary of " +
                                std::to_string(meanings_.size()));
  }
  return meanings_[token];
}

Token Vocabulary::token_of(const TokenMeaning& m) const {
  const VariableInfo* info = find(m.variable);
  if (info == nullptr) fail(ErrorKind::kRange, "unknown variable '" + m.variable + "'");
  switch (m.kind) {
    case TokenMeaning::Kind::kMissing: return info->missing_token;
    case TokenMeaning::Kind::kBin:
      if (!info->continuous || m.bin >= kQuantileBins) break;
      return info->first_token + static_cast<Token>(m.bin);
    case TokenMeaning::Kind::kCategory: {
      auto it = std::lower_bound(info->categories.begin(), info->categories.end(), m.category);
      if (it == info->categories.end() || *it != m.category) break;
      return info->first_token + static_cast<Token>(it - info->categories.begin());
    }
  }
  fail(ErrorKind::kRange, "no token for the given meaning of '" + m.variable + "'");
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json vars = nlohmann::json::array();
  for (const VariableInfo& v : variables_) {
    nlohmann::json j = {{"id", v.id}, {"continuous", v.continuous}, {"first_token", v.first_token},
                        {"missing_token", v.missing_token}};
    if (v.continuous) j["cuts"] = v.cuts;
    else j["categories"] = v.categories;
    vars.push_back(std::move(j));
  }
  return {{"version", 1}, {"size", size()}, {"variables", std::move(vars)}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary vocab;
  try {
    for (const auto& v : j.at("variables")) {
      VariableInfo info;
      info.id = v.at("id").get<std::string>();
      info.continuous = v.at("continuous").get<bool>();
      if (info.continuous) info.cuts = v.at("cuts").get<std::vector<double>>();
      else info.categories = v.at("categories").get<std::vector<std::string>>();
      vocab.variables_.push_back(std::move(info));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("vocabulary json: ") + e.what());
  }
  vocab.build_index();
  return vocab;
}

std::string Vocabulary::hash() const { return sha256_hex(to_json().dump()); }

// ---- tokenisation ------------------------------------------------------------

void IngestionReport::merge(const IngestionReport& o) {
  patients_in += o.patients_in;
  patients_kept += o.patients_kept;
  patients_dropped_empty += o.patients_dropped_empty;
  events_in += o.events_in;
  events_kept += o.events_kept;
  events_after_horizon += o.events_after_horizon;
  events_unknown_variable += o.events_unknown_variable;
  events_unseen_category += o.events_unseen_category;
  missing_tokens_emitted += o.missing_tokens_emitted;
  vocab_size = std::max(vocab_size, o.vocab_size);
  warnings.insert(warnings.end(), o.warnings.begin(), o.warnings.end());
}

nlohmann::json IngestionReport::to_json() const {
  return {{"patients_in", patients_in},
          {"patients_kept", patients_kept},
          {"patients_dropped_empty", patients_dropped_empty},
          {"events_in", events_in},
          {"events_kept", events_kept},
          {"events_after_horizon", events_after_horizon},
          {"events_unknown_variable", events_unknown_variable},
          {"events_unseen_category", events_unseen_category},
          {"missing_tokens_emitted", missing_tokens_emitted},
          {"vocab_size", vocab_size},
          {"warnings", warnings}};
}

std::vector<LabeledSequence> tokenize(std::span<const Patient> patients, const Vocabulary& vocab,
                                      const TokenizeOptions& options, IngestionReport& report) {
  if (!(options.horizon_hours > 0.0)) fail(ErrorKind::kConfig, "tokenize: horizon must be positive");
  report.vocab_size = vocab.size();
  std::vector<std::pair<std::string, Token>> expected;
  for (const std::string& v : options.expected_variables) {
    if (auto t = vocab.missing_token(v)) expected.emplace_back(v, *t);
  }
  const bool emit_missing = !expected.empty() && options.missing_epoch_hours > 0.0;

  std::vector<LabeledSequence> out;
  for (const Patient& patient : patients) {
    ++report.patients_in;
    report.events_in += patient.events.size();
    struct Item {
      double time;
      Token token;
    };
    std::vector<Item> items;
    std::vector<const EventRecord*> kept;
    for (const EventRecord& e : patient.events) {
      if (e.time > options.horizon_hours) {
        ++report.events_after_horizon;
        continue;
      }
      bool unseen = false;
      const auto token = vocab.token_for(e.variable_id, e.value, &unseen);
      if (!token) {
        if (options.unknown_variables == UnknownVariablePolicy::kError) {
          fail(ErrorKind::kData, "patient '" + patient.id + "': unknown variable '" + e.variable_id + "'");
        }
        ++report.events_unknown_variable;
        continue;
      }
      if (unseen) ++report.events_unseen_category;
      items.push_back(Item{e.time, *token});
      kept.push_back(&e);
    }
    report.events_kept += items.size();
    if (emit_missing && !kept.empty()) {
      const double span_end = kept.back()->time;
      const double len = options.missing_epoch_hours;
      std::vector<Item> missing;
      for (std::size_t epoch = 0;; ++epoch) {
        const double start = static_cast<double>(epoch) * len;
        if (start > span_end || start >= options.horizon_hours) break;
        const double end = start + len;
        for (const auto& [variable, token] : expected) {
          const bool seen = std::any_of(kept.begin(), kept.end(), [&](const EventRecord* e) {
            return e->variable_id == variable && e->time >= start && e->time < end;
          });
          if (!seen) missing.push_back(Item{std::min(end, options.horizon_hours), token});
        }
      }
      report.missing_tokens_emitted += missing.size();
      items.insert(items.end(), missing.begin(), missing.end());
      std::stable_sort(items.begin(), items.end(),
                       [](const Item& a, const Item& b) { return a.time < b.time; });
    }
    if (items.empty()) {
      ++report.patients_dropped_empty;
      continue;
    }
    LabeledSequence seq;
    seq.id = patient.id;
    seq.label = patient.label;
    for (const Item& item : items) {
      seq.tokens.push_back(item.token);
      seq.times.push_back(item.time);
    }
    out.push_back(std::move(seq));
    ++report.patients_kept;
  }
  return out;
}

// ---- splitting -------------------------------------------------------------

PatientSplit split_patients(std::vector<std::string> ids, std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  Rng rng(derive_seed({seed, 0x5911ULL}));
  std::shuffle(ids.begin(), ids.end(), rng);
  const double n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * n));
  const auto n_valid = std::min(ids.size() - n_train, static_cast<std::size_t>(std::llround(0.1 * n)));
  PatientSplit out;
  out.train.assign(ids.begin(), ids.begin() + n_train);
  out.valid.assign(ids.begin() + n_train, ids.begin() + n_train + n_valid);
  out.test.assign(ids.begin() + n_train + n_valid, ids.end());
  return out;
}

// ---- sequence cache ----------------------------------------------------------

namespace {
constexpr std::string_view kCacheMagic = "ADPTSEQS";
}

const std::vector<LabeledSequence>& SequenceCache::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  fail(ErrorKind::kConfig, "unknown split '" + name + "' (expected train, valid or test)");
}

std::string encode_sequence_cache(const SequenceCache& cache) {
  detail::ByteWriter w;
  w.raw(kCacheMagic);
  w.u32(kSequenceCacheVersion);
  w.str(cache.vocab_hash);
  for (const auto* split : {&cache.train, &cache.valid, &cache.test}) {
    w.u64(split->size());
    for (const LabeledSequence& s : *split) {
      w.str(s.id);
      w.u8(static_cast<std::uint8_t>(s.label));
      w.u64(s.tokens.size());
      for (Token t : s.tokens) w.u32(t);
      for (double t : s.times) w.f64(t);
    }
  }
  return w.bytes();
}

SequenceCache decode_sequence_cache(const std::string& bytes) {
  detail::ByteReader r(bytes, "sequence cache");
  if (r.raw(kCacheMagic.size()) != kCacheMagic) fail(ErrorKind::kData, "sequence cache: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kSequenceCacheVersion) {
    fail(ErrorKind::kData, "sequence cache: unsupported version " + std::to_string(version));
  }
  SequenceCache cache;
  cache.vocab_hash = r.str();
  for (auto* split : {&cache.train, &cache.valid, &cache.test}) {
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
      LabeledSequence s;
      s.id = r.str();
      s.label = r.u8();
      const std::uint64_t n = r.u64();
      s.tokens.resize(n);
      s.times.resize(n);
      for (auto& t : s.tokens) t = r.u32();
      for (auto& t : s.times) t = r.f64();
      split->push_back(std::move(s));
    }
  }
  if (!r.done()) fail(ErrorKind::kData, "sequence cache: trailing bytes");
  return cache;
}

// ---- end-to-end --------------------------------------------------------------

PreparedData prepare_data(std::span<const EventRecord> events,
                          const std::map<std::string, int>& labels, const DataOptions& options) {
  const std::vector<Patient> patients = group_patients(events, labels);
  std::vector<std::string> ids;
  for (const Patient& p : patients) ids.push_back(p.id);
  const PatientSplit split = split_patients(ids, options.split_seed);

  std::unordered_map<std::string, const Patient*> by_id;
  for (const Patient& p : patients) by_id[p.id] = &p;
  auto gather = [&](const std::vector<std::string>& names) {
    std::vector<Patient> out;
    for (const std::string& id : names) out.push_back(*by_id.at(id));
    std::sort(out.begin(), out.end(), [](const Patient& a, const Patient& b) { return a.id < b.id; });
    return out;
  };
  const std::vector<Patient> train = gather(split.train);
  const std::vector<Patient> valid = gather(split.valid);
  const std::vector<Patient> test = gather(split.test);

  PreparedData out;
  out.vocabulary = Vocabulary::fit(train, options.vocabulary, &out.report.warnings);
  for (const std::string& v : options.tokenize.expected_variables) {
    if (out.vocabulary.find(v) == nullptr) {
      out.report.warnings.push_back("expected variable '" + v +
                                    "' has no training observations; no missing token emitted");
    }
  }
  out.cache.vocab_hash = out.vocabulary.hash();
  out.cache.train = tokenize(train, out.vocabulary, options.tokenize, out.report);
  out.cache.valid = tokenize(valid, out.vocabulary, options.tokenize, out.report);
  out.cache.test = tokenize(test, out.vocabulary, options.tokenize, out.report);
  return out;
}

}  // namespace adaptime

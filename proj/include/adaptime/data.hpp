#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "adaptime/sequence.hpp"

namespace adaptime {

// One row of the event CSV: patient_id,time,variable_id,value
struct EventRecord {
  std::string patient_id;
  double time = 0.0;  // hours since admission
  std::string variable_id;
  std::string value;

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

struct Patient {
  std::string id;
  std::vector<EventRecord> events;  // sorted by time, ties in file order
  int label = 0;
};

// ---- CSV -------------------------------------------------------------------

std::vector<std::string> split_csv_line(const std::string& line);
std::vector<EventRecord> read_events_csv(std::istream& in);
std::vector<EventRecord> read_events_csv(const std::filesystem::path& path);
std::map<std::string, int> read_labels_csv(std::istream& in);
std::map<std::string, int> read_labels_csv(const std::filesystem::path& path);
std::string events_to_csv(std::span<const EventRecord> events);
std::string labels_to_csv(const std::vector<std::pair<std::string, int>>& labels);

// Patients sorted by id. Every event's patient needs a label; labelled
// patients without events are kept (and dropped later as empty).
std::vector<Patient> group_patients(std::span<const EventRecord> events,
                                    const std::map<std::string, int>& labels);

// ---- vocabulary ------------------------------------------------------------

inline constexpr std::size_t kQuantileBins = 10;

struct VariableInfo {
  std::string id;
  bool continuous = false;
  std::vector<double> cuts;             // continuous: kQuantileBins - 1 cut points
  std::vector<std::string> categories;  // discrete: sorted observed categories
  Token first_token = 0;
  Token missing_token = 0;
};

struct TokenMeaning {
  enum class Kind { kBin, kCategory, kMissing };
  std::string variable;
  Kind kind = Kind::kMissing;
  std::size_t bin = 0;
  std::string category;

  friend bool operator==(const TokenMeaning&, const TokenMeaning&) = default;
};

struct VocabularyOptions {
  // Variables forced to be treated as discrete even if their values parse as numbers.
  std::set<std::string> categorical_variables;
};

class Vocabulary {
 public:
  // Fits on training patients only. Continuous variables get nearest-rank
  // decile cut points; discrete variables one token per observed category;
  // every variable one missing token.
  static Vocabulary fit(std::span<const Patient> train, const VocabularyOptions& options,
                        std::vector<std::string>* warnings = nullptr);

  std::size_t size() const { return meanings_.size(); }
  const std::vector<VariableInfo>& variables() const { return variables_; }
  const VariableInfo* find(const std::string& variable) const;

  // Token for an observation; unseen categories map to the missing token.
  // Returns nullopt for a variable not in the vocabulary.
  std::optional<Token> token_for(const std::string& variable, const std::string& value,
                                 bool* unseen_category = nullptr) const;
  std::optional<Token> missing_token(const std::string& variable) const;

  const TokenMeaning& meaning(Token token) const;
  Token token_of(const TokenMeaning& meaning) const;

  static std::size_t bin_of(const VariableInfo& variable, double value);

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  std::string hash() const;

 private:
  void build_index();

  std::vector<VariableInfo> variables_;
  std::map<std::string, std::size_t> index_;
  std::vector<TokenMeaning> meanings_;
};

// Nearest-rank k-th q-quantile of sorted values: the ceil(k*n/q)-th smallest.
double nearest_rank_quantile(std::span<const double> sorted, std::size_t k, std::size_t q);

// ---- tokenisation ----------------------------------------------------------

enum class UnknownVariablePolicy { kSkip, kError };

struct TokenizeOptions {
  double horizon_hours = 48.0;
  // Missing-token emission: for each epoch inside a patient's observed span,
  // each expected variable without a reading yields its missing token at the
  // epoch end. Applies to ingestion only.
  double missing_epoch_hours = 1.0;
  std::vector<std::string> expected_variables;
  UnknownVariablePolicy unknown_variables = UnknownVariablePolicy::kSkip;
};

struct IngestionReport {
  std::size_t patients_in = 0;
  std::size_t patients_kept = 0;
  std::size_t patients_dropped_empty = 0;
  std::size_t events_in = 0;
  std::size_t events_kept = 0;
  std::size_t events_after_horizon = 0;
  std::size_t events_unknown_variable = 0;
  std::size_t events_unseen_category = 0;
  std::size_t missing_tokens_emitted = 0;
  std::size_t vocab_size = 0;
  std::vector<std::string> warnings;

  void merge(const IngestionReport& other);
  nlohmann::json to_json() const;
};

std::vector<LabeledSequence> tokenize(std::span<const Patient> patients, const Vocabulary& vocab,
                                      const TokenizeOptions& options, IngestionReport& report);

// ---- splitting -------------------------------------------------------------

struct PatientSplit {
  std::vector<std::string> train;
  std::vector<std::string> valid;
  std::vector<std::string> test;
};

// 8:1:1 by patient, deterministic in the seed.
PatientSplit split_patients(std::vector<std::string> ids, std::uint64_t seed);

// ---- sequence cache ----------------------------------------------------------

// Binary cache of tokenised splits; little-endian:
//   magic "ADPTSEQS", version u32, vocab_hash (u32 len + bytes),
//   then for train/valid/test: count u64, per sequence:
//   id (u32 len + bytes), label u8, n u64, tokens u32[n], times f64[n].
struct SequenceCache {
  std::string vocab_hash;
  std::vector<LabeledSequence> train;
  std::vector<LabeledSequence> valid;
  std::vector<LabeledSequence> test;

  const std::vector<LabeledSequence>& split(const std::string& name) const;
};

inline constexpr std::uint32_t kSequenceCacheVersion = 1;

std::string encode_sequence_cache(const SequenceCache& cache);
SequenceCache decode_sequence_cache(const std::string& bytes);

// ---- end-to-end ingestion --------------------------------------------------

struct DataOptions {
  TokenizeOptions tokenize;
  VocabularyOptions vocabulary;
  std::uint64_t split_seed = 0;
};

struct PreparedData {
  Vocabulary vocabulary;
  SequenceCache cache;
  IngestionReport report;
};

PreparedData prepare_data(std::span<const EventRecord> events,
                          const std::map<std::string, int>& labels, const DataOptions& options);

}  // namespace adaptime

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace cvcqa::data {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

using TokenSeq = std::vector<int>;

// ===== vocabulary =====

inline constexpr int kNumEntityTypes = 3;
extern const char* const kEntityTypeNames[kNumEntityTypes];  // person/place/number

/// Token inventory with reserved ids 0 = NULL (muting sentinel) and 1 = UNK,
/// punctuation and stop-word sets, typed entity pools, relation keys, and
/// decodable fact tokens (one id per (key, entity) pair — the fact oracle
/// reads bindings straight out of passage tokens).
class Vocabulary {
 public:
  struct Layout {
    int keys_per_type = 4;
    int entities_per_type = 7;
    int n_themes = 8;
    int n_fillers = 16;
    int n_stops = 6;
  };

  Vocabulary() = default;
  explicit Vocabulary(const Layout& layout);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  int id(const std::string& token) const;  // -1 when unknown

  static constexpr int null_id() { return 0; }
  static constexpr int unk_id() { return 1; }
  int period_id() const { return period_; }
  int qmark_id() const { return qmark_; }

  bool is_stop(int id) const;  // stop words and punctuation both count
  bool is_entity(int id) const;
  bool is_key(int id) const;
  bool is_fact(int id) const;
  bool is_theme(int id) const;

  int stop_id(int local) const { return stop_base_ + local; }
  int qword_id(int type) const { return qword_base_ + type; }
  int key_id(int type, int local) const;
  int entity_id(int type, int local) const;
  int theme_id(int local) const { return theme_base_ + local; }
  int filler_id(int local) const { return filler_base_ + local; }

  int entity_type_of(int entity_id) const;
  int key_type_of(int key_id) const;
  int key_global(int type, int local) const;

  /// Fact token for (global key index, entity local index within the key's type).
  int fact_id(int key_global, int ent_local) const;
  /// Inverse of fact_id: (global key index, entity local index).
  std::pair<int, int> decode_fact(int fact_token) const;
  /// Entity id named by a fact token.
  int fact_entity_id(int fact_token) const;

  const Layout& layout() const { return layout_; }
  std::vector<int> stop_ids() const;
  std::pair<int, int> entity_range(int type) const;  // [lo, hi)

 private:
  Layout layout_;
  std::vector<std::string> tokens_;
  int period_ = 0, qmark_ = 0;
  int stop_base_ = 0, qword_base_ = 0, key_base_ = 0, entity_base_ = 0,
      fact_base_ = 0, theme_base_ = 0, filler_base_ = 0;
};

std::string vocab_to_json(const Vocabulary& v);
Vocabulary vocab_from_json(const std::string& text);
void save_vocab(const Vocabulary& v, const std::string& path);
Vocabulary load_vocab(const std::string& path);

// ===== instances and datasets =====

struct McqaInstance {
  int passage_id = 0;
  TokenSeq passage;
  TokenSeq question;
  std::vector<TokenSeq> options;
  int answer = 0;
  bool shortcut_flag = false;
  std::string provenance = "original";
};

struct DatasetMeta {
  int schema_version = kSchemaVersion;
  int vocab_size = 0;
  int k = 0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  std::string generator;
  std::string tool_version = kToolVersion;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<McqaInstance> instances;
  std::size_t size() const { return instances.size(); }
};

/// One line of JSON metadata, then one instance per line.
std::string dataset_to_jsonl(const Dataset& d);
Dataset dataset_from_jsonl(const std::string& text);
void save_jsonl(const Dataset& d, const std::string& path);
Dataset load_jsonl(const std::string& path);

/// FNV-1a over the serialized form; used for byte-identity checks.
std::uint64_t fnv1a64(const std::string& bytes);

// ===== variable views and muting =====

/// Which of {passage, question, options} a branch (or probe) may see.
struct VariableView {
  bool passage = true;
  bool question = true;
  bool options = true;

  static VariableView full() { return {true, true, true}; }
  static VariableView no_p() { return {false, true, true}; }
  static VariableView no_q() { return {true, false, true}; }
  static VariableView no_pq() { return {false, false, true}; }
};

/// Copy of the instance with hidden segments replaced by NULL tokens of the
/// same length. Views hiding the options are rejected (scoring needs them);
/// the all-muted probe used at inference constructs its input separately.
McqaInstance mute(const McqaInstance& inst, const VariableView& view);

// ===== lexical overlap (the shortcut signal) =====

/// Count of distinct non-stop token ids shared by passage and option.
int overlap_score(const TokenSeq& passage, const TokenSeq& option,
                  const Vocabulary& v);
std::vector<int> overlap_profile(const McqaInstance& inst, const Vocabulary& v);
/// Index of the strict maximum of the overlap profile, or -1 on a tie.
int max_overlap_index(const McqaInstance& inst, const Vocabulary& v);

// ===== the generator's fact oracle =====

/// Resolve the instance by reading fact tokens out of the passage: find the
/// question's key, look up the entity bound to it, return the index of the
/// unique option containing that entity. Returns -1 if the instance is
/// unresolvable or ambiguous (attacked instances must never trigger that).
int fact_oracle(const McqaInstance& inst, const Vocabulary& v);

// ===== corpus generation =====

struct CorpusConfig {
  int k = 4;                      // options per question
  int questions_per_passage = 4;  // siblings sharing one passage
  double beta = 0.9;              // shortcut strength
  double entity_density = 0.3;    // decorative entity-mention rate
  int theme_sentences = 4;        // theme mentions per passage (shortcut salience)
  int passage_len_min = 18;
  int passage_len_max = 30;
  int train_size = 2000;
  int dev_size = 500;
  int test_size = 500;  // used for both test_in and test_anti
  std::uint64_t seed = 20260814;
  Vocabulary::Layout vocab;

  int facts_per_passage() const;
  /// Throws std::invalid_argument with a diagnostic when infeasible.
  void validate() const;
};

struct CorpusBundle {
  Vocabulary vocab;
  Dataset train, dev, test_in, test_anti;
};

CorpusBundle generate_corpus(const CorpusConfig& cfg);

// ===== re-partitioning =====

/// Partition by passage groups (siblings never straddle partitions) with a
/// seeded shuffle; ratios must sum to 1 within 1e-9.
std::vector<Dataset> split(const Dataset& d, const std::vector<double>& ratios,
                           std::uint64_t seed);

/// Concatenation for training-time augmentation; metas must agree on
/// vocab_size and K.
Dataset merge(const std::vector<Dataset>& parts);

}  // namespace cvcqa::data

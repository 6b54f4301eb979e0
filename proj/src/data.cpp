#include "cvcqa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cvcqa/rng.hpp"
#include "json.hpp"

namespace cvcqa::data {

using nlohmann::json;

const char* const kEntityTypeNames[kNumEntityTypes] = {"person", "place", "number"};

namespace {

const char* const kStopWords[] = {"the", "a", "of", "in", "to", "is",
                                  "on", "at", "by", "for"};
const char* const kQWords[kNumEntityTypes] = {"who", "where", "howmany"};

std::string bad(const std::string& what) { return "corpus config: " + what; }

}  // namespace

// ===== Vocabulary =====

Vocabulary::Vocabulary(const Layout& layout) : layout_(layout) {
  if (layout.keys_per_type < 1 || layout.entities_per_type < 1 ||
      layout.n_themes < 1 || layout.n_fillers < 1)
    throw std::invalid_argument("vocabulary: pool sizes must be positive");
  if (layout.n_stops < 1 || layout.n_stops > 10)
    throw std::invalid_argument("vocabulary: n_stops must be in [1,10]");

  tokens_ = {"<null>", "<unk>"};
  period_ = static_cast<int>(tokens_.size());
  tokens_.push_back(".");
  qmark_ = static_cast<int>(tokens_.size());
  tokens_.push_back("?");

  stop_base_ = static_cast<int>(tokens_.size());
  for (int i = 0; i < layout.n_stops; ++i) tokens_.push_back(kStopWords[i]);

  qword_base_ = static_cast<int>(tokens_.size());
  for (auto* q : kQWords) tokens_.push_back(q);

  key_base_ = static_cast<int>(tokens_.size());
  for (int t = 0; t < kNumEntityTypes; ++t)
    for (int i = 0; i < layout.keys_per_type; ++i)
      tokens_.push_back(std::string("key_") + kEntityTypeNames[t] + "_" + std::to_string(i));

  entity_base_ = static_cast<int>(tokens_.size());
  for (int t = 0; t < kNumEntityTypes; ++t)
    for (int i = 0; i < layout.entities_per_type; ++i)
      tokens_.push_back(std::string(kEntityTypeNames[t]) + "_" + std::to_string(i));

  fact_base_ = static_cast<int>(tokens_.size());
  const int n_keys = kNumEntityTypes * layout.keys_per_type;
  for (int kg = 0; kg < n_keys; ++kg)
    for (int e = 0; e < layout.entities_per_type; ++e)
      tokens_.push_back("bind:" + tokens_[static_cast<std::size_t>(key_base_ + kg)] +
                        ":" + tokens_[static_cast<std::size_t>(
                                  entity_base_ + (kg / layout.keys_per_type) *
                                                     layout.entities_per_type + e)]);

  theme_base_ = static_cast<int>(tokens_.size());
  for (int i = 0; i < layout.n_themes; ++i)
    tokens_.push_back("theme_" + std::to_string(i));

  filler_base_ = static_cast<int>(tokens_.size());
  for (int i = 0; i < layout.n_fillers; ++i)
    tokens_.push_back("filler_" + std::to_string(i));
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("vocabulary: id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& token) const {
  for (int i = 0; i < size(); ++i)
    if (tokens_[static_cast<std::size_t>(i)] == token) return i;
  return -1;
}

bool Vocabulary::is_stop(int id) const {
  return id == period_ || id == qmark_ ||
         (id >= stop_base_ && id < stop_base_ + layout_.n_stops);
}
bool Vocabulary::is_entity(int id) const {
  return id >= entity_base_ && id < fact_base_;
}
bool Vocabulary::is_key(int id) const { return id >= key_base_ && id < entity_base_; }
bool Vocabulary::is_fact(int id) const { return id >= fact_base_ && id < theme_base_; }
bool Vocabulary::is_theme(int id) const {
  return id >= theme_base_ && id < filler_base_;
}

int Vocabulary::key_id(int type, int local) const {
  return key_base_ + type * layout_.keys_per_type + local;
}
int Vocabulary::entity_id(int type, int local) const {
  return entity_base_ + type * layout_.entities_per_type + local;
}
int Vocabulary::entity_type_of(int entity_id) const {
  if (!is_entity(entity_id)) throw std::invalid_argument("not an entity token");
  return (entity_id - entity_base_) / layout_.entities_per_type;
}
int Vocabulary::key_type_of(int key_id) const {
  if (!is_key(key_id)) throw std::invalid_argument("not a key token");
  return (key_id - key_base_) / layout_.keys_per_type;
}
int Vocabulary::key_global(int type, int local) const {
  return type * layout_.keys_per_type + local;
}

int Vocabulary::fact_id(int key_global, int ent_local) const {
  return fact_base_ + key_global * layout_.entities_per_type + ent_local;
}
std::pair<int, int> Vocabulary::decode_fact(int fact_token) const {
  if (!is_fact(fact_token)) throw std::invalid_argument("not a fact token");
  const int rel = fact_token - fact_base_;
  return {rel / layout_.entities_per_type, rel % layout_.entities_per_type};
}
int Vocabulary::fact_entity_id(int fact_token) const {
  auto [kg, el] = decode_fact(fact_token);
  return entity_id(kg / layout_.keys_per_type, el);
}

std::vector<int> Vocabulary::stop_ids() const {
  std::vector<int> ids = {period_, qmark_};
  for (int i = 0; i < layout_.n_stops; ++i) ids.push_back(stop_base_ + i);
  return ids;
}

std::pair<int, int> Vocabulary::entity_range(int type) const {
  return {entity_id(type, 0), entity_id(type, 0) + layout_.entities_per_type};
}

std::string vocab_to_json(const Vocabulary& v) {
  json j;
  j["layout"] = {{"keys_per_type", v.layout().keys_per_type},
                 {"entities_per_type", v.layout().entities_per_type},
                 {"n_themes", v.layout().n_themes},
                 {"n_fillers", v.layout().n_fillers},
                 {"n_stops", v.layout().n_stops}};
  json toks = json::array();
  for (int i = 0; i < v.size(); ++i) toks.push_back(v.token(i));
  j["tokens"] = toks;
  j["stop_ids"] = v.stop_ids();
  json ranges;
  for (int t = 0; t < kNumEntityTypes; ++t) {
    auto [lo, hi] = v.entity_range(t);
    ranges[kEntityTypeNames[t]] = {lo, hi};
  }
  j["entity_ranges"] = ranges;
  j["reserved"] = {{"null", Vocabulary::null_id()}, {"unk", Vocabulary::unk_id()}};
  return j.dump(2) + "\n";
}

Vocabulary vocab_from_json(const std::string& text) {
  json j = json::parse(text);
  Vocabulary::Layout layout;
  const json& l = j.at("layout");
  layout.keys_per_type = l.at("keys_per_type").get<int>();
  layout.entities_per_type = l.at("entities_per_type").get<int>();
  layout.n_themes = l.at("n_themes").get<int>();
  layout.n_fillers = l.at("n_fillers").get<int>();
  layout.n_stops = l.at("n_stops").get<int>();
  Vocabulary v(layout);
  if (j.contains("tokens")) {
    const auto& toks = j.at("tokens");
    if (static_cast<int>(toks.size()) != v.size())
      throw std::runtime_error("vocab.json: token table size mismatch");
    for (int i = 0; i < v.size(); ++i)
      if (toks[static_cast<std::size_t>(i)].get<std::string>() != v.token(i))
        throw std::runtime_error("vocab.json: token table mismatch at id " +
                                 std::to_string(i));
  }
  return v;
}

void save_vocab(const Vocabulary& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << vocab_to_json(v);
}

Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return vocab_from_json(ss.str());
}

// ===== dataset serialization =====

namespace {

json instance_to_json(const McqaInstance& m) {
  return json{{"answer", m.answer},
              {"options", m.options},
              {"passage", m.passage},
              {"passage_id", m.passage_id},
              {"provenance", m.provenance},
              {"question", m.question},
              {"shortcut_flag", m.shortcut_flag}};
}

[[noreturn]] void line_error(std::size_t line_no, const std::string& what) {
  throw std::runtime_error("jsonl line " + std::to_string(line_no) + ": " + what);
}

template <typename T>
T require_field(const json& j, const char* field, std::size_t line_no) {
  if (!j.contains(field)) line_error(line_no, std::string("missing field '") + field + "'");
  try {
    return j.at(field).get<T>();
  } catch (const json::exception&) {
    line_error(line_no, std::string("bad type for field '") + field + "'");
  }
}

}  // namespace

std::string dataset_to_jsonl(const Dataset& d) {
  std::string out;
  json header{{"beta", d.meta.beta},
              {"generator", d.meta.generator},
              {"k", d.meta.k},
              {"schema_version", d.meta.schema_version},
              {"seed", d.meta.seed},
              {"tool_version", d.meta.tool_version},
              {"vocab_size", d.meta.vocab_size}};
  out += header.dump();
  out += '\n';
  for (const auto& m : d.instances) {
    out += instance_to_json(m).dump();
    out += '\n';
  }
  return out;
}

Dataset dataset_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  Dataset d;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      line_error(line_no, std::string("parse error: ") + e.what());
    }
    if (!have_header) {
      d.meta.schema_version = require_field<int>(j, "schema_version", line_no);
      if (d.meta.schema_version != kSchemaVersion)
        line_error(line_no, "unsupported schema_version");
      d.meta.vocab_size = require_field<int>(j, "vocab_size", line_no);
      d.meta.k = require_field<int>(j, "k", line_no);
      d.meta.beta = require_field<double>(j, "beta", line_no);
      d.meta.seed = require_field<std::uint64_t>(j, "seed", line_no);
      d.meta.generator = require_field<std::string>(j, "generator", line_no);
      d.meta.tool_version = require_field<std::string>(j, "tool_version", line_no);
      have_header = true;
      continue;
    }
    McqaInstance m;
    m.passage_id = require_field<int>(j, "passage_id", line_no);
    m.passage = require_field<TokenSeq>(j, "passage", line_no);
    m.question = require_field<TokenSeq>(j, "question", line_no);
    m.options = require_field<std::vector<TokenSeq>>(j, "options", line_no);
    m.answer = require_field<int>(j, "answer", line_no);
    m.shortcut_flag = require_field<bool>(j, "shortcut_flag", line_no);
    m.provenance = require_field<std::string>(j, "provenance", line_no);
    if (static_cast<int>(m.options.size()) != d.meta.k)
      line_error(line_no, "field 'options': expected " + std::to_string(d.meta.k) +
                              " options");
    if (m.answer < 0 || m.answer >= d.meta.k)
      line_error(line_no, "field 'answer': out of range");
    auto check_ids = [&](const TokenSeq& s, const char* field) {
      for (int id : s)
        if (id < 0 || id >= d.meta.vocab_size)
          line_error(line_no, std::string("field '") + field + "': token id out of range");
    };
    check_ids(m.passage, "passage");
    check_ids(m.question, "question");
    for (const auto& o : m.options) check_ids(o, "options");
    d.instances.push_back(std::move(m));
  }
  if (!have_header) throw std::runtime_error("jsonl: empty file (missing header line)");
  return d;
}

void save_jsonl(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << dataset_to_jsonl(d);
}

Dataset load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return dataset_from_jsonl(ss.str());
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ===== muting =====

McqaInstance mute(const McqaInstance& inst, const VariableView& view) {
  if (!view.options)
    throw std::invalid_argument("mute: views hiding the options are rejected");
  McqaInstance out = inst;
  if (!view.passage)
    std::fill(out.passage.begin(), out.passage.end(), Vocabulary::null_id());
  if (!view.question)
    std::fill(out.question.begin(), out.question.end(), Vocabulary::null_id());
  return out;
}

// ===== lexical overlap =====

int overlap_score(const TokenSeq& passage, const TokenSeq& option,
                  const Vocabulary& v) {
  std::vector<int> seen;
  int score = 0;
  for (int id : option) {
    if (id == Vocabulary::null_id() || id == Vocabulary::unk_id() || v.is_stop(id))
      continue;
    if (std::find(seen.begin(), seen.end(), id) != seen.end()) continue;
    seen.push_back(id);
    if (std::find(passage.begin(), passage.end(), id) != passage.end()) ++score;
  }
  return score;
}

std::vector<int> overlap_profile(const McqaInstance& inst, const Vocabulary& v) {
  std::vector<int> prof;
  prof.reserve(inst.options.size());
  for (const auto& o : inst.options) prof.push_back(overlap_score(inst.passage, o, v));
  return prof;
}

int max_overlap_index(const McqaInstance& inst, const Vocabulary& v) {
  auto prof = overlap_profile(inst, v);
  int best = 0;
  bool strict = true;
  for (int i = 1; i < static_cast<int>(prof.size()); ++i) {
    if (prof[static_cast<std::size_t>(i)] > prof[static_cast<std::size_t>(best)]) {
      best = i;
      strict = true;
    } else if (prof[static_cast<std::size_t>(i)] == prof[static_cast<std::size_t>(best)]) {
      strict = false;
    }
  }
  return strict ? best : -1;
}

// ===== fact oracle =====

int fact_oracle(const McqaInstance& inst, const Vocabulary& v) {
  int key = -1;
  for (int id : inst.question) {
    if (!v.is_key(id)) continue;
    if (key != -1 && key != id) return -1;  // two different keys asked
    key = id;
  }
  if (key == -1) return -1;
  const int kg = v.key_type_of(key) * v.layout().keys_per_type +
                 (key - v.key_id(v.key_type_of(key), 0));
  int bound_entity = -1;
  for (int id : inst.passage) {
    if (!v.is_fact(id)) continue;
    auto [fact_kg, el] = v.decode_fact(id);
    if (fact_kg != kg) continue;
    const int ent = v.fact_entity_id(id);
    if (bound_entity != -1 && bound_entity != ent) return -1;  // conflicting binding
    bound_entity = ent;
  }
  if (bound_entity == -1) return -1;
  int found = -1;
  for (int i = 0; i < static_cast<int>(inst.options.size()); ++i) {
    const auto& o = inst.options[static_cast<std::size_t>(i)];
    if (std::find(o.begin(), o.end(), bound_entity) != o.end()) {
      if (found != -1) return -1;  // ambiguous
      found = i;
    }
  }
  return found;
}

// ===== corpus generation =====

int CorpusConfig::facts_per_passage() const { return std::max(k, questions_per_passage); }

void CorpusConfig::validate() const {
  if (k < 2) throw std::invalid_argument(bad("K must be at least 2"));
  if (questions_per_passage < 2)
    throw std::invalid_argument(bad("questions_per_passage must be at least 2 "
                                    "(each passage yields sibling questions)"));
  if (beta < 0.0 || beta > 1.0) throw std::invalid_argument(bad("beta must be in [0,1]"));
  if (entity_density < 0.0 || entity_density > 1.0)
    throw std::invalid_argument(bad("entity_density must be in [0,1]"));
  if (train_size <= 0 || dev_size <= 0 || test_size <= 0)
    throw std::invalid_argument(bad("split sizes must be positive"));
  const int m = facts_per_passage();
  if (m > vocab.keys_per_type)
    throw std::invalid_argument(bad("K/questions_per_passage larger than distinct "
                                    "facts per passage (keys_per_type too small)"));
  if (vocab.entities_per_type < m + 1)
    throw std::invalid_argument(bad("entities_per_type must exceed facts per passage "
                                    "(attack substitutions need spare entities)"));
  if (vocab.n_themes < k + 1)
    throw std::invalid_argument(bad("n_themes must exceed K (distinct option tails)"));
  if (theme_sentences < 1)
    throw std::invalid_argument(bad("theme_sentences must be positive "
                                    "(the overlap shortcut needs a passage mention)"));
  if (passage_len_min > passage_len_max)
    throw std::invalid_argument(bad("passage length range is empty"));
  // Mandatory sentences without / with a decorative entity mention.
  for (int base : {3 * m + 3 * theme_sentences, 3 * m + 3 * theme_sentences + 3}) {
    if (base > passage_len_max)
      throw std::invalid_argument(bad("passage_len_max too small for mandatory sentences"));
    int need = base;
    while (need < passage_len_min) need += 3;  // filler sentences are 3 tokens
    if (need > passage_len_max)
      throw std::invalid_argument(bad("passage length range unreachable "
                                      "(sentence granularity is 3 tokens)"));
  }
}

namespace {

enum class SplitKind { kInDistribution, kAnti };

// j distinct ints from [0, n) excluding `taboo`, order randomized.
std::vector<int> sample_distinct(rng::Xoshiro256& r, int n, int j,
                                 const std::vector<int>& taboo = {}) {
  std::vector<int> pool;
  pool.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    if (std::find(taboo.begin(), taboo.end(), i) == taboo.end()) pool.push_back(i);
  if (static_cast<int>(pool.size()) < j)
    throw std::logic_error("sample_distinct: pool exhausted");
  r.shuffle(pool);
  pool.resize(static_cast<std::size_t>(j));
  return pool;
}

std::vector<int> sibling_counts(int size, int qpp, int max_per_passage) {
  std::vector<int> counts;
  int remaining = size;
  while (remaining > 0) {
    int c = std::min(qpp, remaining);
    if (remaining - c == 1) {
      if (c + 1 <= max_per_passage && c + 1 <= remaining) {
        c += 1;  // absorb the lone sibling here
      } else if (c - 1 >= 2) {
        c -= 1;  // leave two for the last passage
      } else {
        throw std::invalid_argument(bad("split size would leave a lone sibling "
                                        "question; adjust sizes or questions_per_passage"));
      }
    }
    counts.push_back(c);
    remaining -= c;
  }
  return counts;
}

struct PassageDraft {
  TokenSeq tokens;
  int type = 0;
  int theme = 0;                  // theme local index
  std::vector<int> key_locals;    // bound keys (local in type)
  std::vector<int> ent_locals;    // entity bound to key_locals[i]
};

PassageDraft build_passage(rng::Xoshiro256& r, const CorpusConfig& cfg,
                           const Vocabulary& v) {
  const auto& lay = cfg.vocab;
  PassageDraft p;
  p.type = static_cast<int>(r.below(kNumEntityTypes));
  const int m = cfg.facts_per_passage();
  p.key_locals = sample_distinct(r, lay.keys_per_type, m);
  p.ent_locals = sample_distinct(r, lay.entities_per_type, m);
  p.theme = static_cast<int>(r.below(lay.n_themes));

  std::vector<TokenSeq> sentences;
  for (int i = 0; i < m; ++i) {
    const int kg = v.key_global(p.type, p.key_locals[static_cast<std::size_t>(i)]);
    sentences.push_back({v.key_id(p.type, p.key_locals[static_cast<std::size_t>(i)]),
                         v.fact_id(kg, p.ent_locals[static_cast<std::size_t>(i)]),
                         v.period_id()});
  }
  for (int i = 0; i < cfg.theme_sentences; ++i)
    sentences.push_back({v.theme_id(p.theme),
                         v.filler_id(static_cast<int>(r.below(lay.n_fillers))),
                         v.period_id()});
  if (r.bernoulli(cfg.entity_density)) {
    // Decorative entity mention; never one of this passage's bound entities,
    // so overlap invariants against the options stay intact.
    for (;;) {
      const int t = static_cast<int>(r.below(kNumEntityTypes));
      const int l = static_cast<int>(r.below(lay.entities_per_type));
      if (t == p.type &&
          std::find(p.ent_locals.begin(), p.ent_locals.end(), l) != p.ent_locals.end())
        continue;
      sentences.push_back({v.entity_id(t, l),
                           v.filler_id(static_cast<int>(r.below(lay.n_fillers))),
                           v.period_id()});
      break;
    }
  }
  int total = 0;
  for (const auto& s : sentences) total += static_cast<int>(s.size());
  while (total < cfg.passage_len_min && total + 3 <= cfg.passage_len_max) {
    sentences.push_back({v.filler_id(static_cast<int>(r.below(lay.n_fillers))),
                         v.filler_id(static_cast<int>(r.below(lay.n_fillers))),
                         v.period_id()});
    total += 3;
  }
  r.shuffle(sentences);
  for (const auto& s : sentences) p.tokens.insert(p.tokens.end(), s.begin(), s.end());
  return p;
}

McqaInstance build_instance(rng::Xoshiro256& r, const CorpusConfig& cfg,
                            const Vocabulary& v, const PassageDraft& p,
                            int passage_id, int asked_slot, SplitKind kind) {
  const auto& lay = cfg.vocab;
  McqaInstance inst;
  inst.passage_id = passage_id;
  inst.passage = p.tokens;

  const int key_local = p.key_locals[static_cast<std::size_t>(asked_slot)];
  const int gold_ent_local = p.ent_locals[static_cast<std::size_t>(asked_slot)];

  inst.question = {v.qword_id(p.type)};
  if (r.bernoulli(0.5))
    inst.question.push_back(v.stop_id(static_cast<int>(r.below(lay.n_stops))));
  inst.question.push_back(v.key_id(p.type, key_local));
  inst.question.push_back(v.qmark_id());

  // Options: the gold entity plus K-1 other entities bound in this passage.
  std::vector<int> slots(static_cast<std::size_t>(cfg.k), -1);
  std::vector<int> other_slots;
  for (int i = 0; i < static_cast<int>(p.ent_locals.size()); ++i)
    if (i != asked_slot) other_slots.push_back(i);
  r.shuffle(other_slots);
  std::vector<int> ent_choices = {gold_ent_local};
  for (int i = 0; i < cfg.k - 1; ++i)
    ent_choices.push_back(p.ent_locals[static_cast<std::size_t>(other_slots[static_cast<std::size_t>(i)])]);
  std::vector<int> order(static_cast<std::size_t>(cfg.k));
  for (int i = 0; i < cfg.k; ++i) order[static_cast<std::size_t>(i)] = i;
  r.shuffle(order);
  inst.answer = static_cast<int>(
      std::find(order.begin(), order.end(), 0) - order.begin());

  switch (kind) {
    case SplitKind::kInDistribution:
      inst.shortcut_flag = r.bernoulli(cfg.beta);
      break;
    case SplitKind::kAnti:
      inst.shortcut_flag = false;
      break;
  }

  // Tail themes: on shortcut instances the gold option echoes the passage
  // theme; on anti instances a random wrong option does; otherwise nobody.
  // Unflagged in-distribution instances stay echo-free so that a β=0 corpus
  // carries no passage↔option cue at all (not even an avoid-the-echo one).
  std::vector<int> tails(static_cast<std::size_t>(cfg.k), -1);
  int echo_slot = -1;
  if (kind == SplitKind::kAnti) {
    int w = static_cast<int>(r.below(static_cast<std::uint64_t>(cfg.k - 1)));
    echo_slot = w >= inst.answer ? w + 1 : w;
  } else if (inst.shortcut_flag) {
    echo_slot = inst.answer;
  }
  auto non_theme = sample_distinct(r, lay.n_themes, cfg.k, {p.theme});
  for (int i = 0; i < cfg.k; ++i)
    tails[static_cast<std::size_t>(i)] =
        (i == echo_slot) ? p.theme : non_theme[static_cast<std::size_t>(i)];

  for (int i = 0; i < cfg.k; ++i) {
    TokenSeq opt;
    if (r.bernoulli(0.5))
      opt.push_back(v.stop_id(static_cast<int>(r.below(lay.n_stops))));
    const int choice = order[static_cast<std::size_t>(i)];
    opt.push_back(v.entity_id(p.type, ent_choices[static_cast<std::size_t>(choice)]));
    opt.push_back(v.theme_id(tails[static_cast<std::size_t>(i)]));
    inst.options.push_back(std::move(opt));
  }
  return inst;
}

Dataset make_split(const CorpusConfig& cfg, const Vocabulary& v, SplitKind kind,
                   int size, std::uint64_t split_seed, int* next_passage_id) {
  Dataset d;
  d.meta.vocab_size = v.size();
  d.meta.k = cfg.k;
  d.meta.beta = kind == SplitKind::kAnti ? 0.0 : cfg.beta;
  d.meta.seed = cfg.seed;
  d.meta.generator = rng::kGeneratorName;
  const auto counts =
      sibling_counts(size, cfg.questions_per_passage, cfg.facts_per_passage());
  for (std::size_t pi = 0; pi < counts.size(); ++pi) {
    rng::Xoshiro256 r(rng::derive_seed(split_seed, "passage:" + std::to_string(pi)));
    PassageDraft p = build_passage(r, cfg, v);
    const int pid = (*next_passage_id)++;
    auto asked = sample_distinct(r, static_cast<int>(p.key_locals.size()),
                                 counts[pi]);
    for (int s = 0; s < counts[pi]; ++s)
      d.instances.push_back(build_instance(r, cfg, v, p, pid,
                                           asked[static_cast<std::size_t>(s)], kind));
  }
  return d;
}

}  // namespace

CorpusBundle generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  CorpusBundle b;
  b.vocab = Vocabulary(cfg.vocab);
  const std::uint64_t base = rng::derive_seed(cfg.seed, "corpus");
  int next_passage_id = 0;
  b.train = make_split(cfg, b.vocab, SplitKind::kInDistribution, cfg.train_size,
                       rng::derive_seed(base, "train"), &next_passage_id);
  b.dev = make_split(cfg, b.vocab, SplitKind::kInDistribution, cfg.dev_size,
                     rng::derive_seed(base, "dev"), &next_passage_id);
  b.test_in = make_split(cfg, b.vocab, SplitKind::kInDistribution, cfg.test_size,
                         rng::derive_seed(base, "test_in"), &next_passage_id);
  b.test_anti = make_split(cfg, b.vocab, SplitKind::kAnti, cfg.test_size,
                           rng::derive_seed(base, "test_anti"), &next_passage_id);
  return b;
}

// ===== re-partitioning =====

std::vector<Dataset> split(const Dataset& d, const std::vector<double>& ratios,
                           std::uint64_t seed) {
  if (ratios.empty()) throw std::invalid_argument("split: no ratios given");
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw std::invalid_argument("split: negative ratio");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split: ratios must sum to 1");

  // Group instance indices by passage_id in first-appearance order.
  std::vector<int> group_pid;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < d.instances.size(); ++i) {
    const int pid = d.instances[i].passage_id;
    auto it = std::find(group_pid.begin(), group_pid.end(), pid);
    if (it == group_pid.end()) {
      group_pid.push_back(pid);
      groups.push_back({i});
    } else {
      groups[static_cast<std::size_t>(it - group_pid.begin())].push_back(i);
    }
  }
  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Xoshiro256 r(seed);
  r.shuffle(order);

  const double total = static_cast<double>(d.instances.size());
  std::vector<double> target(ratios.size());
  std::vector<double> assigned(ratios.size(), 0.0);
  for (std::size_t p = 0; p < ratios.size(); ++p) target[p] = ratios[p] * total;
  std::vector<std::vector<std::size_t>> member(ratios.size());
  for (std::size_t gi : order) {
    std::size_t best = 0;
    for (std::size_t p = 1; p < ratios.size(); ++p)
      if (target[p] - assigned[p] > target[best] - assigned[best]) best = p;
    for (std::size_t idx : groups[gi]) member[best].push_back(idx);
    assigned[best] += static_cast<double>(groups[gi].size());
  }
  std::vector<Dataset> out(ratios.size());
  for (std::size_t p = 0; p < ratios.size(); ++p) {
    out[p].meta = d.meta;
    std::sort(member[p].begin(), member[p].end());
    for (std::size_t idx : member[p]) out[p].instances.push_back(d.instances[idx]);
  }
  return out;
}

Dataset merge(const std::vector<Dataset>& parts) {
  if (parts.empty()) throw std::invalid_argument("merge: no datasets given");
  Dataset out;
  out.meta = parts[0].meta;
  for (const auto& p : parts) {
    if (p.meta.vocab_size != out.meta.vocab_size || p.meta.k != out.meta.k)
      throw std::invalid_argument("merge: incompatible dataset metadata");
    out.instances.insert(out.instances.end(), p.instances.begin(), p.instances.end());
  }
  return out;
}

}  // namespace cvcqa::data

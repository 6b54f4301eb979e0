#include "cvcqa/attacks.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "cvcqa/rng.hpp"
#include "json.hpp"

namespace cvcqa::attacks {

using data::Dataset;
using data::McqaInstance;
using data::TokenSeq;
using data::Vocabulary;
using nlohmann::json;

const AttackKind kAllAttacks[kNumAttackKinds] = {
    AttackKind::kAdd1Truth2Opt, AttackKind::kAdd2Truth2Opt, AttackKind::kAdd1Pas2Opt,
    AttackKind::kAdd1Ent2Pas};

AttackKind attack_from_name(const std::string& name) {
  if (name == "adv1") return AttackKind::kAdd1Truth2Opt;
  if (name == "adv2") return AttackKind::kAdd2Truth2Opt;
  if (name == "adv3") return AttackKind::kAdd1Pas2Opt;
  if (name == "adv4") return AttackKind::kAdd1Ent2Pas;
  throw std::invalid_argument("unknown attack '" + name + "' (expected adv1..adv4)");
}

std::string attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::kAdd1Truth2Opt: return "adv1";
    case AttackKind::kAdd2Truth2Opt: return "adv2";
    case AttackKind::kAdd1Pas2Opt: return "adv3";
    case AttackKind::kAdd1Ent2Pas: return "adv4";
  }
  return "?";
}

std::string attack_label(AttackKind kind) {
  switch (kind) {
    case AttackKind::kAdd1Truth2Opt: return "copy one sibling gold over a wrong option";
    case AttackKind::kAdd2Truth2Opt: return "copy two sibling golds over two wrong options";
    case AttackKind::kAdd1Pas2Opt: return "copy a passage sentence over a wrong option";
    case AttackKind::kAdd1Ent2Pas:
      return "append an entity-substituted wrong option to the passage";
  }
  return "?";
}

namespace {

int first_entity(const TokenSeq& s, const Vocabulary& v) {
  for (int id : s)
    if (v.is_entity(id)) return id;
  return -1;
}

std::vector<int> wrong_slots(const McqaInstance& inst) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(inst.options.size()); ++i)
    if (i != inst.answer) out.push_back(i);
  return out;
}

/// True when `text` equals any option other than the slots being replaced.
bool clashes_with_kept(const McqaInstance& inst, const std::vector<int>& replaced,
                       const TokenSeq& text) {
  for (int i = 0; i < static_cast<int>(inst.options.size()); ++i) {
    if (std::find(replaced.begin(), replaced.end(), i) != replaced.end()) continue;
    if (inst.options[static_cast<std::size_t>(i)] == text) return true;
  }
  return false;
}

std::vector<TokenSeq> split_sentences(const TokenSeq& passage, int period) {
  std::vector<TokenSeq> out;
  TokenSeq cur;
  for (int id : passage) {
    if (id == period) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(id);
    }
  }
  if (!cur.empty()) out.push_back(cur);  // unterminated trailing run
  return out;
}

std::set<int> content_ids(const TokenSeq& s, const Vocabulary& v) {
  std::set<int> out;
  for (int id : s) {
    if (id == Vocabulary::null_id() || id == Vocabulary::unk_id()) continue;
    if (v.is_stop(id)) continue;  // covers punctuation as well
    out.insert(id);
  }
  return out;
}

const TokenSeq& gold_text(const Dataset& d, int index) {
  const auto& inst = d.instances[static_cast<std::size_t>(index)];
  return inst.options[static_cast<std::size_t>(inst.answer)];
}

bool sentence_admissible(const TokenSeq& s, const std::set<int>& gold_content,
                         int gold_entity, const Vocabulary& v) {
  for (int id : s) {
    if (gold_content.count(id)) return false;
    if (v.is_fact(id) && v.fact_entity_id(id) == gold_entity) return false;
  }
  return true;
}

// --- the four rewrites; each returns "" on success or a skip reason ---

std::string add1truth(McqaInstance& inst, AttackRecord& rec, const Dataset& input,
                      const std::vector<int>& siblings, const Vocabulary& v,
                      rng::Xoshiro256& r) {
  if (siblings.empty()) return "no_siblings";
  const int gold_entity = first_entity(inst.options[static_cast<std::size_t>(inst.answer)], v);
  std::vector<int> slots = wrong_slots(inst);
  r.shuffle(slots);
  for (int slot : slots) {
    std::vector<const TokenSeq*> cands;
    for (int j : siblings) {
      const TokenSeq& text = gold_text(input, j);
      if (first_entity(text, v) == gold_entity) continue;  // would shadow the gold
      if (text == inst.options[static_cast<std::size_t>(slot)]) continue;  // silent no-op
      if (clashes_with_kept(inst, {slot}, text)) continue;
      cands.push_back(&text);
    }
    if (cands.empty()) continue;
    inst.options[static_cast<std::size_t>(slot)] =
        *cands[static_cast<std::size_t>(r.below(cands.size()))];
    rec.touched = {slot};
    return "";
  }
  return "no_admissible_sibling";
}

std::string add2truth(McqaInstance& inst, AttackRecord& rec, const Dataset& input,
                      const std::vector<int>& siblings, const Vocabulary& v,
                      rng::Xoshiro256& r) {
  std::vector<int> slots = wrong_slots(inst);
  if (slots.size() < 2) return "not_enough_wrong_slots";
  if (siblings.size() < 2) return "not_enough_siblings";
  const int gold_entity = first_entity(inst.options[static_cast<std::size_t>(inst.answer)], v);
  r.shuffle(slots);
  const std::vector<int> replaced = {slots[0], slots[1]};
  std::vector<std::pair<int, int>> pairs;
  for (int a : siblings)
    for (int b : siblings)
      if (a != b) pairs.emplace_back(a, b);
  r.shuffle(pairs);
  for (const auto& [a, b] : pairs) {
    const TokenSeq& ta = gold_text(input, a);
    const TokenSeq& tb = gold_text(input, b);
    if (ta == tb) continue;
    if (first_entity(ta, v) == gold_entity || first_entity(tb, v) == gold_entity) continue;
    if (ta == inst.options[static_cast<std::size_t>(replaced[0])] ||
        tb == inst.options[static_cast<std::size_t>(replaced[1])])
      continue;  // silent no-op in one of the two slots
    if (clashes_with_kept(inst, replaced, ta) || clashes_with_kept(inst, replaced, tb))
      continue;
    inst.options[static_cast<std::size_t>(replaced[0])] = ta;
    inst.options[static_cast<std::size_t>(replaced[1])] = tb;
    rec.touched = {std::min(replaced[0], replaced[1]), std::max(replaced[0], replaced[1])};
    return "";
  }
  return "no_admissible_sibling_pair";
}

std::string add1pas(McqaInstance& inst, AttackRecord& rec, const Vocabulary& v,
                    rng::Xoshiro256& r) {
  const auto sentences = split_sentences(inst.passage, v.period_id());
  const auto& gold = inst.options[static_cast<std::size_t>(inst.answer)];
  const auto gold_content = content_ids(gold, v);
  const int gold_entity = first_entity(gold, v);
  std::vector<const TokenSeq*> base;
  for (const auto& s : sentences)
    if (sentence_admissible(s, gold_content, gold_entity, v)) base.push_back(&s);
  if (base.empty()) return "no_admissible_sentence";
  std::vector<int> slots = wrong_slots(inst);
  r.shuffle(slots);
  for (int slot : slots) {
    std::vector<const TokenSeq*> cands;
    for (const TokenSeq* s : base)
      if (*s != inst.options[static_cast<std::size_t>(slot)] &&
          !clashes_with_kept(inst, {slot}, *s))
        cands.push_back(s);
    if (cands.empty()) continue;
    inst.options[static_cast<std::size_t>(slot)] =
        *cands[static_cast<std::size_t>(r.below(cands.size()))];
    rec.touched = {slot};
    return "";
  }
  return "no_admissible_sentence";
}

std::string add1ent(McqaInstance& inst, AttackRecord& rec, const Vocabulary& v,
                    rng::Xoshiro256& r) {
  std::vector<int> slots;
  for (int slot : wrong_slots(inst))
    if (first_entity(inst.options[static_cast<std::size_t>(slot)], v) != -1)
      slots.push_back(slot);
  if (slots.empty()) return "no_entity_in_wrong_options";
  r.shuffle(slots);

  // Substitutes must not collide with any option entity (the label must stay
  // derivable) nor with any entity the passage binds to a key.
  std::set<int> excluded;
  for (const auto& o : inst.options)
    for (int id : o)
      if (v.is_entity(id)) excluded.insert(id);
  for (int id : inst.passage)
    if (v.is_fact(id)) excluded.insert(v.fact_entity_id(id));

  for (int slot : slots) {
    TokenSeq copy = inst.options[static_cast<std::size_t>(slot)];
    std::set<int> used = excluded;
    bool ok = true;
    for (int& id : copy) {
      if (!v.is_entity(id)) continue;
      const auto [lo, hi] = v.entity_range(v.entity_type_of(id));
      std::vector<int> cands;
      for (int e = lo; e < hi; ++e)
        if (!used.count(e)) cands.push_back(e);
      if (cands.empty()) {
        ok = false;
        break;
      }
      id = cands[static_cast<std::size_t>(r.below(cands.size()))];
      used.insert(id);
    }
    if (!ok) continue;
    inst.passage.insert(inst.passage.end(), copy.begin(), copy.end());
    inst.passage.push_back(v.period_id());
    rec.touched = {slot};
    return "";
  }
  return "no_substitute_entity";
}

std::unordered_map<int, std::vector<int>> group_by_passage(const Dataset& d) {
  std::unordered_map<int, std::vector<int>> groups;
  for (std::size_t i = 0; i < d.instances.size(); ++i)
    groups[d.instances[i].passage_id].push_back(static_cast<int>(i));
  return groups;
}

}  // namespace

AttackOutcome apply_attack(const Dataset& input, const Vocabulary& vocab,
                           AttackKind kind, std::uint64_t seed) {
  AttackOutcome out;
  out.dataset.meta = input.meta;
  out.dataset.meta.seed = seed;
  out.report.attack = attack_name(kind);
  out.report.seed = seed;

  const auto groups = group_by_passage(input);
  const std::uint64_t stream = rng::derive_seed(seed, attack_name(kind));

  for (std::size_t i = 0; i < input.instances.size(); ++i) {
    const auto& src = input.instances[i];
    rng::Xoshiro256 r(rng::derive_seed(stream, "instance:" + std::to_string(i)));
    McqaInstance inst = src;
    AttackRecord rec;
    rec.index = static_cast<int>(i);

    std::vector<int> siblings;
    for (int j : groups.at(src.passage_id))
      if (j != static_cast<int>(i)) siblings.push_back(j);

    std::string reason;
    switch (kind) {
      case AttackKind::kAdd1Truth2Opt:
        reason = add1truth(inst, rec, input, siblings, vocab, r);
        break;
      case AttackKind::kAdd2Truth2Opt:
        reason = add2truth(inst, rec, input, siblings, vocab, r);
        break;
      case AttackKind::kAdd1Pas2Opt:
        reason = add1pas(inst, rec, vocab, r);
        break;
      case AttackKind::kAdd1Ent2Pas:
        reason = add1ent(inst, rec, vocab, r);
        break;
    }

    if (reason.empty()) {
      inst.provenance = attack_name(kind);
      rec.modified = true;
      ++out.report.modified;
    } else {
      rec.skip_reason = reason;
      ++out.report.skipped[reason];
    }
    ++out.report.emitted;
    out.dataset.instances.push_back(std::move(inst));
    out.report.records.push_back(std::move(rec));
  }
  return out;
}

std::string report_to_json(const AttackReport& r) {
  json skipped = json::object();
  for (const auto& [reason, count] : r.skipped) skipped[reason] = count;
  json records = json::array();
  for (const auto& rec : r.records)
    records.push_back(json{{"index", rec.index},
                           {"modified", rec.modified},
                           {"skip_reason", rec.skip_reason},
                           {"touched", rec.touched}});
  json j{{"attack", r.attack},
         {"counts", json{{"emitted", r.emitted}, {"modified", r.modified},
                         {"skipped", skipped}}},
         {"records", records},
         {"seed", r.seed}};
  return j.dump() + "\n";
}

void save_report(const AttackReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << report_to_json(r);
}

std::vector<std::string> scan_attack(const Dataset& original, const Dataset& attacked,
                                     const Vocabulary& vocab, AttackKind kind) {
  std::vector<std::string> bad;
  auto flag = [&bad](std::size_t i, const std::string& msg) {
    bad.push_back("instance " + std::to_string(i) + ": " + msg);
  };
  if (original.instances.size() != attacked.instances.size()) {
    bad.push_back("instance counts differ");
    return bad;
  }
  const std::string name = attack_name(kind);
  const auto groups = group_by_passage(original);

  for (std::size_t i = 0; i < original.instances.size(); ++i) {
    const auto& a = original.instances[i];
    const auto& b = attacked.instances[i];

    if (b.answer != a.answer) {
      flag(i, "answer index changed");
      continue;
    }
    if (b.options.size() != a.options.size()) {
      flag(i, "option count changed");
      continue;
    }
    if (b.question != a.question) flag(i, "question changed");
    if (b.passage_id != a.passage_id) flag(i, "passage group changed");
    if (b.shortcut_flag != a.shortcut_flag) flag(i, "shortcut flag changed");
    if (b.options[static_cast<std::size_t>(b.answer)] !=
        a.options[static_cast<std::size_t>(a.answer)])
      flag(i, "gold option text changed");
    for (std::size_t p = 0; p < b.options.size(); ++p)
      for (std::size_t q = p + 1; q < b.options.size(); ++q)
        if (b.options[p] == b.options[q])
          flag(i, "duplicate option texts (" + std::to_string(p) + "," +
                      std::to_string(q) + ")");

    if (b.provenance == a.provenance) {
      if (b.passage != a.passage || b.options != a.options)
        flag(i, "instance drifted without attack provenance");
    } else if (b.provenance != name) {
      flag(i, "unexpected provenance '" + b.provenance + "'");
    } else {
      std::vector<int> diff;
      for (std::size_t p = 0; p < b.options.size(); ++p)
        if (b.options[p] != a.options[p]) diff.push_back(static_cast<int>(p));
      const int gold_entity =
          first_entity(a.options[static_cast<std::size_t>(a.answer)], vocab);

      std::vector<const TokenSeq*> sibling_golds;
      for (int j : groups.at(a.passage_id))
        if (j != static_cast<int>(i)) sibling_golds.push_back(&gold_text(original, j));
      auto is_sibling_gold = [&sibling_golds](const TokenSeq& t) {
        for (const TokenSeq* g : sibling_golds)
          if (*g == t) return true;
        return false;
      };

      switch (kind) {
        case AttackKind::kAdd1Truth2Opt: {
          if (b.passage != a.passage) flag(i, "passage changed under adv1");
          if (diff.size() != 1) {
            flag(i, "adv1 must rewrite exactly one option");
            break;
          }
          const TokenSeq& text = b.options[static_cast<std::size_t>(diff[0])];
          if (diff[0] == a.answer) flag(i, "adv1 rewrote the gold slot");
          if (!is_sibling_gold(text)) flag(i, "adv1 text is not a sibling gold");
          if (first_entity(text, vocab) == gold_entity)
            flag(i, "adv1 text carries the gold entity");
          break;
        }
        case AttackKind::kAdd2Truth2Opt: {
          if (b.passage != a.passage) flag(i, "passage changed under adv2");
          if (diff.size() != 2) {
            flag(i, "adv2 must rewrite exactly two options");
            break;
          }
          for (int slot : diff) {
            const TokenSeq& text = b.options[static_cast<std::size_t>(slot)];
            if (slot == a.answer) flag(i, "adv2 rewrote the gold slot");
            if (!is_sibling_gold(text)) flag(i, "adv2 text is not a sibling gold");
            if (first_entity(text, vocab) == gold_entity)
              flag(i, "adv2 text carries the gold entity");
          }
          if (b.options[static_cast<std::size_t>(diff[0])] ==
              b.options[static_cast<std::size_t>(diff[1])])
            flag(i, "adv2 borrowed the same text twice");
          break;
        }
        case AttackKind::kAdd1Pas2Opt: {
          if (b.passage != a.passage) flag(i, "passage changed under adv3");
          if (diff.size() != 1) {
            flag(i, "adv3 must rewrite exactly one option");
            break;
          }
          const TokenSeq& text = b.options[static_cast<std::size_t>(diff[0])];
          if (diff[0] == a.answer) flag(i, "adv3 rewrote the gold slot");
          const auto sentences = split_sentences(a.passage, vocab.period_id());
          if (std::find(sentences.begin(), sentences.end(), text) == sentences.end())
            flag(i, "adv3 text is not a passage sentence");
          const auto gold_content =
              content_ids(a.options[static_cast<std::size_t>(a.answer)], vocab);
          if (!sentence_admissible(text, gold_content, gold_entity, vocab))
            flag(i, "adv3 text overlaps the gold option");
          break;
        }
        case AttackKind::kAdd1Ent2Pas: {
          if (b.options != a.options) flag(i, "options changed under adv4");
          if (b.passage.size() <= a.passage.size() ||
              !std::equal(a.passage.begin(), a.passage.end(), b.passage.begin())) {
            flag(i, "adv4 must append to the passage");
            break;
          }
          TokenSeq suffix(b.passage.begin() + static_cast<std::ptrdiff_t>(a.passage.size()),
                          b.passage.end());
          if (suffix.empty() || suffix.back() != vocab.period_id()) {
            flag(i, "adv4 appendix is not a sentence");
            break;
          }
          suffix.pop_back();
          std::set<int> excluded;
          for (const auto& o : a.options)
            for (int id : o)
              if (vocab.is_entity(id)) excluded.insert(id);
          for (int id : a.passage)
            if (vocab.is_fact(id)) excluded.insert(vocab.fact_entity_id(id));

          bool matched = false;
          for (std::size_t slot = 0; slot < a.options.size() && !matched; ++slot) {
            if (static_cast<int>(slot) == a.answer) continue;
            const TokenSeq& opt = a.options[slot];
            if (opt.size() != suffix.size()) continue;
            bool ok = true;
            int substitutions = 0;
            for (std::size_t p = 0; p < opt.size(); ++p) {
              if (vocab.is_entity(opt[p])) {
                if (!vocab.is_entity(suffix[p]) || suffix[p] == opt[p] ||
                    vocab.entity_type_of(suffix[p]) != vocab.entity_type_of(opt[p]) ||
                    excluded.count(suffix[p])) {
                  ok = false;
                  break;
                }
                ++substitutions;
              } else if (suffix[p] != opt[p]) {
                ok = false;
                break;
              }
            }
            matched = ok && substitutions > 0;
          }
          if (!matched) flag(i, "adv4 appendix is not a substituted wrong option");
          break;
        }
      }
    }

    if (data::fact_oracle(b, vocab) != b.answer)
      flag(i, "fact oracle no longer resolves to the answer");
  }
  return bad;
}

}  // namespace cvcqa::attacks

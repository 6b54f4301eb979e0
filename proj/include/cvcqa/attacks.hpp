#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cvcqa/data.hpp"

namespace cvcqa::attacks {

/// The four adversarial rewrites. All of them keep the gold option and the
/// answer index untouched, so attacked sets stay valid benchmarks:
///   adv1  copy one sibling question's gold option over a wrong option
///   adv2  copy two distinct sibling golds over two wrong options
///   adv3  copy a passage sentence (disjoint from the gold option's content
///         words) over a wrong option
///   adv4  append an entity-substituted copy of a wrong option to the passage
enum class AttackKind { kAdd1Truth2Opt, kAdd2Truth2Opt, kAdd1Pas2Opt, kAdd1Ent2Pas };

inline constexpr int kNumAttackKinds = 4;
extern const AttackKind kAllAttacks[kNumAttackKinds];

AttackKind attack_from_name(const std::string& name);  // "adv1" .. "adv4"
std::string attack_name(AttackKind kind);
std::string attack_label(AttackKind kind);  // human-readable summary

struct AttackRecord {
  int index = 0;
  bool modified = false;
  std::string skip_reason;   // empty when modified
  std::vector<int> touched;  // option slots rewritten (adv1-3) or copied (adv4)
};

struct AttackReport {
  std::string attack;
  std::uint64_t seed = 0;
  int emitted = 0;   // instances written out (pass-throughs included)
  int modified = 0;  // instances actually rewritten
  std::map<std::string, int> skipped;  // reason -> count
  std::vector<AttackRecord> records;
};

std::string report_to_json(const AttackReport& r);
void save_report(const AttackReport& r, const std::string& path);

struct AttackOutcome {
  data::Dataset dataset;
  AttackReport report;
};

/// Rewrite every instance the attack admits; inadmissible instances pass
/// through unchanged with a skip record. Deterministic in (input, seed).
AttackOutcome apply_attack(const data::Dataset& input, const data::Vocabulary& vocab,
                           AttackKind kind, std::uint64_t seed);

/// Invariant scan of an attacked dataset against its source: alignment, gold
/// option and answer untouched, kind-specific edit shape, and the fact oracle
/// still resolving every instance to the stored answer. Returns one message
/// per violation; empty means the attack kept every promise.
std::vector<std::string> scan_attack(const data::Dataset& original,
                                     const data::Dataset& attacked,
                                     const data::Vocabulary& vocab, AttackKind kind);

}  // namespace cvcqa::attacks

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cvcqa::bench {

/// Command-line overrides; empty strings mean "use the config file value".
struct Overrides {
  std::string out;
  bool has_seed = false;
  std::uint64_t seed = 0;
  std::string methods;  // comma list for eval
  std::string attacks;  // comma list for attack
  std::string augment;  // comma list of attacked train files
};

/// Bad verbs, flags, or config values — exit code 1 territory. Everything
/// else thrown by the verbs (missing files, bad data, divergence) is a
/// runtime failure — exit code 2.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Corpus generation: writes <out>/data/{vocab.json, train.jsonl, dev.jsonl,
/// test_in.jsonl, test_anti.jsonl}; a `betas` list in the config produces one
/// corpus subdirectory per value instead.
void gen_data(const std::string& config_path, const Overrides& ov);

/// Adversarial rewrites of one dataset: <out>/attacks/<stem>.<kind>.jsonl
/// plus a JSON report per kind.
void attack(const std::string& config_path, const Overrides& ov);

/// Trains the configured targets (ct, cvc, adaptor) for every replicate
/// seed; writes checkpoints and history CSVs under <out>/models. Optional
/// augmentation merges attacked train files into the training set.
void train(const std::string& config_path, const Overrides& ov);

/// Accuracy per (dataset x method) plus the mean gain over the ct baseline
/// across attacked sets; writes <out>/eval/{metrics.csv, summary.json,
/// report.md}.
void eval(const std::string& config_path, const Overrides& ov);

/// Accuracy of the ct model under the four visibility views; writes
/// <out>/eval/muting.csv.
void muting_study(const std::string& config_path, const Overrides& ov);

/// Collates everything found under a run directory into <dir>/report.md
/// with content hashes; regeneration is byte-identical.
void report(const std::string& run_dir);

}  // namespace cvcqa::bench

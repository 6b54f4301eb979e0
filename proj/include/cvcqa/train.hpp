#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cvcqa/data.hpp"
#include "cvcqa/diffmath.hpp"
#include "cvcqa/model.hpp"

namespace cvcqa::train {

using diffmath::Vec;

// ===== fusion and ensemble losses (probability-level reference surface) =====

/// Elementwise ensemble score: A_i = Σ_n p_r[i] · p_s[n][i]. Probabilities
/// multiply (not logits) and the result is deliberately not renormalized.
Vec fuse(const Vec& p_r, const std::vector<Vec>& p_s);

/// −log softmax(fuse(p_r, p_s))[gold].
double loss_e_probs(const Vec& p_r, const std::vector<Vec>& p_s, int gold);

/// Σ_n −log softmax(p_r ⊙ p_s[n])[gold]: per-branch fused terms.
double loss_e1_probs(const Vec& p_r, const std::vector<Vec>& p_s, int gold);

/// Like loss_e1 but each branch term scaled by w[n].
double loss_e2_probs(const Vec& p_r, const std::vector<Vec>& p_s, int gold,
                     const Vec& w);

/// w = softmax over current per-branch shortcut losses: branches that are
/// doing badly (high loss) get more weight in the e2 variant.
Vec branch_weights(const Vec& shortcut_losses);

// ===== training =====

struct TrainConfig {
  int epochs = 25;
  int batch_size = 32;
  double lr = 0.15;
  double robust_lr = -1.0;         // fused-step rate; < 0 means "use lr"
  std::string optimizer = "sgd";   // "sgd" | "adam"
  std::string loss_variant = "e";  // "e" | "e1" | "e2"
  bool detach_shortcut_in_fusion = true;
  std::uint64_t seed = 1;
  bool track_accuracy = true;  // per-epoch train/dev accuracy in the history

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double loss_all = 0.0;
  double loss_robust = 0.0;
  Vec loss_shortcut;  // one entry per shortcut branch
  Vec w_mean;         // mean branch weights over the epoch
  double train_acc = 0.0;
  double dev_acc = 0.0;
  int skipped_steps = 0;  // parameter updates skipped on non-finite gradients
};

using History = std::vector<EpochStats>;

std::string history_to_csv(const History& h, int n_shortcut);

/// Loss measurement on one batch without touching parameters; `total` always
/// equals `robust + Σ shortcut`.
struct LossBreakdown {
  double total = 0.0;
  double robust = 0.0;
  Vec shortcut;
  Vec weights;
};

LossBreakdown compute_losses(const model::Model& m,
                             const std::vector<const data::McqaInstance*>& batch,
                             const std::string& loss_variant,
                             bool detach_shortcut);

/// Fraction of instances whose branch-argmax matches the gold option.
double branch_accuracy(const model::Model& m, const data::Dataset& d, int branch);

/// Two-step alternating loop per batch: shortcut heads first (encoder output
/// held constant), then embeddings + shared stack + robust head on the fused
/// loss. Mutates `m` in place; throws on non-finite loss so the caller can
/// save a diagnostic checkpoint.
History train_cvc(model::Model& m, const data::Dataset& train_set,
                  const data::Dataset& dev_set, const TrainConfig& cfg);

/// Plain cross-entropy baseline for a single-branch model.
History train_ct(model::Model& m, const data::Dataset& train_set,
                 const data::Dataset& dev_set, const TrainConfig& cfg);

}  // namespace cvcqa::train

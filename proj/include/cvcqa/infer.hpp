#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cvcqa/data.hpp"
#include "cvcqa/diffmath.hpp"
#include "cvcqa/model.hpp"

namespace cvcqa::infer {

using diffmath::Mat;
using diffmath::Vec;

// ===== score rules (probability-level reference surface) =====

/// Keep-path minus residual-path with both shortcut terms replaced by
/// constants: scores_i = Σ_n p_r[i]·c_s[n] − Σ_n c_r[n]·c_s[n]. The second
/// term is option-independent, so the argmax always equals argmax(p_r).
Vec cvc_iv_scores(const Vec& p_r, const std::vector<double>& c_s,
                  const std::vector<double>& c_r);

/// Keep the live shortcut output, subtract a calibrated robust reference:
/// scores_i = Σ_n (p_r[i] − c_r[n][i]) · p_s[n][i].
Vec cvc_mv_scores(const Vec& p_r, const std::vector<Vec>& p_s,
                  const std::vector<Vec>& c_r);

// ===== the c-adaptor =====

struct CAdaptorConfig {
  int hidden = 16;
  bool include_probs = true;     // feed [p_r ; p_s] into the adaptor
  bool include_distance = true;  // feed JS(p_r ‖ p_s) as an extra input
  bool scalar_output = false;    // one squashed scalar broadcast across options

  int input_dim(int k) const;
  void validate() const;
};

/// Per-branch two-layer net W2·tanh(W1·x + b1) + b2 with a logistic squash,
/// so each produced reference lands in (0,1). All-zero parameters squash to
/// exactly 0.5 everywhere.
struct CAdaptor {
  CAdaptorConfig cfg;
  int k = 0;
  struct Net {
    Mat W1, b1, W2, b2;
  };
  std::vector<Net> nets;  // one per shortcut branch
};

CAdaptor init_adaptor(const CAdaptorConfig& cfg, int k, int n_shortcut,
                      std::uint64_t seed);

/// c vector (length K) for shortcut branch n given the frozen model's output
/// distributions on one instance.
Vec adaptor_c(const CAdaptor& a, int n, const Vec& p_r, const Vec& p_s);

std::vector<diffmath::ParamRef> adaptor_params(CAdaptor& a);
std::string adaptor_to_json(const CAdaptor& a);
CAdaptor adaptor_from_json(const std::string& text);
void save_adaptor(const CAdaptor& a, const std::string& path);
CAdaptor load_adaptor(const std::string& path);

struct AdaptorTrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr = 0.1;
  std::uint64_t seed = 7;
};

/// Trains only the adaptor parameters against the cross-entropy of the
/// mediated scores; the model is frozen (taken by const reference, its
/// branch outputs precomputed once). Returns per-epoch mean losses.
std::vector<double> train_c_adaptor(const model::Model& m, CAdaptor& a,
                                    const data::Dataset& train_set,
                                    const AdaptorTrainConfig& cfg);

// ===== inference methods =====

struct InferenceSpec {
  enum class Kind { kCt, kNp, kCvcIv, kCvcMv };
  enum class CSource { kConstant, kAdaptor, kJs, kEuc };

  Kind kind = Kind::kCt;
  CSource c_source = CSource::kConstant;
  double c_r = 0.5;  // robust-reference constant (CVC-MV) — grid-tunable
  double c_s = 0.5;  // shortcut placeholder constant (CVC-IV)
  const CAdaptor* adaptor = nullptr;

  /// Parse CLI names: ct, np, cvc-iv, cvc-mv, cvc-mv-adaptor, cvc-mv-js,
  /// cvc-mv-euc. Throws on unknown names.
  static InferenceSpec from_name(const std::string& name);
  std::string name() const;
};

/// Fused ensemble prediction scores (the training-time combination).
Vec predict_np(const model::Model& m, const data::McqaInstance& inst);

/// Branch outputs under the all-muted probe, robust branch first.
std::vector<model::BranchOutput> predict_all_muted(const model::Model& m,
                                                   const data::McqaInstance& inst);

/// Scores for one instance under the given method; prediction is the argmax
/// (ties resolve to the lowest index). Validates method/model compatibility.
Vec method_scores(const model::Model& m, const InferenceSpec& spec,
                  const data::McqaInstance& inst);

// ===== evaluation =====

struct EvalRecord {
  int index = 0;
  Vec scores;
  int pred = 0;
  int gold = 0;
  bool shortcut_flag = false;
  std::string provenance;
};

struct EvalResult {
  double accuracy = 0.0;
  double acc_shortcut_true = 0.0;   // slice with shortcut_flag == true
  double acc_shortcut_false = 0.0;  // slice with shortcut_flag == false
  int n = 0, n_true = 0, n_false = 0;
  std::vector<EvalRecord> records;
};

EvalResult evaluate(const model::Model& m, const InferenceSpec& spec,
                    const data::Dataset& d);

std::string records_to_jsonl(const std::string& dataset_name,
                             const std::string& method_name,
                             const std::vector<EvalRecord>& records);

/// Pick the mediator constant maximizing dev accuracy over a grid
/// (first best wins on ties).
double tune_mv_constant(const model::Model& m, const data::Dataset& dev,
                        const std::vector<double>& grid);

inline const std::vector<double>& default_mv_grid() {
  static const std::vector<double> g = {0.2, 0.4, 0.6, 0.8, 1.0};
  return g;
}

}  // namespace cvcqa::infer

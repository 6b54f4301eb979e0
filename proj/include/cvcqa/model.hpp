#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cvcqa/data.hpp"
#include "cvcqa/diffmath.hpp"

namespace cvcqa::model {

using diffmath::Mat;
using diffmath::Vec;

struct ModelConfig {
  int d = 32;           // embedding width
  int layers = 6;       // total affine+tanh layers (shared + per-branch top)
  int layers_shared = -1;  // -1 → round(5/6 · layers)
  int hidden = 64;
  int k = 4;            // options scored per instance
  int vocab_size = 0;   // set from the corpus vocabulary
  /// One view per shortcut branch; branch 0 (robust) always sees everything.
  std::vector<data::VariableView> shortcut_views = {data::VariableView::no_q()};

  int resolved_layers_shared() const;
  int n_shortcut() const { return static_cast<int>(shortcut_views.size()); }
  void validate() const;
};

struct Layer {
  Mat W;
  Mat b;  // rows x 1
};

struct Branch {
  std::vector<Layer> top;
  Mat clf_w;  // 1 x hidden
  Mat clf_b;  // 1 x 1
};

/// Shared-bottom multi-branch scorer: per-option features from mean-pooled
/// token bags go through the shared stack; each branch applies its own top
/// stack and classifier. Branch 0 is the robust branch (full view); the rest
/// are shortcut branches with partial views.
struct Model {
  ModelConfig cfg;
  std::uint64_t init_seed = 0;
  Mat embedding;              // vocab_size x d; row 0 (NULL) pinned to zero
  std::vector<Layer> shared;
  std::vector<Branch> branches;  // [0] robust, [1..] shortcut

  data::VariableView view_of(int branch) const;
};

Model init_model(const ModelConfig& cfg, std::uint64_t seed);

struct BranchOutput {
  Vec logits;  // K raw scores
  Vec probs;   // softmax(logits)
};

/// Eager forward of one branch on one instance (the branch's own view is
/// applied first). Token ids must be within the model's vocab.
BranchOutput forward_branch(const Model& m, const data::McqaInstance& inst,
                            int branch);

/// The all-muted probe: every segment replaced by NULLs of equal length.
/// With zero NULL embeddings all options share one feature, so the output is
/// the uniform distribution; exposed because inference calibrates against it.
BranchOutput forward_all_muted(const Model& m, const data::McqaInstance& inst,
                               int branch);

// ===== tape forwards (training) =====

/// Lazily binds parameter matrices to tape leaves so each step registers
/// exactly the parameters its forward touched.
class ParamBinder {
 public:
  explicit ParamBinder(diffmath::Tape& tape) : tape_(&tape) {}
  diffmath::Var use(const Mat& m, bool needs_grad);
  diffmath::Var find(const Mat& m) const;  // invalid Var when absent
  diffmath::Tape& tape() { return *tape_; }
  const diffmath::Tape& tape() const { return *tape_; }

 private:
  diffmath::Tape* tape_;
  std::vector<std::pair<const Mat*, diffmath::Var>> bound_;
};

enum class EncoderMode {
  kOnTape,      // embeddings + shared stack participate in backward
  kEagerConst,  // encoder output enters the tape as a constant (stop-gradient)
};

struct TapedBranch {
  diffmath::Var logits;
  diffmath::Var probs;
};

TapedBranch forward_branch_on_tape(ParamBinder& binder, const Model& m,
                                   const data::McqaInstance& inst, int branch,
                                   EncoderMode mode);

// ===== parameter registries =====

std::vector<diffmath::ParamRef> all_params(Model& m);
/// Embedding + shared stack + robust head: what the fused-loss step updates.
std::vector<diffmath::ParamRef> robust_step_params(Model& m);
/// Top stack + classifier of shortcut branch n (1-based over shortcut list).
std::vector<diffmath::ParamRef> shortcut_head_params(Model& m, int n);

/// Collect adjoints for `params` from a tape that ran backward; params the
/// forward never bound get zeros and an off_tape diagnostic entry.
diffmath::GradResult collect_grads(const ParamBinder& binder,
                                   const std::vector<diffmath::ParamRef>& params);

// ===== checkpoints =====

std::string model_to_json(const Model& m);
Model model_from_json(const std::string& text);
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);
std::uint64_t model_hash(const Model& m);

}  // namespace cvcqa::model

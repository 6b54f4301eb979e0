#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvcqa::diffmath {

using Vec = std::vector<double>;

/// Probability floor used inside logs so cross-entropy never sees log(0).
inline constexpr double kLogEps = 1e-12;

/// Dense row-major matrix of doubles. Vectors are plain Vec; a Mat with
/// cols == 1 and a Vec are interchangeable at the tape boundary.
struct Mat {
  int rows = 0;
  int cols = 0;
  Vec a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Mat: negative dims");
  }

  double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }
  std::size_t size() const { return a.size(); }
};

bool all_finite(const Vec& v);

// ===== eager reference ops (forward only) =====

Vec affine(const Mat& W, const Vec& x, const Vec& b);
Vec tanh_vec(const Vec& x);
Vec sigmoid_vec(const Vec& x);
Vec softmax(const Vec& z);
double log_sum_exp(const Vec& z);

/// −log(max(p[gold], eps)); `p` is a probability vector.
double cross_entropy(const Vec& p, int gold);

/// log Σ exp(z_i) − z[gold]; equals cross_entropy(softmax(z), gold) but is
/// computed without materializing the softmax.
double cross_entropy_logits(const Vec& z, int gold);

/// Jensen–Shannon divergence (natural log); symmetric, in [0, ln 2].
double js_divergence(const Vec& p, const Vec& q);

/// ‖p − q‖² / 2 — the halved squared Euclidean distance.
double half_sq_distance(const Vec& p, const Vec& q);

int argmax(const Vec& v);  // ties resolve to the lowest index

// ===== reverse-mode tape =====

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// One arena per training step. Ops append nodes; backward() replays them in
/// reverse. Leaves created with needs_grad accumulate adjoints; detach()
/// copies a value onto the tape with no backward edge, which is how
/// stop-gradient boundaries between branches are built.
class Tape {
 public:
  Var leaf(const Vec& v, bool needs_grad);
  Var leaf(const Mat& m, bool needs_grad);

  Var affine(Var W, Var x, Var b);
  Var tanh(Var x);
  Var sigmoid(Var x);
  Var softmax(Var z);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var stack(const std::vector<Var>& scalars);
  Var concat(const std::vector<Var>& parts);
  /// Mean of embedding rows E[id] over ids; rows with id == null_id
  /// contribute the zero vector but still count toward the divisor.
  Var embed_mean(Var E, const std::vector<int>& ids, int null_id = 0);
  Var cross_entropy_probs(Var p, int gold);
  Var cross_entropy_logits(Var z, int gold);
  Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& w);
  Var mean(const std::vector<Var>& scalars);
  Var detach(Var x);

  void backward(Var loss);

  const Vec& value(Var v) const;
  const Vec& grad(Var v) const;
  double value_scalar(Var v) const;
  int rows(Var v) const;
  int cols(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    kLeaf, kAffine, kTanh, kSigmoid, kSoftmax, kAdd, kSub, kMul, kScale,
    kStack, kConcat, kEmbedMean, kCeProbs, kCeLogits, kWeightedSum, kDetach,
  };
  struct Node {
    Op op;
    int rows = 0, cols = 1;
    bool needs_grad = false;   // for leaves: accumulate; others: derived
    Vec val;
    Vec adj;                   // adjoint, allocated lazily at backward()
    std::vector<int> in;       // input node ids
    std::vector<int> idx;      // token ids / gold index
    Vec aux;                   // weights / cached softmax
    double c = 0.0;
  };
  Node& at(Var v);
  const Node& at(Var v) const;
  int push(Node n);
  void backward_node(int id);

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// ===== parameter updates =====

struct ParamRef {
  std::string name;
  Mat* m = nullptr;
};

/// Gradients aligned with a query list; params that never appeared on the
/// tape get a zero gradient and are listed in `off_tape`.
struct GradResult {
  std::vector<Mat> grads;
  std::vector<std::string> off_tape;
};

struct StepStats {
  int applied = 0;
  int skipped_nonfinite = 0;
};

/// p ← p − lr · g for each pair; a param whose gradient contains a non-finite
/// entry is skipped (counted, not applied).
StepStats sgd_step(const std::vector<ParamRef>& params,
                   const std::vector<Mat>& grads, double lr);

/// Adam with bias correction; state is keyed by parameter identity.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  StepStats step(const std::vector<ParamRef>& params, const std::vector<Mat>& grads);

 private:
  struct Slot { Vec m, v; };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::pair<Mat*, Slot>> state_;
};

/// Central finite differences of a forward-only functional; the oracle side
/// of gradient checking (never touches the tape).
Vec finite_difference(const std::function<double(const Vec&)>& f, Vec x,
                      double eps = 1e-5);

}  // namespace cvcqa::diffmath

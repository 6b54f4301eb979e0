#include "cvcqa/diffmath.hpp"

#include <algorithm>
#include <cmath>

namespace cvcqa::diffmath {

bool all_finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// ===== eager ops =====

Vec affine(const Mat& W, const Vec& x, const Vec& b) {
  if (W.cols != static_cast<int>(x.size()) || W.rows != static_cast<int>(b.size()))
    throw std::invalid_argument("affine: dimension mismatch");
  Vec y(b);
  for (int i = 0; i < W.rows; ++i) {
    const double* row = &W.a[static_cast<std::size_t>(i) * W.cols];
    double acc = 0.0;
    for (int j = 0; j < W.cols; ++j) acc += row[j] * x[j];
    y[i] += acc;
  }
  return y;
}

Vec tanh_vec(const Vec& x) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  return y;
}

Vec sigmoid_vec(const Vec& x) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return y;
}

Vec softmax(const Vec& z) {
  if (z.empty()) throw std::invalid_argument("softmax: empty input");
  double mx = *std::max_element(z.begin(), z.end());
  Vec p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

double log_sum_exp(const Vec& z) {
  if (z.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

double cross_entropy(const Vec& p, int gold) {
  if (gold < 0 || gold >= static_cast<int>(p.size()))
    throw std::invalid_argument("cross_entropy: gold index out of range");
  return -std::log(std::max(p[static_cast<std::size_t>(gold)], kLogEps));
}

double cross_entropy_logits(const Vec& z, int gold) {
  if (gold < 0 || gold >= static_cast<int>(z.size()))
    throw std::invalid_argument("cross_entropy_logits: gold index out of range");
  return log_sum_exp(z) - z[static_cast<std::size_t>(gold)];
}

double js_divergence(const Vec& p, const Vec& q) {
  if (p.size() != q.size())
    throw std::invalid_argument("js_divergence: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) acc += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) acc += 0.5 * q[i] * std::log(q[i] / m);
  }
  return acc;
}

double half_sq_distance(const Vec& p, const Vec& q) {
  if (p.size() != q.size())
    throw std::invalid_argument("half_sq_distance: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double d = p[i] - q[i];
    acc += d * d;
  }
  return 0.5 * acc;
}

int argmax(const Vec& v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  return best;
}

// ===== tape =====

Tape::Node& Tape::at(Var v) {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("tape: invalid var");
  return nodes_[static_cast<std::size_t>(v.id)];
}
const Tape::Node& Tape::at(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("tape: invalid var");
  return nodes_[static_cast<std::size_t>(v.id)];
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(const Vec& v, bool needs_grad) {
  Node n;
  n.op = Op::kLeaf;
  n.rows = static_cast<int>(v.size());
  n.cols = 1;
  n.needs_grad = needs_grad;
  n.val = v;
  return {push(std::move(n))};
}

Var Tape::leaf(const Mat& m, bool needs_grad) {
  Node n;
  n.op = Op::kLeaf;
  n.rows = m.rows;
  n.cols = m.cols;
  n.needs_grad = needs_grad;
  n.val = m.a;
  return {push(std::move(n))};
}

Var Tape::affine(Var W, Var x, Var b) {
  const Node& w = at(W);
  const Node& xv = at(x);
  const Node& bv = at(b);
  if (w.cols != xv.rows || xv.cols != 1 || w.rows != bv.rows || bv.cols != 1)
    throw std::invalid_argument("tape affine: dimension mismatch");
  Node n;
  n.op = Op::kAffine;
  n.rows = w.rows;
  n.needs_grad = w.needs_grad || xv.needs_grad || bv.needs_grad;
  n.in = {W.id, x.id, b.id};
  n.val = bv.val;
  for (int i = 0; i < w.rows; ++i) {
    const double* row = &w.val[static_cast<std::size_t>(i) * w.cols];
    double acc = 0.0;
    for (int j = 0; j < w.cols; ++j) acc += row[j] * xv.val[static_cast<std::size_t>(j)];
    n.val[static_cast<std::size_t>(i)] += acc;
  }
  return {push(std::move(n))};
}

Var Tape::tanh(Var x) {
  const Node& xv = at(x);
  Node n;
  n.op = Op::kTanh;
  n.rows = xv.rows;
  n.cols = xv.cols;
  n.needs_grad = xv.needs_grad;
  n.in = {x.id};
  n.val = tanh_vec(xv.val);
  return {push(std::move(n))};
}

Var Tape::sigmoid(Var x) {
  const Node& xv = at(x);
  Node n;
  n.op = Op::kSigmoid;
  n.rows = xv.rows;
  n.cols = xv.cols;
  n.needs_grad = xv.needs_grad;
  n.in = {x.id};
  n.val = sigmoid_vec(xv.val);
  return {push(std::move(n))};
}

Var Tape::softmax(Var z) {
  const Node& zv = at(z);
  if (zv.cols != 1) throw std::invalid_argument("tape softmax: vector expected");
  Node n;
  n.op = Op::kSoftmax;
  n.rows = zv.rows;
  n.needs_grad = zv.needs_grad;
  n.in = {z.id};
  n.val = diffmath::softmax(zv.val);
  return {push(std::move(n))};
}

Var Tape::add(Var a, Var b) {
  const Node& av = at(a);
  const Node& bv = at(b);
  if (av.rows != bv.rows || av.cols != bv.cols)
    throw std::invalid_argument("tape add: shape mismatch");
  Node n;
  n.op = Op::kAdd;
  n.rows = av.rows;
  n.cols = av.cols;
  n.needs_grad = av.needs_grad || bv.needs_grad;
  n.in = {a.id, b.id};
  n.val = av.val;
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] += bv.val[i];
  return {push(std::move(n))};
}

Var Tape::sub(Var a, Var b) {
  const Node& av = at(a);
  const Node& bv = at(b);
  if (av.rows != bv.rows || av.cols != bv.cols)
    throw std::invalid_argument("tape sub: shape mismatch");
  Node n;
  n.op = Op::kSub;
  n.rows = av.rows;
  n.cols = av.cols;
  n.needs_grad = av.needs_grad || bv.needs_grad;
  n.in = {a.id, b.id};
  n.val = av.val;
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] -= bv.val[i];
  return {push(std::move(n))};
}

Var Tape::mul(Var a, Var b) {
  const Node& av = at(a);
  const Node& bv = at(b);
  if (av.rows != bv.rows || av.cols != bv.cols)
    throw std::invalid_argument("tape mul: shape mismatch");
  Node n;
  n.op = Op::kMul;
  n.rows = av.rows;
  n.cols = av.cols;
  n.needs_grad = av.needs_grad || bv.needs_grad;
  n.in = {a.id, b.id};
  n.val = av.val;
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] *= bv.val[i];
  return {push(std::move(n))};
}

Var Tape::scale(Var a, double c) {
  const Node& av = at(a);
  Node n;
  n.op = Op::kScale;
  n.rows = av.rows;
  n.cols = av.cols;
  n.needs_grad = av.needs_grad;
  n.in = {a.id};
  n.c = c;
  n.val = av.val;
  for (double& v : n.val) v *= c;
  return {push(std::move(n))};
}

Var Tape::stack(const std::vector<Var>& scalars) {
  if (scalars.empty()) throw std::invalid_argument("tape stack: empty input");
  Node n;
  n.op = Op::kStack;
  n.rows = static_cast<int>(scalars.size());
  n.val.resize(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    const Node& s = at(scalars[i]);
    if (s.rows != 1 || s.cols != 1)
      throw std::invalid_argument("tape stack: scalars expected");
    n.needs_grad = n.needs_grad || s.needs_grad;
    n.in.push_back(scalars[i].id);
    n.val[i] = s.val[0];
  }
  return {push(std::move(n))};
}

Var Tape::concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("tape concat: empty input");
  Node n;
  n.op = Op::kConcat;
  for (Var p : parts) {
    const Node& pv = at(p);
    if (pv.cols != 1) throw std::invalid_argument("tape concat: vectors expected");
    n.needs_grad = n.needs_grad || pv.needs_grad;
    n.in.push_back(p.id);
    n.val.insert(n.val.end(), pv.val.begin(), pv.val.end());
  }
  n.rows = static_cast<int>(n.val.size());
  return {push(std::move(n))};
}

Var Tape::embed_mean(Var E, const std::vector<int>& ids, int null_id) {
  const Node& e = at(E);
  if (ids.empty()) throw std::invalid_argument("tape embed_mean: empty segment");
  Node n;
  n.op = Op::kEmbedMean;
  n.rows = e.cols;
  n.needs_grad = e.needs_grad;
  n.in = {E.id};
  n.idx = ids;
  n.c = static_cast<double>(null_id);
  n.val.assign(static_cast<std::size_t>(e.cols), 0.0);
  for (int id : ids) {
    if (id < 0 || id >= e.rows)
      throw std::invalid_argument("tape embed_mean: token id out of range");
    if (id == null_id) continue;
    const double* row = &e.val[static_cast<std::size_t>(id) * e.cols];
    for (int j = 0; j < e.cols; ++j) n.val[static_cast<std::size_t>(j)] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(ids.size());
  for (double& v : n.val) v *= inv;
  return {push(std::move(n))};
}

Var Tape::cross_entropy_probs(Var p, int gold) {
  const Node& pv = at(p);
  if (gold < 0 || gold >= pv.rows)
    throw std::invalid_argument("tape cross_entropy_probs: gold out of range");
  Node n;
  n.op = Op::kCeProbs;
  n.rows = 1;
  n.needs_grad = pv.needs_grad;
  n.in = {p.id};
  n.idx = {gold};
  n.val = {-std::log(std::max(pv.val[static_cast<std::size_t>(gold)], kLogEps))};
  return {push(std::move(n))};
}

Var Tape::cross_entropy_logits(Var z, int gold) {
  const Node& zv = at(z);
  if (gold < 0 || gold >= zv.rows)
    throw std::invalid_argument("tape cross_entropy_logits: gold out of range");
  Node n;
  n.op = Op::kCeLogits;
  n.rows = 1;
  n.needs_grad = zv.needs_grad;
  n.in = {z.id};
  n.idx = {gold};
  n.aux = diffmath::softmax(zv.val);  // cached for backward
  n.val = {log_sum_exp(zv.val) - zv.val[static_cast<std::size_t>(gold)]};
  return {push(std::move(n))};
}

Var Tape::weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& w) {
  if (scalars.empty() || scalars.size() != w.size())
    throw std::invalid_argument("tape weighted_sum: size mismatch");
  Node n;
  n.op = Op::kWeightedSum;
  n.rows = 1;
  n.aux = w;
  double acc = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    const Node& s = at(scalars[i]);
    if (s.rows != 1 || s.cols != 1)
      throw std::invalid_argument("tape weighted_sum: scalars expected");
    n.needs_grad = n.needs_grad || s.needs_grad;
    n.in.push_back(scalars[i].id);
    acc += w[i] * s.val[0];
  }
  n.val = {acc};
  return {push(std::move(n))};
}

Var Tape::mean(const std::vector<Var>& scalars) {
  std::vector<double> w(scalars.size(), 1.0 / static_cast<double>(scalars.size()));
  return weighted_sum(scalars, w);
}

Var Tape::detach(Var x) {
  const Node& xv = at(x);
  Node n;
  n.op = Op::kDetach;
  n.rows = xv.rows;
  n.cols = xv.cols;
  n.needs_grad = false;  // stop-gradient: no backward edge
  n.val = xv.val;
  return {push(std::move(n))};
}

void Tape::backward(Var loss) {
  Node& top = at(loss);
  if (top.rows != 1 || top.cols != 1)
    throw std::invalid_argument("tape backward: loss must be a scalar");
  if (ran_backward_) throw std::logic_error("tape backward: already ran");
  ran_backward_ = true;
  for (auto& n : nodes_) n.adj.assign(n.val.size(), 0.0);
  top.adj[0] = 1.0;
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) backward_node(id);
}

void Tape::backward_node(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad || n.op == Op::kLeaf || n.op == Op::kDetach) return;
  switch (n.op) {
    case Op::kAffine: {
      Node& w = nodes_[static_cast<std::size_t>(n.in[0])];
      Node& x = nodes_[static_cast<std::size_t>(n.in[1])];
      Node& b = nodes_[static_cast<std::size_t>(n.in[2])];
      const int rows = w.rows, cols = w.cols;
      for (int i = 0; i < rows; ++i) {
        const double gy = n.adj[static_cast<std::size_t>(i)];
        if (gy == 0.0) continue;
        const double* wrow = &w.val[static_cast<std::size_t>(i) * cols];
        double* gwrow = &w.adj[static_cast<std::size_t>(i) * cols];
        for (int j = 0; j < cols; ++j) {
          gwrow[j] += gy * x.val[static_cast<std::size_t>(j)];
          x.adj[static_cast<std::size_t>(j)] += gy * wrow[j];
        }
        b.adj[static_cast<std::size_t>(i)] += gy;
      }
      break;
    }
    case Op::kTanh: {
      Node& x = nodes_[static_cast<std::size_t>(n.in[0])];
      for (std::size_t i = 0; i < n.val.size(); ++i)
        x.adj[i] += n.adj[i] * (1.0 - n.val[i] * n.val[i]);
      break;
    }
    case Op::kSigmoid: {
      Node& x = nodes_[static_cast<std::size_t>(n.in[0])];
      for (std::size_t i = 0; i < n.val.size(); ++i)
        x.adj[i] += n.adj[i] * n.val[i] * (1.0 - n.val[i]);
      break;
    }
    case Op::kSoftmax: {
      Node& x = nodes_[static_cast<std::size_t>(n.in[0])];
      double dot = 0.0;
      for (std::size_t i = 0; i < n.val.size(); ++i) dot += n.adj[i] * n.val[i];
      for (std::size_t i = 0; i < n.val.size(); ++i)
        x.adj[i] += n.val[i] * (n.adj[i] - dot);
      break;
    }
    case Op::kAdd: {
      Node& a = nodes_[static_cast<std::size_t>(n.in[0])];
      Node& b = nodes_[static_cast<std::size_t>(n.in[1])];
      for (std::size_t i = 0; i < n.val.size(); ++i) {
        a.adj[i] += n.adj[i];
        b.adj[i] += n.adj[i];
      }
      break;
    }
    case Op::kSub: {
      Node& a = nodes_[static_cast<std::size_t>(n.in[0])];
      Node& b = nodes_[static_cast<std::size_t>(n.in[1])];
      for (std::size_t i = 0; i < n.val.size(); ++i) {
        a.adj[i] += n.adj[i];
        b.adj[i] -= n.adj[i];
      }
      break;
    }
    case Op::kMul: {
      Node& a = nodes_[static_cast<std::size_t>(n.in[0])];
      Node& b = nodes_[static_cast<std::size_t>(n.in[1])];
      for (std::size_t i = 0; i < n.val.size(); ++i) {
        a.adj[i] += n.adj[i] * b.val[i];
        b.adj[i] += n.adj[i] * a.val[i];
      }
      break;
    }
    case Op::kScale: {
      Node& a = nodes_[static_cast<std::size_t>(n.in[0])];
      for (std::size_t i = 0; i < n.val.size(); ++i) a.adj[i] += n.adj[i] * n.c;
      break;
    }
    case Op::kStack: {
      for (std::size_t i = 0; i < n.in.size(); ++i)
        nodes_[static_cast<std::size_t>(n.in[i])].adj[0] += n.adj[i];
      break;
    }
    case Op::kConcat: {
      std::size_t off = 0;
      for (int in_id : n.in) {
        Node& p = nodes_[static_cast<std::size_t>(in_id)];
        for (std::size_t i = 0; i < p.val.size(); ++i) p.adj[i] += n.adj[off + i];
        off += p.val.size();
      }
      break;
    }
    case Op::kEmbedMean: {
      Node& e = nodes_[static_cast<std::size_t>(n.in[0])];
      const int null_id = static_cast<int>(n.c);
      const double inv = 1.0 / static_cast<double>(n.idx.size());
      for (int id2 : n.idx) {
        if (id2 == null_id) continue;
        double* grow = &e.adj[static_cast<std::size_t>(id2) * e.cols];
        for (int j = 0; j < e.cols; ++j)
          grow[j] += n.adj[static_cast<std::size_t>(j)] * inv;
      }
      break;
    }
    case Op::kCeProbs: {
      Node& p = nodes_[static_cast<std::size_t>(n.in[0])];
      const std::size_t g = static_cast<std::size_t>(n.idx[0]);
      if (p.val[g] > kLogEps) p.adj[g] -= n.adj[0] / p.val[g];
      break;
    }
    case Op::kCeLogits: {
      Node& z = nodes_[static_cast<std::size_t>(n.in[0])];
      const std::size_t g = static_cast<std::size_t>(n.idx[0]);
      for (std::size_t i = 0; i < z.val.size(); ++i)
        z.adj[i] += n.adj[0] * (n.aux[i] - (i == g ? 1.0 : 0.0));
      break;
    }
    case Op::kWeightedSum: {
      for (std::size_t i = 0; i < n.in.size(); ++i)
        nodes_[static_cast<std::size_t>(n.in[i])].adj[0] += n.adj[0] * n.aux[i];
      break;
    }
    case Op::kLeaf:
    case Op::kDetach:
      break;
  }
}

const Vec& Tape::value(Var v) const { return at(v).val; }

const Vec& Tape::grad(Var v) const {
  const Node& n = at(v);
  if (!ran_backward_) throw std::logic_error("tape grad: backward() not run");
  return n.adj;
}

double Tape::value_scalar(Var v) const {
  const Node& n = at(v);
  if (n.rows != 1 || n.cols != 1)
    throw std::invalid_argument("tape value_scalar: not a scalar");
  return n.val[0];
}

int Tape::rows(Var v) const { return at(v).rows; }
int Tape::cols(Var v) const { return at(v).cols; }

// ===== parameter updates =====

StepStats sgd_step(const std::vector<ParamRef>& params,
                   const std::vector<Mat>& grads, double lr) {
  if (params.size() != grads.size())
    throw std::invalid_argument("sgd_step: params/grads size mismatch");
  StepStats st;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Mat& p = *params[k].m;
    const Mat& g = grads[k];
    if (p.size() != g.size())
      throw std::invalid_argument("sgd_step: shape mismatch for " + params[k].name);
    if (!all_finite(g.a)) {
      ++st.skipped_nonfinite;
      continue;
    }
    for (std::size_t i = 0; i < p.a.size(); ++i) p.a[i] -= lr * g.a[i];
    ++st.applied;
  }
  return st;
}

StepStats Adam::step(const std::vector<ParamRef>& params, const std::vector<Mat>& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam: params/grads size mismatch");
  ++t_;
  StepStats st;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Mat& p = *params[k].m;
    const Mat& g = grads[k];
    if (!all_finite(g.a)) {
      ++st.skipped_nonfinite;
      continue;
    }
    Slot* slot = nullptr;
    for (auto& [ptr, s] : state_)
      if (ptr == &p) slot = &s;
    if (!slot) {
      state_.push_back({&p, Slot{Vec(p.size(), 0.0), Vec(p.size(), 0.0)}});
      slot = &state_.back().second;
    }
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < p.a.size(); ++i) {
      slot->m[i] = beta1_ * slot->m[i] + (1.0 - beta1_) * g.a[i];
      slot->v[i] = beta2_ * slot->v[i] + (1.0 - beta2_) * g.a[i] * g.a[i];
      const double mhat = slot->m[i] / bc1;
      const double vhat = slot->v[i] / bc2;
      p.a[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    ++st.applied;
  }
  return st;
}

Vec finite_difference(const std::function<double(const Vec&)>& f, Vec x, double eps) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double fp = f(x);
    x[i] = keep - eps;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

}  // namespace cvcqa::diffmath

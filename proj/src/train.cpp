#include "cvcqa/train.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "cvcqa/rng.hpp"

namespace cvcqa::train {

using data::Dataset;
using data::McqaInstance;
using diffmath::Mat;
using diffmath::Tape;
using diffmath::Var;
using model::EncoderMode;
using model::Model;
using model::ParamBinder;

// ===== probability-level losses =====

Vec fuse(const Vec& p_r, const std::vector<Vec>& p_s) {
  if (p_s.empty()) throw std::invalid_argument("fuse: no shortcut distributions");
  Vec a(p_r.size(), 0.0);
  for (const auto& ps : p_s) {
    if (ps.size() != p_r.size()) throw std::invalid_argument("fuse: size mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += p_r[i] * ps[i];
  }
  return a;
}

double loss_e_probs(const Vec& p_r, const std::vector<Vec>& p_s, int gold) {
  return diffmath::cross_entropy_logits(fuse(p_r, p_s), gold);
}

double loss_e1_probs(const Vec& p_r, const std::vector<Vec>& p_s, int gold) {
  if (p_s.empty()) throw std::invalid_argument("loss_e1: no shortcut distributions");
  double acc = 0.0;
  for (const auto& ps : p_s) acc += diffmath::cross_entropy_logits(fuse(p_r, {ps}), gold);
  return acc;
}

double loss_e2_probs(const Vec& p_r, const std::vector<Vec>& p_s, int gold,
                     const Vec& w) {
  if (p_s.size() != w.size()) throw std::invalid_argument("loss_e2: weight size mismatch");
  double acc = 0.0;
  for (std::size_t n = 0; n < p_s.size(); ++n)
    acc += w[n] * diffmath::cross_entropy_logits(fuse(p_r, {p_s[n]}), gold);
  return acc;
}

Vec branch_weights(const Vec& shortcut_losses) {
  return diffmath::softmax(shortcut_losses);
}

// ===== config =====

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train config: negative epochs");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (!(robust_lr > 0.0) && robust_lr >= 0.0)
    throw std::invalid_argument("train config: robust_lr must be positive (or negative for \"use lr\")");
  if (optimizer != "sgd" && optimizer != "adam")
    throw std::invalid_argument("train config: unknown optimizer '" + optimizer + "'");
  if (loss_variant != "e" && loss_variant != "e1" && loss_variant != "e2")
    throw std::invalid_argument("train config: unknown loss variant '" + loss_variant + "'");
}

// ===== history CSV =====

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

}  // namespace

std::string history_to_csv(const History& h, int n_shortcut) {
  std::string out = "epoch,loss_all,loss_robust";
  for (int n = 1; n <= n_shortcut; ++n) out += ",loss_s" + std::to_string(n);
  for (int n = 1; n <= n_shortcut; ++n) out += ",w" + std::to_string(n);
  out += ",train_acc,dev_acc,skipped_steps\n";
  for (const auto& e : h) {
    out += std::to_string(e.epoch) + "," + fmt(e.loss_all) + "," + fmt(e.loss_robust);
    for (int n = 0; n < n_shortcut; ++n)
      out += "," + fmt(n < static_cast<int>(e.loss_shortcut.size())
                           ? e.loss_shortcut[static_cast<std::size_t>(n)]
                           : 0.0);
    for (int n = 0; n < n_shortcut; ++n)
      out += "," + fmt(n < static_cast<int>(e.w_mean.size())
                           ? e.w_mean[static_cast<std::size_t>(n)]
                           : 0.0);
    out += "," + fmt(e.train_acc) + "," + fmt(e.dev_acc) + "," +
           std::to_string(e.skipped_steps) + "\n";
  }
  return out;
}

// ===== measurement =====

namespace {

struct Batch {
  std::vector<const McqaInstance*> items;
};

/// Mean shortcut loss of branch n over the batch, on a fresh tape with the
/// encoder output entering as a constant (gradients reach only the head).
Var shortcut_loss_on_tape(ParamBinder& binder, const Model& m, const Batch& batch,
                          int n) {
  std::vector<Var> per_item;
  per_item.reserve(batch.items.size());
  for (const auto* inst : batch.items) {
    auto fwd = model::forward_branch_on_tape(binder, m, *inst, n,
                                             EncoderMode::kEagerConst);
    per_item.push_back(
        binder.tape().cross_entropy_logits(fwd.logits, inst->answer));
  }
  return binder.tape().mean(per_item);
}

/// Mean fused robust loss over the batch. Shortcut probabilities enter as
/// constants when detaching (the default); otherwise their branches are put
/// on the tape so gradients can flow through them too.
Var robust_loss_on_tape(ParamBinder& binder, const Model& m, const Batch& batch,
                        const std::string& variant, bool detach, const Vec& w) {
  Tape& t = binder.tape();
  const int n_shortcut = m.cfg.n_shortcut();
  std::vector<Var> per_item;
  per_item.reserve(batch.items.size());
  for (const auto* inst : batch.items) {
    auto robust = model::forward_branch_on_tape(binder, m, *inst, 0,
                                                EncoderMode::kOnTape);
    std::vector<Var> ps(static_cast<std::size_t>(n_shortcut));
    for (int n = 1; n <= n_shortcut; ++n) {
      if (detach) {
        ps[static_cast<std::size_t>(n - 1)] =
            t.leaf(model::forward_branch(m, *inst, n).probs, false);
      } else {
        ps[static_cast<std::size_t>(n - 1)] =
            model::forward_branch_on_tape(binder, m, *inst, n, EncoderMode::kOnTape)
                .probs;
      }
    }
    Var item_loss;
    if (variant == "e") {
      Var fused = t.mul(robust.probs, ps[0]);
      for (int n = 1; n < n_shortcut; ++n)
        fused = t.add(fused, t.mul(robust.probs, ps[static_cast<std::size_t>(n)]));
      item_loss = t.cross_entropy_logits(fused, inst->answer);
    } else {
      std::vector<Var> terms;
      std::vector<double> weights;
      for (int n = 0; n < n_shortcut; ++n) {
        terms.push_back(t.cross_entropy_logits(
            t.mul(robust.probs, ps[static_cast<std::size_t>(n)]), inst->answer));
        weights.push_back(variant == "e2" ? w[static_cast<std::size_t>(n)] : 1.0);
      }
      item_loss = t.weighted_sum(terms, weights);
    }
    per_item.push_back(item_loss);
  }
  return t.mean(per_item);
}

double eager_shortcut_loss(const Model& m, const Batch& batch, int n) {
  double acc = 0.0;
  for (const auto* inst : batch.items)
    acc += diffmath::cross_entropy_logits(model::forward_branch(m, *inst, n).logits,
                                          inst->answer);
  return acc / static_cast<double>(batch.items.size());
}

}  // namespace

LossBreakdown compute_losses(const Model& m,
                             const std::vector<const McqaInstance*>& batch_items,
                             const std::string& loss_variant, bool detach_shortcut) {
  if (batch_items.empty()) throw std::invalid_argument("compute_losses: empty batch");
  const int n_shortcut = m.cfg.n_shortcut();
  if (n_shortcut == 0) throw std::invalid_argument("compute_losses: model has no shortcut branches");
  Batch batch{batch_items};
  LossBreakdown out;
  out.shortcut.resize(static_cast<std::size_t>(n_shortcut));
  for (int n = 1; n <= n_shortcut; ++n)
    out.shortcut[static_cast<std::size_t>(n - 1)] = eager_shortcut_loss(m, batch, n);
  out.weights = branch_weights(out.shortcut);

  double robust = 0.0;
  for (const auto* inst : batch.items) {
    const Vec p_r = model::forward_branch(m, *inst, 0).probs;
    std::vector<Vec> ps;
    for (int n = 1; n <= n_shortcut; ++n)
      ps.push_back(model::forward_branch(m, *inst, n).probs);
    if (loss_variant == "e")
      robust += loss_e_probs(p_r, ps, inst->answer);
    else if (loss_variant == "e1")
      robust += loss_e1_probs(p_r, ps, inst->answer);
    else
      robust += loss_e2_probs(p_r, ps, inst->answer, out.weights);
  }
  (void)detach_shortcut;  // detaching changes gradients, not values
  out.robust = robust / static_cast<double>(batch.items.size());
  out.total = out.robust;
  for (double s : out.shortcut) out.total += s;
  return out;
}

double branch_accuracy(const Model& m, const Dataset& d, int branch) {
  if (d.instances.empty()) return 0.0;
  int hits = 0;
  for (const auto& inst : d.instances)
    if (diffmath::argmax(model::forward_branch(m, inst, branch).logits) == inst.answer)
      ++hits;
  return static_cast<double>(hits) / static_cast<double>(d.instances.size());
}

// ===== training loops =====

namespace {

class Stepper {
 public:
  Stepper(const std::string& optimizer, double lr)
      : use_adam_(optimizer == "adam"), lr_(lr), adam_(lr) {}

  diffmath::StepStats apply(const std::vector<diffmath::ParamRef>& params,
                            const std::vector<Mat>& grads) {
    if (use_adam_) return adam_.step(params, grads);
    return diffmath::sgd_step(params, grads, lr_);
  }

 private:
  bool use_adam_;
  double lr_;
  diffmath::Adam adam_;
};

std::vector<Batch> make_batches(const Dataset& d, int batch_size,
                                rng::Xoshiro256& r) {
  std::vector<const McqaInstance*> order;
  order.reserve(d.instances.size());
  for (const auto& inst : d.instances) order.push_back(&inst);
  r.shuffle(order);
  std::vector<Batch> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    Batch b;
    for (std::size_t j = i;
         j < std::min(order.size(), i + static_cast<std::size_t>(batch_size)); ++j)
      b.items.push_back(order[j]);
    batches.push_back(std::move(b));
  }
  return batches;
}

[[noreturn]] void diverged(const char* which, int epoch, std::size_t batch_idx) {
  throw std::runtime_error("training diverged: non-finite " + std::string(which) +
                           " loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_idx));
}

}  // namespace

History train_cvc(Model& m, const Dataset& train_set, const Dataset& dev_set,
                  const TrainConfig& cfg) {
  cfg.validate();
  const int n_shortcut = m.cfg.n_shortcut();
  if (n_shortcut < 1)
    throw std::invalid_argument("train_cvc: model has no shortcut branches");
  if (train_set.instances.empty())
    throw std::invalid_argument("train_cvc: empty training set");

  rng::Xoshiro256 shuffle_rng(rng::derive_seed(cfg.seed, "train-shuffle"));
  Stepper stepper(cfg.optimizer, cfg.lr);
  Stepper robust_stepper(cfg.optimizer,
                         cfg.robust_lr < 0.0 ? cfg.lr : cfg.robust_lr);
  History history;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto batches = make_batches(train_set, cfg.batch_size, shuffle_rng);
    EpochStats stats;
    stats.epoch = epoch;
    stats.loss_shortcut.assign(static_cast<std::size_t>(n_shortcut), 0.0);
    stats.w_mean.assign(static_cast<std::size_t>(n_shortcut), 0.0);

    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& batch = batches[bi];

      // Step one: each shortcut head on its own loss, encoder held constant.
      Vec shortcut_losses(static_cast<std::size_t>(n_shortcut));
      for (int n = 1; n <= n_shortcut; ++n) {
        Tape tape;
        ParamBinder binder(tape);
        Var loss = shortcut_loss_on_tape(binder, m, batch, n);
        const double value = tape.value_scalar(loss);
        if (!std::isfinite(value)) diverged("shortcut", epoch, bi);
        shortcut_losses[static_cast<std::size_t>(n - 1)] = value;
        tape.backward(loss);
        auto params = model::shortcut_head_params(m, n);
        auto grads = model::collect_grads(binder, params);
        stats.skipped_steps += stepper.apply(params, grads.grads).skipped_nonfinite;
      }
      const Vec w = branch_weights(shortcut_losses);

      // Step two: fused loss updates embeddings, shared stack, robust head.
      {
        Tape tape;
        ParamBinder binder(tape);
        Var loss = robust_loss_on_tape(binder, m, batch, cfg.loss_variant,
                                       cfg.detach_shortcut_in_fusion, w);
        const double value = tape.value_scalar(loss);
        if (!std::isfinite(value)) diverged("robust", epoch, bi);
        tape.backward(loss);
        auto params = model::robust_step_params(m);
        auto grads = model::collect_grads(binder, params);
        stats.skipped_steps +=
            robust_stepper.apply(params, grads.grads).skipped_nonfinite;

        stats.loss_robust += value;
        double total = value;
        for (int n = 0; n < n_shortcut; ++n) {
          stats.loss_shortcut[static_cast<std::size_t>(n)] +=
              shortcut_losses[static_cast<std::size_t>(n)];
          stats.w_mean[static_cast<std::size_t>(n)] += w[static_cast<std::size_t>(n)];
          total += shortcut_losses[static_cast<std::size_t>(n)];
        }
        stats.loss_all += total;
      }
    }

    const double nb = static_cast<double>(batches.size());
    stats.loss_all /= nb;
    stats.loss_robust /= nb;
    for (auto& v : stats.loss_shortcut) v /= nb;
    for (auto& v : stats.w_mean) v /= nb;
    if (cfg.track_accuracy) {
      stats.train_acc = branch_accuracy(m, train_set, 0);
      stats.dev_acc = branch_accuracy(m, dev_set, 0);
    }
    history.push_back(std::move(stats));
  }
  return history;
}

History train_ct(Model& m, const Dataset& train_set, const Dataset& dev_set,
                 const TrainConfig& cfg) {
  cfg.validate();
  if (m.cfg.n_shortcut() != 0)
    throw std::invalid_argument("train_ct: expected a single-branch model");
  if (train_set.instances.empty())
    throw std::invalid_argument("train_ct: empty training set");

  rng::Xoshiro256 shuffle_rng(rng::derive_seed(cfg.seed, "train-shuffle"));
  Stepper stepper(cfg.optimizer, cfg.lr);
  History history;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto batches = make_batches(train_set, cfg.batch_size, shuffle_rng);
    EpochStats stats;
    stats.epoch = epoch;

    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Tape tape;
      ParamBinder binder(tape);
      std::vector<Var> per_item;
      for (const auto* inst : batches[bi].items) {
        auto fwd = model::forward_branch_on_tape(binder, m, *inst, 0,
                                                 EncoderMode::kOnTape);
        per_item.push_back(tape.cross_entropy_logits(fwd.logits, inst->answer));
      }
      Var loss = tape.mean(per_item);
      const double value = tape.value_scalar(loss);
      if (!std::isfinite(value)) diverged("baseline", epoch, bi);
      tape.backward(loss);
      auto params = model::all_params(m);
      auto grads = model::collect_grads(binder, params);
      stats.skipped_steps += stepper.apply(params, grads.grads).skipped_nonfinite;
      stats.loss_all += value;
      stats.loss_robust += value;
    }

    const double nb = static_cast<double>(batches.size());
    stats.loss_all /= nb;
    stats.loss_robust /= nb;
    if (cfg.track_accuracy) {
      stats.train_acc = branch_accuracy(m, train_set, 0);
      stats.dev_acc = branch_accuracy(m, dev_set, 0);
    }
    history.push_back(std::move(stats));
  }
  return history;
}

}  // namespace cvcqa::train

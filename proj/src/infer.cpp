#include "cvcqa/infer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cvcqa/rng.hpp"
#include "json.hpp"

namespace cvcqa::infer {

using data::Dataset;
using data::McqaInstance;
using diffmath::Tape;
using diffmath::Var;
using model::Model;
using nlohmann::json;

// ===== score rules =====

Vec cvc_iv_scores(const Vec& p_r, const std::vector<double>& c_s,
                  const std::vector<double>& c_r) {
  if (c_s.size() != c_r.size())
    throw std::invalid_argument("cvc_iv_scores: constant lists differ in length");
  if (c_s.empty()) throw std::invalid_argument("cvc_iv_scores: no branches");
  for (double c : c_s)
    if (c < 0.0 || c > 1.0)
      throw std::invalid_argument("cvc_iv_scores: constants must lie in [0,1]");
  for (double c : c_r)
    if (c < 0.0 || c > 1.0)
      throw std::invalid_argument("cvc_iv_scores: constants must lie in [0,1]");
  double bias = 0.0;
  double gain = 0.0;
  for (std::size_t n = 0; n < c_s.size(); ++n) {
    gain += c_s[n];
    bias += c_r[n] * c_s[n];
  }
  Vec scores(p_r.size());
  for (std::size_t i = 0; i < p_r.size(); ++i) scores[i] = p_r[i] * gain - bias;
  return scores;
}

Vec cvc_mv_scores(const Vec& p_r, const std::vector<Vec>& p_s,
                  const std::vector<Vec>& c_r) {
  if (p_s.size() != c_r.size() || p_s.empty())
    throw std::invalid_argument("cvc_mv_scores: branch lists differ in length");
  Vec scores(p_r.size(), 0.0);
  for (std::size_t n = 0; n < p_s.size(); ++n) {
    if (p_s[n].size() != p_r.size() || c_r[n].size() != p_r.size())
      throw std::invalid_argument("cvc_mv_scores: size mismatch");
    for (std::size_t i = 0; i < p_r.size(); ++i)
      scores[i] += (p_r[i] - c_r[n][i]) * p_s[n][i];
  }
  return scores;
}

// ===== c-adaptor =====

int CAdaptorConfig::input_dim(int k) const {
  int dim = 0;
  if (include_probs) dim += 2 * k;
  if (include_distance) dim += 1;
  return dim;
}

void CAdaptorConfig::validate() const {
  if (hidden < 1) throw std::invalid_argument("adaptor config: hidden must be positive");
  if (!include_probs && !include_distance)
    throw std::invalid_argument("adaptor config: needs at least one input block");
}

CAdaptor init_adaptor(const CAdaptorConfig& cfg, int k, int n_shortcut,
                      std::uint64_t seed) {
  cfg.validate();
  if (k < 2) throw std::invalid_argument("init_adaptor: k must be at least 2");
  if (n_shortcut < 1) throw std::invalid_argument("init_adaptor: need a shortcut branch");
  CAdaptor a;
  a.cfg = cfg;
  a.k = k;
  rng::Xoshiro256 r(rng::derive_seed(seed, "adaptor-init"));
  const int in = cfg.input_dim(k);
  const int out = cfg.scalar_output ? 1 : k;
  for (int n = 0; n < n_shortcut; ++n) {
    CAdaptor::Net net{Mat(cfg.hidden, in), Mat(cfg.hidden, 1), Mat(out, cfg.hidden),
                      Mat(out, 1)};
    const double b1 = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& x : net.W1.a) x = r.real(-b1, b1);
    const double b2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    for (double& x : net.W2.a) x = r.real(-b2, b2);
    a.nets.push_back(std::move(net));
  }
  return a;
}

namespace {

Vec adaptor_input(const CAdaptorConfig& cfg, const Vec& p_r, const Vec& p_s) {
  Vec x;
  if (cfg.include_probs) {
    x.insert(x.end(), p_r.begin(), p_r.end());
    x.insert(x.end(), p_s.begin(), p_s.end());
  }
  if (cfg.include_distance) x.push_back(diffmath::js_divergence(p_r, p_s));
  return x;
}

}  // namespace

Vec adaptor_c(const CAdaptor& a, int n, const Vec& p_r, const Vec& p_s) {
  if (n < 1 || n > static_cast<int>(a.nets.size()))
    throw std::invalid_argument("adaptor_c: branch index out of range");
  const auto& net = a.nets[static_cast<std::size_t>(n - 1)];
  const Vec x = adaptor_input(a.cfg, p_r, p_s);
  const Vec h = diffmath::tanh_vec(diffmath::affine(net.W1, x, net.b1.a));
  const Vec out = diffmath::sigmoid_vec(diffmath::affine(net.W2, h, net.b2.a));
  if (!a.cfg.scalar_output) return out;
  return Vec(static_cast<std::size_t>(a.k), out[0]);
}

std::vector<diffmath::ParamRef> adaptor_params(CAdaptor& a) {
  std::vector<diffmath::ParamRef> out;
  for (std::size_t n = 0; n < a.nets.size(); ++n) {
    const std::string p = "adaptor" + std::to_string(n + 1);
    out.push_back({p + ".W1", &a.nets[n].W1});
    out.push_back({p + ".b1", &a.nets[n].b1});
    out.push_back({p + ".W2", &a.nets[n].W2});
    out.push_back({p + ".b2", &a.nets[n].b2});
  }
  return out;
}

std::string adaptor_to_json(const CAdaptor& a) {
  json j;
  j["format"] = "cvcqa-adaptor";
  j["version"] = 1;
  j["config"] = {{"hidden", a.cfg.hidden},
                 {"include_probs", a.cfg.include_probs},
                 {"include_distance", a.cfg.include_distance},
                 {"scalar_output", a.cfg.scalar_output}};
  j["k"] = a.k;
  json nets = json::array();
  for (const auto& n : a.nets)
    nets.push_back(json{{"w1", n.W1.a}, {"b1", n.b1.a}, {"w2", n.W2.a}, {"b2", n.b2.a}});
  j["nets"] = nets;
  return j.dump() + "\n";
}

CAdaptor adaptor_from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.at("format").get<std::string>() != "cvcqa-adaptor")
    throw std::runtime_error("checkpoint: not an adaptor file");
  CAdaptor a;
  const json& c = j.at("config");
  a.cfg.hidden = c.at("hidden").get<int>();
  a.cfg.include_probs = c.at("include_probs").get<bool>();
  a.cfg.include_distance = c.at("include_distance").get<bool>();
  a.cfg.scalar_output = c.at("scalar_output").get<bool>();
  a.cfg.validate();
  a.k = j.at("k").get<int>();
  const int in = a.cfg.input_dim(a.k);
  const int out = a.cfg.scalar_output ? 1 : a.k;
  for (const auto& nj : j.at("nets")) {
    CAdaptor::Net net{Mat(a.cfg.hidden, in), Mat(a.cfg.hidden, 1), Mat(out, a.cfg.hidden),
                      Mat(out, 1)};
    net.W1.a = nj.at("w1").get<Vec>();
    net.b1.a = nj.at("b1").get<Vec>();
    net.W2.a = nj.at("w2").get<Vec>();
    net.b2.a = nj.at("b2").get<Vec>();
    if (net.W1.a.size() != static_cast<std::size_t>(a.cfg.hidden) * static_cast<std::size_t>(in) ||
        net.W2.a.size() != static_cast<std::size_t>(out) * static_cast<std::size_t>(a.cfg.hidden))
      throw std::runtime_error("checkpoint: adaptor shape mismatch");
    a.nets.push_back(std::move(net));
  }
  if (a.nets.empty()) throw std::runtime_error("checkpoint: adaptor has no branches");
  return a;
}

void save_adaptor(const CAdaptor& a, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << adaptor_to_json(a);
}

CAdaptor load_adaptor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return adaptor_from_json(ss.str());
}

std::vector<double> train_c_adaptor(const Model& m, CAdaptor& a,
                                    const Dataset& train_set,
                                    const AdaptorTrainConfig& cfg) {
  const int n_shortcut = m.cfg.n_shortcut();
  if (n_shortcut != static_cast<int>(a.nets.size()))
    throw std::invalid_argument("train_c_adaptor: branch count mismatch");
  if (train_set.instances.empty())
    throw std::invalid_argument("train_c_adaptor: empty training set");

  // The model is frozen: precompute its branch distributions once.
  struct Cached {
    Vec p_r;
    std::vector<Vec> p_s;
    int gold;
  };
  std::vector<Cached> cache;
  cache.reserve(train_set.instances.size());
  for (const auto& inst : train_set.instances) {
    Cached c;
    c.p_r = model::forward_branch(m, inst, 0).probs;
    for (int n = 1; n <= n_shortcut; ++n)
      c.p_s.push_back(model::forward_branch(m, inst, n).probs);
    c.gold = inst.answer;
    cache.push_back(std::move(c));
  }

  rng::Xoshiro256 shuffle_rng(rng::derive_seed(cfg.seed, "adaptor-shuffle"));
  std::vector<double> epoch_losses;
  std::vector<const Cached*> order;
  order.reserve(cache.size());
  for (const auto& c : cache) order.push_back(&c);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
      Tape t;
      model::ParamBinder binder(t);
      std::vector<Var> per_item;
      for (std::size_t j = i;
           j < std::min(order.size(), i + static_cast<std::size_t>(cfg.batch_size)); ++j) {
        const Cached& c = *order[j];
        Var p_r = t.leaf(c.p_r, false);
        Var scores;
        for (int n = 1; n <= n_shortcut; ++n) {
          const Vec& ps = c.p_s[static_cast<std::size_t>(n - 1)];
          const auto& net = a.nets[static_cast<std::size_t>(n - 1)];
          Var x = t.leaf(adaptor_input(a.cfg, c.p_r, ps), false);
          Var h = t.tanh(t.affine(binder.use(net.W1, true), x, binder.use(net.b1, true)));
          Var out = t.sigmoid(
              t.affine(binder.use(net.W2, true), h, binder.use(net.b2, true)));
          Var c_vec = out;
          if (a.cfg.scalar_output)
            c_vec = t.stack(std::vector<Var>(static_cast<std::size_t>(a.k), out));
          Var term = t.mul(t.sub(p_r, c_vec), t.leaf(ps, false));
          scores = scores.valid() ? t.add(scores, term) : term;
        }
        per_item.push_back(t.cross_entropy_logits(scores, c.gold));
      }
      Var loss = t.mean(per_item);
      const double value = t.value_scalar(loss);
      if (!std::isfinite(value))
        throw std::runtime_error("adaptor training diverged: non-finite loss");
      t.backward(loss);
      auto params = adaptor_params(a);
      auto grads = model::collect_grads(binder, params);
      diffmath::sgd_step(params, grads.grads, cfg.lr);
      epoch_loss += value;
      ++n_batches;
    }
    epoch_losses.push_back(epoch_loss / static_cast<double>(n_batches));
  }
  return epoch_losses;
}

// ===== inference methods =====

InferenceSpec InferenceSpec::from_name(const std::string& name) {
  InferenceSpec s;
  if (name == "ct") {
    s.kind = Kind::kCt;
  } else if (name == "np") {
    s.kind = Kind::kNp;
  } else if (name == "cvc-iv") {
    s.kind = Kind::kCvcIv;
  } else if (name == "cvc-mv") {
    s.kind = Kind::kCvcMv;
    s.c_source = CSource::kConstant;
  } else if (name == "cvc-mv-adaptor") {
    s.kind = Kind::kCvcMv;
    s.c_source = CSource::kAdaptor;
  } else if (name == "cvc-mv-js") {
    s.kind = Kind::kCvcMv;
    s.c_source = CSource::kJs;
  } else if (name == "cvc-mv-euc") {
    s.kind = Kind::kCvcMv;
    s.c_source = CSource::kEuc;
  } else {
    throw std::invalid_argument("unknown inference method '" + name + "'");
  }
  return s;
}

std::string InferenceSpec::name() const {
  switch (kind) {
    case Kind::kCt: return "ct";
    case Kind::kNp: return "np";
    case Kind::kCvcIv: return "cvc-iv";
    case Kind::kCvcMv:
      switch (c_source) {
        case CSource::kConstant: return "cvc-mv";
        case CSource::kAdaptor: return "cvc-mv-adaptor";
        case CSource::kJs: return "cvc-mv-js";
        case CSource::kEuc: return "cvc-mv-euc";
      }
  }
  return "?";
}

Vec predict_np(const Model& m, const McqaInstance& inst) {
  const int n_shortcut = m.cfg.n_shortcut();
  if (n_shortcut < 1) throw std::invalid_argument("predict_np: no shortcut branches");
  const Vec p_r = model::forward_branch(m, inst, 0).probs;
  std::vector<Vec> ps;
  for (int n = 1; n <= n_shortcut; ++n)
    ps.push_back(model::forward_branch(m, inst, n).probs);
  Vec fused(p_r.size(), 0.0);
  for (const auto& p_s : ps)
    for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += p_r[i] * p_s[i];
  return fused;
}

std::vector<model::BranchOutput> predict_all_muted(const Model& m,
                                                   const McqaInstance& inst) {
  std::vector<model::BranchOutput> out;
  for (int b = 0; b < static_cast<int>(m.branches.size()); ++b)
    out.push_back(model::forward_all_muted(m, inst, b));
  return out;
}

Vec method_scores(const Model& m, const InferenceSpec& spec, const McqaInstance& inst) {
  const int n_shortcut = m.cfg.n_shortcut();
  switch (spec.kind) {
    case InferenceSpec::Kind::kCt: {
      if (n_shortcut != 0)
        throw std::invalid_argument("method 'ct' expects a single-branch model");
      return model::forward_branch(m, inst, 0).probs;
    }
    case InferenceSpec::Kind::kNp:
      if (n_shortcut < 1)
        throw std::invalid_argument("method 'np' expects shortcut branches");
      return predict_np(m, inst);
    case InferenceSpec::Kind::kCvcIv: {
      if (n_shortcut < 1)
        throw std::invalid_argument("method 'cvc-iv' expects shortcut branches");
      const Vec p_r = model::forward_branch(m, inst, 0).probs;
      std::vector<double> c_s(static_cast<std::size_t>(n_shortcut), spec.c_s);
      std::vector<double> c_r(static_cast<std::size_t>(n_shortcut), spec.c_r);
      return cvc_iv_scores(p_r, c_s, c_r);
    }
    case InferenceSpec::Kind::kCvcMv: {
      if (n_shortcut < 1)
        throw std::invalid_argument("method 'cvc-mv' expects shortcut branches");
      const Vec p_r = model::forward_branch(m, inst, 0).probs;
      std::vector<Vec> ps;
      for (int n = 1; n <= n_shortcut; ++n)
        ps.push_back(model::forward_branch(m, inst, n).probs);
      std::vector<Vec> c_r;
      for (int n = 1; n <= n_shortcut; ++n) {
        const Vec& p_s = ps[static_cast<std::size_t>(n - 1)];
        switch (spec.c_source) {
          case InferenceSpec::CSource::kConstant:
            c_r.push_back(Vec(p_r.size(), spec.c_r));
            break;
          case InferenceSpec::CSource::kAdaptor:
            if (!spec.adaptor)
              throw std::invalid_argument("method 'cvc-mv-adaptor' needs an adaptor");
            c_r.push_back(adaptor_c(*spec.adaptor, n, p_r, p_s));
            break;
          case InferenceSpec::CSource::kJs:
            c_r.push_back(Vec(p_r.size(), diffmath::js_divergence(p_r, p_s)));
            break;
          case InferenceSpec::CSource::kEuc:
            c_r.push_back(Vec(p_r.size(), diffmath::half_sq_distance(p_r, p_s)));
            break;
        }
      }
      return cvc_mv_scores(p_r, ps, c_r);
    }
  }
  throw std::logic_error("method_scores: unreachable");
}

// ===== evaluation =====

EvalResult evaluate(const Model& m, const InferenceSpec& spec, const Dataset& d) {
  EvalResult res;
  int hits = 0, hits_true = 0, hits_false = 0;
  for (std::size_t i = 0; i < d.instances.size(); ++i) {
    const auto& inst = d.instances[i];
    EvalRecord rec;
    rec.index = static_cast<int>(i);
    rec.scores = method_scores(m, spec, inst);
    rec.pred = diffmath::argmax(rec.scores);
    rec.gold = inst.answer;
    rec.shortcut_flag = inst.shortcut_flag;
    rec.provenance = inst.provenance;
    const bool hit = rec.pred == rec.gold;
    hits += hit;
    if (inst.shortcut_flag) {
      ++res.n_true;
      hits_true += hit;
    } else {
      ++res.n_false;
      hits_false += hit;
    }
    res.records.push_back(std::move(rec));
  }
  res.n = static_cast<int>(d.instances.size());
  res.accuracy = res.n ? static_cast<double>(hits) / res.n : 0.0;
  res.acc_shortcut_true = res.n_true ? static_cast<double>(hits_true) / res.n_true : 0.0;
  res.acc_shortcut_false =
      res.n_false ? static_cast<double>(hits_false) / res.n_false : 0.0;
  return res;
}

std::string records_to_jsonl(const std::string& dataset_name,
                             const std::string& method_name,
                             const std::vector<EvalRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    json j{{"dataset", dataset_name}, {"gold", r.gold},     {"index", r.index},
           {"method", method_name},   {"pred", r.pred},     {"provenance", r.provenance},
           {"scores", r.scores},      {"shortcut_flag", r.shortcut_flag}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

double tune_mv_constant(const Model& m, const Dataset& dev,
                        const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("tune_mv_constant: empty grid");
  double best_c = grid[0];
  double best_acc = -1.0;
  for (double c : grid) {
    InferenceSpec spec;
    spec.kind = InferenceSpec::Kind::kCvcMv;
    spec.c_source = InferenceSpec::CSource::kConstant;
    spec.c_r = c;
    const double acc = evaluate(m, spec, dev).accuracy;
    if (acc > best_acc) {
      best_acc = acc;
      best_c = c;
    }
  }
  return best_c;
}

}  // namespace cvcqa::infer

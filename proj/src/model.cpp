#include "cvcqa/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cvcqa/rng.hpp"
#include "json.hpp"

namespace cvcqa::model {

using nlohmann::json;

int ModelConfig::resolved_layers_shared() const {
  if (layers_shared >= 0) return layers_shared;
  return static_cast<int>(std::lround(5.0 * layers / 6.0));
}

void ModelConfig::validate() const {
  if (d < 1 || hidden < 1) throw std::invalid_argument("model config: widths must be positive");
  if (k < 2) throw std::invalid_argument("model config: k must be at least 2");
  if (vocab_size < 2) throw std::invalid_argument("model config: vocab_size not set");
  if (layers < 1) throw std::invalid_argument("model config: layers must be positive");
  const int ls = resolved_layers_shared();
  if (ls < 1 || ls >= layers)
    throw std::invalid_argument("model config: layers_shared must be in [1, layers)");
  for (const auto& view : shortcut_views) {
    if (!view.options)
      throw std::invalid_argument("model config: branch views must keep options visible");
    if (view.passage && view.question)
      throw std::invalid_argument("model config: each shortcut view must hide a variable");
  }
}

data::VariableView Model::view_of(int branch) const {
  if (branch == 0) return data::VariableView::full();
  return cfg.shortcut_views[static_cast<std::size_t>(branch - 1)];
}

namespace {

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in = input width (cols).
void init_uniform(Mat& m, int fan_in, rng::Xoshiro256& r) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : m.a) x = r.real(-bound, bound);
}

Layer make_layer(int out, int in, rng::Xoshiro256& r) {
  Layer l{Mat(out, in), Mat(out, 1)};
  init_uniform(l.W, in, r);
  return l;  // biases start at zero
}

Branch make_branch(const ModelConfig& cfg, rng::Xoshiro256& r) {
  Branch b;
  const int n_top = cfg.layers - cfg.resolved_layers_shared();
  for (int i = 0; i < n_top; ++i)
    b.top.push_back(make_layer(cfg.hidden, cfg.hidden, r));
  b.clf_w = Mat(1, cfg.hidden);
  init_uniform(b.clf_w, cfg.hidden, r);
  b.clf_b = Mat(1, 1);
  return b;
}

Vec embed_mean_eager(const Mat& emb, const data::TokenSeq& ids) {
  if (ids.empty()) throw std::invalid_argument("encode: empty segment");
  Vec out(static_cast<std::size_t>(emb.cols), 0.0);
  for (int id : ids) {
    if (id < 0 || id >= emb.rows)
      throw std::invalid_argument("encode: token id out of vocabulary range");
    if (id == data::Vocabulary::null_id()) continue;
    const double* row = &emb.a[static_cast<std::size_t>(id) * emb.cols];
    for (int j = 0; j < emb.cols; ++j) out[static_cast<std::size_t>(j)] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(ids.size());
  for (double& x : out) x *= inv;
  return out;
}

Vec concat3(const Vec& a, const Vec& b, const Vec& c) {
  Vec out;
  out.reserve(a.size() + b.size() + c.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  out.insert(out.end(), c.begin(), c.end());
  return out;
}

Vec shared_stack_eager(const Model& m, const Vec& x) {
  Vec h = x;
  for (const auto& layer : m.shared)
    h = diffmath::tanh_vec(diffmath::affine(layer.W, h, layer.b.a));
  return h;
}

double branch_head_eager(const Branch& b, const Vec& feature) {
  Vec h = feature;
  for (const auto& layer : b.top)
    h = diffmath::tanh_vec(diffmath::affine(layer.W, h, layer.b.a));
  Vec logit = diffmath::affine(b.clf_w, h, b.clf_b.a);
  return logit[0];
}

}  // namespace

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.init_seed = seed;
  rng::Xoshiro256 r(rng::derive_seed(seed, "model-init"));

  m.embedding = Mat(cfg.vocab_size, cfg.d);
  init_uniform(m.embedding, cfg.d, r);
  for (int j = 0; j < cfg.d; ++j) m.embedding(data::Vocabulary::null_id(), j) = 0.0;

  const int ls = cfg.resolved_layers_shared();
  m.shared.push_back(make_layer(cfg.hidden, 3 * cfg.d, r));
  for (int i = 1; i < ls; ++i) m.shared.push_back(make_layer(cfg.hidden, cfg.hidden, r));

  const int n_branches = 1 + cfg.n_shortcut();
  for (int b = 0; b < n_branches; ++b) m.branches.push_back(make_branch(cfg, r));
  return m;
}

BranchOutput forward_branch(const Model& m, const data::McqaInstance& inst, int branch) {
  if (branch < 0 || branch >= static_cast<int>(m.branches.size()))
    throw std::invalid_argument("forward: branch index out of range");
  if (static_cast<int>(inst.options.size()) != m.cfg.k)
    throw std::invalid_argument("forward: instance has wrong option count");
  const data::McqaInstance view_inst = data::mute(inst, m.view_of(branch));
  const Vec mean_p = embed_mean_eager(m.embedding, view_inst.passage);
  const Vec mean_q = embed_mean_eager(m.embedding, view_inst.question);
  BranchOutput out;
  out.logits.resize(static_cast<std::size_t>(m.cfg.k));
  for (int k = 0; k < m.cfg.k; ++k) {
    const Vec mean_o =
        embed_mean_eager(m.embedding, view_inst.options[static_cast<std::size_t>(k)]);
    const Vec feat = shared_stack_eager(m, concat3(mean_p, mean_q, mean_o));
    out.logits[static_cast<std::size_t>(k)] =
        branch_head_eager(m.branches[static_cast<std::size_t>(branch)], feat);
  }
  out.probs = diffmath::softmax(out.logits);
  return out;
}

BranchOutput forward_all_muted(const Model& m, const data::McqaInstance& inst,
                               int branch) {
  data::McqaInstance nulled = inst;
  std::fill(nulled.passage.begin(), nulled.passage.end(), data::Vocabulary::null_id());
  std::fill(nulled.question.begin(), nulled.question.end(), data::Vocabulary::null_id());
  for (auto& o : nulled.options)
    std::fill(o.begin(), o.end(), data::Vocabulary::null_id());
  return forward_branch(m, nulled, branch);
}

// ===== tape forwards =====

diffmath::Var ParamBinder::use(const Mat& m, bool needs_grad) {
  for (const auto& [ptr, var] : bound_)
    if (ptr == &m) return var;
  diffmath::Var v = tape_->leaf(m, needs_grad);
  bound_.push_back({&m, v});
  return v;
}

diffmath::Var ParamBinder::find(const Mat& m) const {
  for (const auto& [ptr, var] : bound_)
    if (ptr == &m) return var;
  return {};
}

TapedBranch forward_branch_on_tape(ParamBinder& binder, const Model& m,
                                   const data::McqaInstance& inst, int branch,
                                   EncoderMode mode) {
  diffmath::Tape& t = binder.tape();
  const data::McqaInstance view_inst = data::mute(inst, m.view_of(branch));
  const Branch& br = m.branches[static_cast<std::size_t>(branch)];

  std::vector<diffmath::Var> features(static_cast<std::size_t>(m.cfg.k));
  if (mode == EncoderMode::kEagerConst) {
    const Vec mean_p = embed_mean_eager(m.embedding, view_inst.passage);
    const Vec mean_q = embed_mean_eager(m.embedding, view_inst.question);
    for (int k = 0; k < m.cfg.k; ++k) {
      const Vec mean_o = embed_mean_eager(
          m.embedding, view_inst.options[static_cast<std::size_t>(k)]);
      features[static_cast<std::size_t>(k)] =
          t.leaf(shared_stack_eager(m, concat3(mean_p, mean_q, mean_o)), false);
    }
  } else {
    diffmath::Var emb = binder.use(m.embedding, true);
    diffmath::Var mean_p = t.embed_mean(emb, view_inst.passage);
    diffmath::Var mean_q = t.embed_mean(emb, view_inst.question);
    for (int k = 0; k < m.cfg.k; ++k) {
      diffmath::Var mean_o =
          t.embed_mean(emb, view_inst.options[static_cast<std::size_t>(k)]);
      diffmath::Var h = t.concat({mean_p, mean_q, mean_o});
      for (const auto& layer : m.shared)
        h = t.tanh(t.affine(binder.use(layer.W, true), h, binder.use(layer.b, true)));
      features[static_cast<std::size_t>(k)] = h;
    }
  }

  std::vector<diffmath::Var> logits(static_cast<std::size_t>(m.cfg.k));
  for (int k = 0; k < m.cfg.k; ++k) {
    diffmath::Var h = features[static_cast<std::size_t>(k)];
    for (const auto& layer : br.top)
      h = t.tanh(t.affine(binder.use(layer.W, true), h, binder.use(layer.b, true)));
    diffmath::Var z = t.affine(binder.use(br.clf_w, true), h, binder.use(br.clf_b, true));
    logits[static_cast<std::size_t>(k)] = z;
  }
  TapedBranch out;
  out.logits = t.stack(logits);
  out.probs = t.softmax(out.logits);
  return out;
}

// ===== parameter registries =====

namespace {

void push_layer(std::vector<diffmath::ParamRef>& out, const std::string& prefix,
                Layer& l) {
  out.push_back({prefix + ".W", &l.W});
  out.push_back({prefix + ".b", &l.b});
}

void push_branch(std::vector<diffmath::ParamRef>& out, const std::string& prefix,
                 Branch& b) {
  for (std::size_t i = 0; i < b.top.size(); ++i)
    push_layer(out, prefix + ".top" + std::to_string(i), b.top[i]);
  out.push_back({prefix + ".clf_w", &b.clf_w});
  out.push_back({prefix + ".clf_b", &b.clf_b});
}

}  // namespace

std::vector<diffmath::ParamRef> all_params(Model& m) {
  std::vector<diffmath::ParamRef> out;
  out.push_back({"embedding", &m.embedding});
  for (std::size_t i = 0; i < m.shared.size(); ++i)
    push_layer(out, "shared" + std::to_string(i), m.shared[i]);
  for (std::size_t b = 0; b < m.branches.size(); ++b)
    push_branch(out, "branch" + std::to_string(b), m.branches[b]);
  return out;
}

std::vector<diffmath::ParamRef> robust_step_params(Model& m) {
  std::vector<diffmath::ParamRef> out;
  out.push_back({"embedding", &m.embedding});
  for (std::size_t i = 0; i < m.shared.size(); ++i)
    push_layer(out, "shared" + std::to_string(i), m.shared[i]);
  push_branch(out, "branch0", m.branches[0]);
  return out;
}

std::vector<diffmath::ParamRef> shortcut_head_params(Model& m, int n) {
  if (n < 1 || n > m.cfg.n_shortcut())
    throw std::invalid_argument("shortcut_head_params: branch index out of range");
  std::vector<diffmath::ParamRef> out;
  push_branch(out, "branch" + std::to_string(n), m.branches[static_cast<std::size_t>(n)]);
  return out;
}

diffmath::GradResult collect_grads(const ParamBinder& binder,
                                   const std::vector<diffmath::ParamRef>& params) {
  diffmath::GradResult res;
  for (const auto& p : params) {
    diffmath::Var v = binder.find(*p.m);
    Mat g(p.m->rows, p.m->cols);
    if (v.valid()) {
      g.a = binder.tape().grad(v);
    } else {
      res.off_tape.push_back(p.name);
    }
    res.grads.push_back(std::move(g));
  }
  return res;
}

// ===== checkpoints =====

namespace {

json layer_to_json(const Layer& l) {
  return json{{"w", l.W.a}, {"b", l.b.a}};
}

Layer layer_from_json(const json& j, int out, int in) {
  Layer l{Mat(out, in), Mat(out, 1)};
  l.W.a = j.at("w").get<Vec>();
  l.b.a = j.at("b").get<Vec>();
  if (l.W.a.size() != static_cast<std::size_t>(out) * static_cast<std::size_t>(in) ||
      l.b.a.size() != static_cast<std::size_t>(out))
    throw std::runtime_error("checkpoint: layer shape mismatch");
  return l;
}

json view_to_json(const data::VariableView& v) {
  return json{{"passage", v.passage}, {"question", v.question}, {"options", v.options}};
}

data::VariableView view_from_json(const json& j) {
  data::VariableView v;
  v.passage = j.at("passage").get<bool>();
  v.question = j.at("question").get<bool>();
  v.options = j.at("options").get<bool>();
  return v;
}

}  // namespace

std::string model_to_json(const Model& m) {
  json j;
  j["format"] = "cvcqa-model";
  j["version"] = 1;
  j["kind"] = m.cfg.n_shortcut() == 0 ? "ct" : "cvc";
  json views = json::array();
  for (const auto& v : m.cfg.shortcut_views) views.push_back(view_to_json(v));
  j["config"] = {{"d", m.cfg.d},
                 {"layers", m.cfg.layers},
                 {"layers_shared", m.cfg.resolved_layers_shared()},
                 {"hidden", m.cfg.hidden},
                 {"k", m.cfg.k},
                 {"vocab_size", m.cfg.vocab_size},
                 {"shortcut_views", views}};
  j["init_seed"] = m.init_seed;
  json shared = json::array();
  for (const auto& l : m.shared) shared.push_back(layer_to_json(l));
  json branches = json::array();
  for (const auto& b : m.branches) {
    json top = json::array();
    for (const auto& l : b.top) top.push_back(layer_to_json(l));
    branches.push_back(json{{"top", top}, {"clf_w", b.clf_w.a}, {"clf_b", b.clf_b.a}});
  }
  j["params"] = {{"embedding", m.embedding.a}, {"shared", shared}, {"branches", branches}};
  return j.dump() + "\n";
}

namespace {
Model model_fields_from_json(const json& j);
}  // namespace

Model model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("format") || !j["format"].is_string() ||
      j["format"].get<std::string>() != "cvcqa-model")
    throw std::runtime_error("checkpoint: not a model file");
  try {
    return model_fields_from_json(j);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed field: ") + e.what());
  }
}

namespace {
Model model_fields_from_json(const json& j) {
  const json& c = j.at("config");
  ModelConfig cfg;
  cfg.d = c.at("d").get<int>();
  cfg.layers = c.at("layers").get<int>();
  cfg.layers_shared = c.at("layers_shared").get<int>();
  cfg.hidden = c.at("hidden").get<int>();
  cfg.k = c.at("k").get<int>();
  cfg.vocab_size = c.at("vocab_size").get<int>();
  cfg.shortcut_views.clear();
  for (const auto& vj : c.at("shortcut_views")) cfg.shortcut_views.push_back(view_from_json(vj));
  cfg.validate();

  Model m;
  m.cfg = cfg;
  m.init_seed = j.at("init_seed").get<std::uint64_t>();
  const json& p = j.at("params");
  m.embedding = Mat(cfg.vocab_size, cfg.d);
  m.embedding.a = p.at("embedding").get<Vec>();
  if (m.embedding.a.size() !=
      static_cast<std::size_t>(cfg.vocab_size) * static_cast<std::size_t>(cfg.d))
    throw std::runtime_error("checkpoint: embedding shape mismatch");

  const int ls = cfg.resolved_layers_shared();
  const json& shared = p.at("shared");
  if (static_cast<int>(shared.size()) != ls)
    throw std::runtime_error("checkpoint: shared stack depth mismatch");
  for (int i = 0; i < ls; ++i)
    m.shared.push_back(layer_from_json(shared[static_cast<std::size_t>(i)], cfg.hidden,
                                       i == 0 ? 3 * cfg.d : cfg.hidden));

  const json& branches = p.at("branches");
  if (static_cast<int>(branches.size()) != 1 + cfg.n_shortcut())
    throw std::runtime_error("checkpoint: branch count mismatch");
  for (const auto& bj : branches) {
    Branch b;
    const json& top = bj.at("top");
    if (static_cast<int>(top.size()) != cfg.layers - ls)
      throw std::runtime_error("checkpoint: top stack depth mismatch");
    for (const auto& lj : top)
      b.top.push_back(layer_from_json(lj, cfg.hidden, cfg.hidden));
    b.clf_w = Mat(1, cfg.hidden);
    b.clf_w.a = bj.at("clf_w").get<Vec>();
    b.clf_b = Mat(1, 1);
    b.clf_b.a = bj.at("clf_b").get<Vec>();
    if (b.clf_w.a.size() != static_cast<std::size_t>(cfg.hidden) || b.clf_b.a.size() != 1)
      throw std::runtime_error("checkpoint: classifier shape mismatch");
    m.branches.push_back(std::move(b));
  }
  return m;
}
}  // namespace

void save_model(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << model_to_json(m);
}

Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return model_from_json(ss.str());
}

std::uint64_t model_hash(const Model& m) { return data::fnv1a64(model_to_json(m)); }

}  // namespace cvcqa::model

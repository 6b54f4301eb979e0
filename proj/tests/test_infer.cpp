// Counterfactual scoring rules, the calibration adaptor, method dispatch,
// and evaluation. Worked examples are hand-derived frozen constants.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "cvcqa/data.hpp"
#include "cvcqa/diffmath.hpp"
#include "cvcqa/infer.hpp"
#include "cvcqa/model.hpp"
#include "cvcqa/rng.hpp"
#include "cvcqa/train.hpp"

using namespace cvcqa;
using data::McqaInstance;
using diffmath::Vec;
using infer::CAdaptor;
using infer::CAdaptorConfig;
using infer::InferenceSpec;
using model::Model;
using model::ModelConfig;

namespace {

const data::CorpusBundle& bundle() {
  static const data::CorpusBundle b = [] {
    data::CorpusConfig cfg;
    cfg.train_size = 80;
    cfg.dev_size = 40;
    cfg.test_size = 40;
    return data::generate_corpus(cfg);
  }();
  return b;
}

ModelConfig cvc_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.layers = 3;
  cfg.layers_shared = 2;
  cfg.hidden = 12;
  cfg.k = 4;
  cfg.vocab_size = bundle().vocab.size();
  return cfg;
}

ModelConfig ct_config() {
  ModelConfig cfg = cvc_config();
  cfg.shortcut_views.clear();
  return cfg;
}

Vec random_probs(rng::Xoshiro256& r, int n) {
  Vec v(static_cast<std::size_t>(n));
  double s = 0.0;
  for (auto& x : v) {
    x = r.real(0.02, 1.0);
    s += x;
  }
  for (auto& x : v) x /= s;
  return v;
}

CAdaptor zero_adaptor(int k, int n_shortcut) {
  CAdaptor a = infer::init_adaptor(CAdaptorConfig{}, k, n_shortcut, 1);
  for (auto& net : a.nets) {
    std::fill(net.W1.a.begin(), net.W1.a.end(), 0.0);
    std::fill(net.b1.a.begin(), net.b1.a.end(), 0.0);
    std::fill(net.W2.a.begin(), net.W2.a.end(), 0.0);
    std::fill(net.b2.a.begin(), net.b2.a.end(), 0.0);
  }
  return a;
}

}  // namespace

// ===== the input-side rule =====

TEST_CASE("input-side scores match the worked example") {
  const Vec p_r = {0.05, 0.10, 0.35, 0.50};
  const Vec s = infer::cvc_iv_scores(p_r, {0.5}, {0.5});
  REQUIRE(s.size() == 4);
  CHECK(std::abs(s[0] - (-0.225)) <= 1e-12);
  CHECK(std::abs(s[1] - (-0.2)) <= 1e-12);
  CHECK(std::abs(s[2] - (-0.075)) <= 1e-12);
  CHECK(std::abs(s[3] - 0.0) <= 1e-12);
  CHECK(diffmath::argmax(s) == diffmath::argmax(p_r));
}

TEST_CASE("the input-side rule never changes the robust argmax") {
  rng::Xoshiro256 r(51);
  for (int trial = 0; trial < 300; ++trial) {
    const int k = 2 + static_cast<int>(r.below(4));
    const int n = 1 + static_cast<int>(r.below(3));
    const Vec p_r = random_probs(r, k);
    std::vector<double> c_s, c_r;
    for (int i = 0; i < n; ++i) {
      c_s.push_back(r.real(0.0, 1.0));
      c_r.push_back(r.real(0.0, 1.0));
    }
    const Vec s = infer::cvc_iv_scores(p_r, c_s, c_r);
    CHECK(diffmath::argmax(s) == diffmath::argmax(p_r));
  }
}

TEST_CASE("input-side rule validates its constants") {
  const Vec p_r = {0.5, 0.5};
  CHECK_THROWS_AS((void)infer::cvc_iv_scores(p_r, {0.5, 0.5}, {0.5}),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)infer::cvc_iv_scores(p_r, {}, {}), std::invalid_argument);
  CHECK_THROWS_AS((void)infer::cvc_iv_scores(p_r, {1.5}, {0.5}), std::invalid_argument);
  CHECK_THROWS_AS((void)infer::cvc_iv_scores(p_r, {0.5}, {-0.1}), std::invalid_argument);
}

// ===== the mediator-side rule =====

TEST_CASE("mediator-side scores match the worked example and flip the argmax") {
  const Vec p_r = {0.05, 0.10, 0.35, 0.50};
  const Vec p_s = {0.05, 0.05, 0.7, 0.2};
  const Vec c(4, 0.5);
  const Vec s = infer::cvc_mv_scores(p_r, {p_s}, {c});
  REQUIRE(s.size() == 4);
  CHECK(std::abs(s[0] - (-0.0225)) <= 1e-12);
  CHECK(std::abs(s[1] - (-0.02)) <= 1e-12);
  CHECK(std::abs(s[2] - (-0.105)) <= 1e-12);
  CHECK(std::abs(s[3] - 0.0) <= 1e-12);
  // the fused ensemble would follow the shortcut's favorite...
  const Vec fused = train::fuse(p_r, {p_s});
  CHECK(diffmath::argmax(fused) == 2);
  // ...the subtraction counteracts it and the reasoning answer wins
  CHECK(diffmath::argmax(s) == 3);
}

TEST_CASE("mediator-side scores are additive over branches") {
  rng::Xoshiro256 r(52);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + static_cast<int>(r.below(4));
    const Vec p_r = random_probs(r, k);
    const Vec p_s = random_probs(r, k);
    const Vec c(static_cast<std::size_t>(k), r.real(0.0, 1.0));
    const Vec one = infer::cvc_mv_scores(p_r, {p_s}, {c});
    const Vec two = infer::cvc_mv_scores(p_r, {p_s, p_s}, {c, c});
    for (int i = 0; i < k; ++i)
      CHECK(two[static_cast<std::size_t>(i)] ==
            doctest::Approx(2.0 * one[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(
      (void)infer::cvc_mv_scores({0.5, 0.5}, {{0.5, 0.5}}, {{0.5, 0.5}, {0.5, 0.5}}),
      std::invalid_argument);
  CHECK_THROWS_AS((void)infer::cvc_mv_scores({0.5, 0.5}, {{0.3, 0.3, 0.4}}, {{0.5, 0.5}}),
                  std::invalid_argument);
}

TEST_CASE("a zero reference reduces the mediator rule to fused scores") {
  rng::Xoshiro256 r(53);
  const Vec p_r = random_probs(r, 4);
  const Vec p_s = random_probs(r, 4);
  const Vec zero(4, 0.0);
  const Vec s = infer::cvc_mv_scores(p_r, {p_s}, {zero});
  const Vec fused = train::fuse(p_r, {p_s});
  for (int i = 0; i < 4; ++i)
    CHECK(s[static_cast<std::size_t>(i)] ==
          doctest::Approx(fused[static_cast<std::size_t>(i)]).epsilon(1e-14));
}

// ===== the adaptor =====

TEST_CASE("adaptor input width follows the enabled feature blocks") {
  CAdaptorConfig cfg;
  CHECK(cfg.input_dim(4) == 9);  // robust probs + shortcut probs + distance
  cfg.include_distance = false;
  CHECK(cfg.input_dim(4) == 8);
  cfg.include_probs = false;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // nothing left to feed
  cfg.include_distance = true;
  CHECK(cfg.input_dim(4) == 1);
  CHECK_NOTHROW(cfg.validate());
  cfg = CAdaptorConfig();
  cfg.hidden = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("adaptor initialization is deterministic and sized per branch") {
  const CAdaptor a = infer::init_adaptor(CAdaptorConfig{}, 4, 2, 9);
  const CAdaptor b = infer::init_adaptor(CAdaptorConfig{}, 4, 2, 9);
  CHECK(infer::adaptor_to_json(a) == infer::adaptor_to_json(b));
  CHECK(a.nets.size() == 2);
  CHECK(a.k == 4);
  const CAdaptor c = infer::init_adaptor(CAdaptorConfig{}, 4, 2, 10);
  CHECK(infer::adaptor_to_json(a) != infer::adaptor_to_json(c));
  CHECK_THROWS_AS((void)infer::init_adaptor(CAdaptorConfig{}, 1, 1, 9),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)infer::init_adaptor(CAdaptorConfig{}, 4, 0, 9),
                  std::invalid_argument);
}

TEST_CASE("an all-zero adaptor squashes to exactly one half") {
  const CAdaptor a = zero_adaptor(4, 2);
  rng::Xoshiro256 r(54);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec p_r = random_probs(r, 4);
    const Vec p_s = random_probs(r, 4);
    for (int n = 1; n <= 2; ++n) {
      const Vec c = infer::adaptor_c(a, n, p_r, p_s);
      REQUIRE(c.size() == 4);
      for (double x : c) CHECK(x == 0.5);  // logistic(0), bitwise
    }
  }
  CHECK_THROWS_AS((void)infer::adaptor_c(a, 0, random_probs(r, 4), random_probs(r, 4)),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)infer::adaptor_c(a, 3, random_probs(r, 4), random_probs(r, 4)),
                  std::invalid_argument);
}

TEST_CASE("adaptor outputs stay inside the open unit interval") {
  const CAdaptor a = infer::init_adaptor(CAdaptorConfig{}, 4, 1, 77);
  rng::Xoshiro256 r(55);
  for (int trial = 0; trial < 50; ++trial) {
    const Vec c = infer::adaptor_c(a, 1, random_probs(r, 4), random_probs(r, 4));
    for (double x : c) {
      CHECK(x > 0.0);
      CHECK(x < 1.0);
    }
  }
}

TEST_CASE("scalar-output adaptors broadcast one reference across options") {
  CAdaptorConfig cfg;
  cfg.scalar_output = true;
  const CAdaptor a = infer::init_adaptor(cfg, 4, 1, 3);
  rng::Xoshiro256 r(56);
  const Vec c = infer::adaptor_c(a, 1, random_probs(r, 4), random_probs(r, 4));
  for (double x : c) CHECK(x == c[0]);
}

TEST_CASE("adaptor json and file round-trips are byte-identical") {
  const CAdaptor a = infer::init_adaptor(CAdaptorConfig{}, 4, 2, 13);
  const std::string j = infer::adaptor_to_json(a);
  const CAdaptor b = infer::adaptor_from_json(j);
  CHECK(infer::adaptor_to_json(b) == j);
  const std::string dir = "/tmp/cvcqa_test_infer";
  std::filesystem::create_directories(dir);
  infer::save_adaptor(a, dir + "/a.json");
  const CAdaptor c = infer::load_adaptor(dir + "/a.json");
  CHECK(infer::adaptor_to_json(c) == j);
  CHECK_THROWS_AS((void)infer::load_adaptor(dir + "/missing.json"), std::runtime_error);
  CHECK_THROWS_AS((void)infer::adaptor_from_json("{\"format\":\"bogus\"}"),
                  std::runtime_error);
}

TEST_CASE("adaptor training moves only the adaptor") {
  const Model m = model::init_model(cvc_config(), 61);
  const std::string model_before = model::model_to_json(m);
  const std::uint64_t hash_before = model::model_hash(m);

  CAdaptor a = infer::init_adaptor(CAdaptorConfig{}, m.cfg.k, m.cfg.n_shortcut(), 5);
  const std::string adaptor_before = infer::adaptor_to_json(a);

  infer::AdaptorTrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 16;
  cfg.lr = 0.05;
  const auto losses = infer::train_c_adaptor(m, a, bundle().train, cfg);
  REQUIRE(losses.size() == 8);
  for (double l : losses) CHECK(std::isfinite(l));
  CHECK(losses.back() <= losses.front());  // it learns something
  CHECK(infer::adaptor_to_json(a) != adaptor_before);
  // the scored model is frozen throughout
  CHECK(model::model_to_json(m) == model_before);
  CHECK(model::model_hash(m) == hash_before);

  CAdaptor wrong = infer::init_adaptor(CAdaptorConfig{}, m.cfg.k, 2, 5);
  CHECK_THROWS_AS((void)infer::train_c_adaptor(m, wrong, bundle().train, cfg),
                  std::invalid_argument);
}

// ===== method dispatch =====

TEST_CASE("inference method names round-trip") {
  for (const char* name : {"ct", "np", "cvc-iv", "cvc-mv", "cvc-mv-adaptor",
                           "cvc-mv-js", "cvc-mv-euc"}) {
    const InferenceSpec spec = InferenceSpec::from_name(name);
    CHECK(spec.name() == name);
  }
  CHECK(InferenceSpec::from_name("cvc-iv").kind == InferenceSpec::Kind::kCvcIv);
  CHECK(InferenceSpec::from_name("cvc-mv-adaptor").c_source ==
        InferenceSpec::CSource::kAdaptor);
  CHECK(InferenceSpec::from_name("np").kind == InferenceSpec::Kind::kNp);
  CHECK_THROWS_AS((void)InferenceSpec::from_name("cvc"), std::invalid_argument);
  CHECK_THROWS_AS((void)InferenceSpec::from_name(""), std::invalid_argument);
}

TEST_CASE("fused prediction multiplies the live branch outputs") {
  const Model m = model::init_model(cvc_config(), 71);
  const McqaInstance& inst = bundle().dev.instances.front();
  const Vec np = infer::predict_np(m, inst);
  const Vec p_r = model::forward_branch(m, inst, 0).probs;
  std::vector<Vec> ps;
  for (int n = 1; n <= m.cfg.n_shortcut(); ++n)
    ps.push_back(model::forward_branch(m, inst, n).probs);
  const Vec fused = train::fuse(p_r, ps);
  for (std::size_t i = 0; i < np.size(); ++i)
    CHECK(np[i] == doctest::Approx(fused[i]).epsilon(1e-14));
}

TEST_CASE("method dispatch validates model compatibility") {
  const Model cvc = model::init_model(cvc_config(), 72);
  const Model ct = model::init_model(ct_config(), 72);
  const McqaInstance& inst = bundle().dev.instances.front();
  CHECK_THROWS_AS((void)infer::method_scores(cvc, InferenceSpec::from_name("ct"), inst),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)infer::method_scores(ct, InferenceSpec::from_name("np"), inst),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)infer::method_scores(ct, InferenceSpec::from_name("cvc-iv"), inst),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      (void)infer::method_scores(cvc, InferenceSpec::from_name("cvc-mv-adaptor"), inst),
      std::invalid_argument);  // adaptor pointer not attached
  CHECK_NOTHROW((void)infer::method_scores(ct, InferenceSpec::from_name("ct"), inst));
}

TEST_CASE("method scores agree with the probability-level rules") {
  const Model m = model::init_model(cvc_config(), 73);
  const McqaInstance& inst = bundle().dev.instances.front();
  const Vec p_r = model::forward_branch(m, inst, 0).probs;
  const Vec p_s = model::forward_branch(m, inst, 1).probs;

  InferenceSpec iv = InferenceSpec::from_name("cvc-iv");
  const Vec iv_scores = infer::method_scores(m, iv, inst);
  const Vec iv_want = infer::cvc_iv_scores(p_r, {iv.c_s}, {iv.c_r});
  for (std::size_t i = 0; i < iv_scores.size(); ++i)
    CHECK(iv_scores[i] == doctest::Approx(iv_want[i]).epsilon(1e-14));

  InferenceSpec mv = InferenceSpec::from_name("cvc-mv");
  mv.c_r = 0.3;
  const Vec mv_scores = infer::method_scores(m, mv, inst);
  const Vec mv_want = infer::cvc_mv_scores(p_r, {p_s}, {Vec(p_r.size(), 0.3)});
  for (std::size_t i = 0; i < mv_scores.size(); ++i)
    CHECK(mv_scores[i] == doctest::Approx(mv_want[i]).epsilon(1e-14));

  // distance-calibrated references broadcast the divergence as the constant
  InferenceSpec js = InferenceSpec::from_name("cvc-mv-js");
  const Vec js_scores = infer::method_scores(m, js, inst);
  const Vec js_want = infer::cvc_mv_scores(
      p_r, {p_s}, {Vec(p_r.size(), diffmath::js_divergence(p_r, p_s))});
  for (std::size_t i = 0; i < js_scores.size(); ++i)
    CHECK(js_scores[i] == doctest::Approx(js_want[i]).epsilon(1e-14));

  InferenceSpec euc = InferenceSpec::from_name("cvc-mv-euc");
  const Vec euc_scores = infer::method_scores(m, euc, inst);
  const Vec euc_want = infer::cvc_mv_scores(
      p_r, {p_s}, {Vec(p_r.size(), diffmath::half_sq_distance(p_r, p_s))});
  for (std::size_t i = 0; i < euc_scores.size(); ++i)
    CHECK(euc_scores[i] == doctest::Approx(euc_want[i]).epsilon(1e-14));

  // an attached zero adaptor equals the constant rule at c = 0.5
  const CAdaptor zero = zero_adaptor(m.cfg.k, m.cfg.n_shortcut());
  InferenceSpec ad = InferenceSpec::from_name("cvc-mv-adaptor");
  ad.adaptor = &zero;
  const Vec ad_scores = infer::method_scores(m, ad, inst);
  const Vec ad_want = infer::cvc_mv_scores(p_r, {p_s}, {Vec(p_r.size(), 0.5)});
  for (std::size_t i = 0; i < ad_scores.size(); ++i)
    CHECK(ad_scores[i] == doctest::Approx(ad_want[i]).epsilon(1e-14));
}

TEST_CASE("the all-muted probe is uniform for every branch") {
  const Model m = model::init_model(cvc_config(), 74);
  const auto outs = infer::predict_all_muted(m, bundle().dev.instances.front());
  REQUIRE(static_cast<int>(outs.size()) == 1 + m.cfg.n_shortcut());
  for (const auto& out : outs)
    for (double p : out.probs)
      CHECK(p == doctest::Approx(1.0 / m.cfg.k).epsilon(1e-14));
}

// ===== evaluation =====

TEST_CASE("evaluation aggregates match the per-record outcomes") {
  const Model m = model::init_model(cvc_config(), 75);
  const auto res = infer::evaluate(m, InferenceSpec::from_name("np"), bundle().dev);
  REQUIRE(res.records.size() == bundle().dev.size());
  CHECK(res.n == static_cast<int>(bundle().dev.size()));
  CHECK(res.n_true + res.n_false == res.n);
  int hits = 0, hits_true = 0, hits_false = 0;
  for (const auto& rec : res.records) {
    CHECK(rec.pred == diffmath::argmax(rec.scores));
    CHECK(rec.gold == bundle().dev.instances[static_cast<std::size_t>(rec.index)].answer);
    const bool hit = rec.pred == rec.gold;
    hits += hit ? 1 : 0;
    (rec.shortcut_flag ? hits_true : hits_false) += hit ? 1 : 0;
  }
  CHECK(res.accuracy == doctest::Approx(static_cast<double>(hits) / res.n).epsilon(1e-12));
  if (res.n_true > 0)
    CHECK(res.acc_shortcut_true ==
          doctest::Approx(static_cast<double>(hits_true) / res.n_true).epsilon(1e-12));
  if (res.n_false > 0)
    CHECK(res.acc_shortcut_false ==
          doctest::Approx(static_cast<double>(hits_false) / res.n_false).epsilon(1e-12));
}

TEST_CASE("evaluation records serialize one line per record") {
  const Model m = model::init_model(cvc_config(), 75);
  const auto res = infer::evaluate(m, InferenceSpec::from_name("np"), bundle().dev);
  const std::string jl = infer::records_to_jsonl("dev", "np", res.records);
  const std::size_t lines =
      static_cast<std::size_t>(std::count(jl.begin(), jl.end(), '\n'));
  CHECK(lines == res.records.size());
  CHECK(jl.find("\"dev\"") != std::string::npos);
  CHECK(infer::records_to_jsonl("dev", "np", res.records) == jl);
}

TEST_CASE("the mediator constant is tuned to the best dev accuracy, first wins") {
  const Model m = model::init_model(cvc_config(), 76);
  const auto& grid = infer::default_mv_grid();
  const double best = infer::tune_mv_constant(m, bundle().dev, grid);
  // recompute the sweep independently
  double best_acc = -1.0, first_best = 0.0;
  for (double c : grid) {
    InferenceSpec spec = InferenceSpec::from_name("cvc-mv");
    spec.c_r = c;
    const double acc = infer::evaluate(m, spec, bundle().dev).accuracy;
    if (acc > best_acc) {
      best_acc = acc;
      first_best = c;
    }
  }
  CHECK(best == first_best);
  // a degenerate duplicated grid picks the first entry
  CHECK(infer::tune_mv_constant(m, bundle().dev, {0.7, 0.7, 0.7}) == 0.7);
  CHECK_THROWS_AS((void)infer::tune_mv_constant(m, bundle().dev, {}),
                  std::invalid_argument);
}

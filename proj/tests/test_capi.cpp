// Exercises the C interface end to end: session/error-code contract, the
// experiment verbs on a miniature run directory, checkpoint handles, and
// instance scoring. Links only the shared library, so every check here goes
// through the exported C surface (artifacts are parsed with plain JSON).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cvcqa.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Session {
  cvcqa_session* s = cvcqa_session_new();
  ~Session() { cvcqa_session_free(s); }
  const char* err() const { return cvcqa_last_error(s); }
};

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kIniBody =
    "[corpus]\n"
    "train_size = 120\n"
    "dev_size = 48\n"
    "test_size = 48\n"
    "\n"
    "[model]\n"
    "d = 8\n"
    "layers = 3\n"
    "layers_shared = 2\n"
    "hidden = 12\n"
    "\n"
    "[train]\n"
    "targets = ct,cvc,adaptor\n"
    "epochs = 2\n"
    "batch_size = 16\n"
    "optimizer = adam\n"
    "lr = 0.01\n"
    "\n"
    "[adaptor]\n"
    "epochs = 2\n"
    "batch_size = 16\n"
    "lr = 0.05\n"
    "\n"
    "[attack]\n"
    "kinds = adv1,adv3\n";

struct PipelineResult {
  std::string root = "/tmp/cvcqa_test_capi";
  std::string run, ini;
  int rc_gen = -1, rc_attack = -1, rc_train = -1, rc_eval = -1, rc_mute = -1,
      rc_report = -1;
  std::string first_error;
};

PipelineResult run_pipeline() {
  PipelineResult r;
  r.run = r.root + "/run";
  r.ini = r.root + "/bench.ini";
  std::error_code ec;
  fs::remove_all(r.root, ec);
  fs::create_directories(r.root);
  {
    std::ofstream out(r.ini, std::ios::binary);
    out << "[experiment]\nout = " << r.run << "\nseed = 99\n\n" << kIniBody;
  }
  Session s;
  auto step = [&](int rc) {
    if (rc != CVCQA_OK && r.first_error.empty()) r.first_error = s.err();
    return rc;
  };
  r.rc_gen = step(cvcqa_gen_data(s.s, r.ini.c_str(), nullptr, nullptr));
  r.rc_attack = step(cvcqa_attack(s.s, r.ini.c_str(), nullptr, nullptr, nullptr));
  r.rc_train = step(cvcqa_train(s.s, r.ini.c_str(), nullptr, nullptr, nullptr));
  r.rc_eval = step(cvcqa_eval(s.s, r.ini.c_str(), nullptr,
                              "ct,np,cvc-iv,cvc-mv,cvc-mv-adaptor"));
  r.rc_mute = step(cvcqa_muting_study(s.s, r.ini.c_str(), nullptr));
  r.rc_report = step(cvcqa_report(s.s, r.run.c_str()));
  return r;
}

const PipelineResult& pipeline() {
  static const PipelineResult r = run_pipeline();
  return r;
}

struct Parsed {
  int k = 0, vocab_size = 0, answer = 0;
  std::vector<std::int32_t> passage, question, flat_options, option_lens;
};

Parsed first_dev_instance() {
  std::ifstream in(pipeline().run + "/data/dev.jsonl");
  REQUIRE(bool(in));
  std::string header, line;
  REQUIRE(std::getline(in, header));
  REQUIRE(std::getline(in, line));
  const auto h = nlohmann::json::parse(header);
  const auto j = nlohmann::json::parse(line);
  Parsed p;
  p.k = h.at("k").get<int>();
  p.vocab_size = h.at("vocab_size").get<int>();
  p.answer = j.at("answer").get<int>();
  p.passage = j.at("passage").get<std::vector<std::int32_t>>();
  p.question = j.at("question").get<std::vector<std::int32_t>>();
  for (const auto& opt : j.at("options")) {
    const auto toks = opt.get<std::vector<std::int32_t>>();
    p.option_lens.push_back(static_cast<std::int32_t>(toks.size()));
    p.flat_options.insert(p.flat_options.end(), toks.begin(), toks.end());
  }
  return p;
}

std::vector<double> predict_ok(cvcqa_session* s, const cvcqa_model* m,
                               const Parsed& p, const char* method,
                               std::int32_t* pred = nullptr) {
  std::vector<double> scores(static_cast<std::size_t>(p.k), -1.0);
  const int rc = cvcqa_predict(
      s, m, p.passage.data(), static_cast<std::int32_t>(p.passage.size()),
      p.question.data(), static_cast<std::int32_t>(p.question.size()),
      p.flat_options.data(), p.option_lens.data(), method, scores.data(), pred);
  CAPTURE(cvcqa_last_error(s));
  REQUIRE(rc == CVCQA_OK);
  return scores;
}

int argmax_of(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

TEST_CASE("version and session basics") {
  CHECK(std::string(cvcqa_version()) == "0.1.0");
  Session s;
  REQUIRE(s.s != nullptr);
  CHECK(std::string(s.err()).empty());
  CHECK(std::string(cvcqa_last_error(nullptr)) == "null session");
  cvcqa_session_free(nullptr);  // must be a no-op
}

TEST_CASE("argument and config problems are usage errors") {
  Session s;
  CHECK(cvcqa_gen_data(nullptr, "x.ini", nullptr, nullptr) == CVCQA_EUSAGE);
  CHECK(cvcqa_gen_data(s.s, nullptr, nullptr, nullptr) == CVCQA_EUSAGE);
  CHECK(std::string(s.err()).find("config path") != std::string::npos);
  CHECK(cvcqa_gen_data(s.s, "", nullptr, nullptr) == CVCQA_EUSAGE);
  CHECK(cvcqa_gen_data(s.s, "/tmp/cvcqa_missing.ini", nullptr, nullptr) ==
        CVCQA_EUSAGE);
  CHECK_FALSE(std::string(s.err()).empty());
  CHECK(cvcqa_gen_data(s.s, "/tmp/cvcqa_missing.ini", "/tmp/x", "abc") ==
        CVCQA_EUSAGE);
  CHECK(std::string(s.err()).find("not an unsigned integer") != std::string::npos);
  CHECK(cvcqa_report(s.s, nullptr) == CVCQA_EUSAGE);
}

TEST_CASE("experiment verbs build a complete run directory") {
  const PipelineResult& r = pipeline();
  CAPTURE(r.first_error);
  CHECK(r.rc_gen == CVCQA_OK);
  CHECK(r.rc_attack == CVCQA_OK);
  CHECK(r.rc_train == CVCQA_OK);
  CHECK(r.rc_eval == CVCQA_OK);
  CHECK(r.rc_mute == CVCQA_OK);
  CHECK(r.rc_report == CVCQA_OK);
  for (const char* rel :
       {"data/vocab.json", "data/train.jsonl", "data/dev.jsonl",
        "data/test_in.jsonl", "data/test_anti.jsonl", "attacks/test_in.adv1.jsonl",
        "attacks/test_in.adv1.report.json", "attacks/test_in.adv3.jsonl",
        "models/ct_seed1.json", "models/ct_seed1.history.csv",
        "models/cvc_seed1.json", "models/adaptor_seed1.json",
        "eval/metrics.csv", "eval/summary.json", "eval/report.md",
        "eval/muting.csv", "report.md", "gen-data.resolved.ini",
        "train.resolved.ini", "eval.resolved.ini"}) {
    CAPTURE(rel);
    CHECK(fs::exists(fs::path(r.run) / rel));
  }
  const std::string metrics = file_bytes(r.run + "/eval/metrics.csv");
  CHECK(metrics.rfind("seed,method,dataset,n,accuracy", 0) == 0);
  CHECK(metrics.find("cvc-mv-adaptor") != std::string::npos);
  CHECK(metrics.find("test_in.adv1") != std::string::npos);
  // success clears the error slot
  Session s;
  CHECK(cvcqa_report(s.s, r.run.c_str()) == CVCQA_OK);
  CHECK(std::string(s.err()).empty());
}

TEST_CASE("a valid config pointed at an empty directory is a runtime failure") {
  const PipelineResult& r = pipeline();
  Session s;
  const std::string empty = r.root + "/empty";
  fs::create_directories(empty);
  CHECK(cvcqa_eval(s.s, r.ini.c_str(), empty.c_str(), nullptr) == CVCQA_ERUNTIME);
  CHECK_FALSE(std::string(s.err()).empty());
}

TEST_CASE("data generation through the C interface is byte-deterministic") {
  const PipelineResult& r = pipeline();
  Session s;
  const std::string a = r.root + "/det_a";
  const std::string b = r.root + "/det_b";
  REQUIRE(cvcqa_gen_data(s.s, r.ini.c_str(), a.c_str(), "7") == CVCQA_OK);
  REQUIRE(cvcqa_gen_data(s.s, r.ini.c_str(), b.c_str(), "7") == CVCQA_OK);
  for (const char* rel : {"data/vocab.json", "data/train.jsonl", "data/test_anti.jsonl"})
    CHECK(file_bytes(a + "/" + rel) == file_bytes(b + "/" + rel));
  const std::string c = r.root + "/det_c";
  REQUIRE(cvcqa_gen_data(s.s, r.ini.c_str(), c.c_str(), "8") == CVCQA_OK);
  CHECK(file_bytes(a + "/data/train.jsonl") != file_bytes(c + "/data/train.jsonl"));
}

TEST_CASE("checkpoint handles expose the option count") {
  const PipelineResult& r = pipeline();
  REQUIRE(r.rc_train == CVCQA_OK);
  Session s;
  cvcqa_model* m = cvcqa_model_load(s.s, (r.run + "/models/cvc_seed1.json").c_str());
  REQUIRE(m != nullptr);
  CHECK(cvcqa_model_options(m) == 4);
  CHECK(cvcqa_model_options(nullptr) == -1);
  cvcqa_model_free(m);
  cvcqa_model_free(nullptr);  // must be a no-op
  CHECK(cvcqa_model_load(s.s, (r.run + "/models/nope.json").c_str()) == nullptr);
  CHECK_FALSE(std::string(s.err()).empty());
  CHECK(cvcqa_model_load(s.s, nullptr) == nullptr);
  // an adaptor checkpoint is not a model checkpoint
  CHECK(cvcqa_model_load(s.s, (r.run + "/models/adaptor_seed1.json").c_str()) == nullptr);
}

TEST_CASE("scoring through the C interface is internally consistent") {
  const PipelineResult& r = pipeline();
  REQUIRE(r.rc_train == CVCQA_OK);
  Session s;
  cvcqa_model* cvc = cvcqa_model_load(s.s, (r.run + "/models/cvc_seed1.json").c_str());
  REQUIRE(cvc != nullptr);
  const Parsed p = first_dev_instance();
  REQUIRE(p.k == 4);

  // One shortcut branch with placeholder constants 0.5 makes the input-side
  // scores an affine image of the robust distribution: s_i = p_r[i]/2 - 1/4.
  std::int32_t pred = -1;
  const auto iv = predict_ok(s.s, cvc, p, "cvc-iv", &pred);
  CHECK(pred == argmax_of(iv));
  std::vector<double> p_r;
  double sum_r = 0.0;
  for (double x : iv) {
    p_r.push_back(2.0 * x + 0.5);
    sum_r += p_r.back();
    CHECK(p_r.back() > 0.0);
    CHECK(p_r.back() < 1.0);
  }
  CHECK(sum_r == doctest::Approx(1.0).epsilon(1e-9));

  // Fused scores divide back into the shortcut branch's distribution.
  const auto np = predict_ok(s.s, cvc, p, "np");
  std::vector<double> p_s;
  double sum_s = 0.0;
  for (std::size_t i = 0; i < np.size(); ++i) {
    p_s.push_back(np[i] / p_r[i]);
    sum_s += p_s.back();
  }
  CHECK(sum_s == doctest::Approx(1.0).epsilon(1e-9));

  // The mediator-side rule with the default constant ties the three together.
  const auto mv = predict_ok(s.s, cvc, p, "cvc-mv");
  for (std::size_t i = 0; i < mv.size(); ++i)
    CHECK(mv[i] == doctest::Approx((p_r[i] - 0.5) * p_s[i]).epsilon(1e-9));

  // Distance-calibrated variants score without extra attachments.
  for (const char* method : {"cvc-mv-js", "cvc-mv-euc"}) {
    const auto scores = predict_ok(s.s, cvc, p, method);
    for (double x : scores) CHECK(std::isfinite(x));
  }

  // Repeat calls are bitwise identical.
  const auto iv2 = predict_ok(s.s, cvc, p, "cvc-iv");
  for (std::size_t i = 0; i < iv.size(); ++i) CHECK(iv[i] == iv2[i]);

  // The baseline handle scores with "ct" only.
  cvcqa_model* ct = cvcqa_model_load(s.s, (r.run + "/models/ct_seed1.json").c_str());
  REQUIRE(ct != nullptr);
  const auto ct_scores = predict_ok(s.s, ct, p, "ct");
  double sum_ct = 0.0;
  for (double x : ct_scores) sum_ct += x;
  CHECK(sum_ct == doctest::Approx(1.0).epsilon(1e-9));
  std::vector<double> tmp(4);
  CHECK(cvcqa_predict(s.s, ct, p.passage.data(),
                      static_cast<std::int32_t>(p.passage.size()), p.question.data(),
                      static_cast<std::int32_t>(p.question.size()),
                      p.flat_options.data(), p.option_lens.data(), "np", tmp.data(),
                      nullptr) == CVCQA_EUSAGE);
  CHECK(cvcqa_predict(s.s, cvc, p.passage.data(),
                      static_cast<std::int32_t>(p.passage.size()), p.question.data(),
                      static_cast<std::int32_t>(p.question.size()),
                      p.flat_options.data(), p.option_lens.data(), "ct", tmp.data(),
                      nullptr) == CVCQA_EUSAGE);
  cvcqa_model_free(ct);
  cvcqa_model_free(cvc);
}

TEST_CASE("scoring rejects malformed calls") {
  const PipelineResult& r = pipeline();
  REQUIRE(r.rc_train == CVCQA_OK);
  Session s;
  cvcqa_model* m = cvcqa_model_load(s.s, (r.run + "/models/cvc_seed1.json").c_str());
  REQUIRE(m != nullptr);
  const Parsed p = first_dev_instance();
  std::vector<double> scores(4);
  auto call = [&](const std::int32_t* passage, std::int32_t plen, const char* method,
                  double* out) {
    return cvcqa_predict(s.s, m, passage, plen, p.question.data(),
                         static_cast<std::int32_t>(p.question.size()),
                         p.flat_options.data(), p.option_lens.data(), method, out,
                         nullptr);
  };
  CHECK(call(p.passage.data(), static_cast<std::int32_t>(p.passage.size()), "bogus",
             scores.data()) == CVCQA_EUSAGE);
  CHECK(call(p.passage.data(), static_cast<std::int32_t>(p.passage.size()), "cvc-iv",
             nullptr) == CVCQA_EUSAGE);
  CHECK(call(nullptr, 3, "cvc-iv", scores.data()) == CVCQA_EUSAGE);
  CHECK(call(p.passage.data(), -1, "cvc-iv", scores.data()) == CVCQA_EUSAGE);
  const std::int32_t bad[] = {static_cast<std::int32_t>(p.vocab_size)};
  CHECK(call(bad, 1, "cvc-iv", scores.data()) == CVCQA_EUSAGE);
  CHECK(std::string(s.err()).find("vocabulary") != std::string::npos);
  CHECK(cvcqa_predict(nullptr, m, p.passage.data(), 1, nullptr, 0, p.flat_options.data(),
                      p.option_lens.data(), "cvc-iv", scores.data(),
                      nullptr) == CVCQA_EUSAGE);
  cvcqa_model_free(m);
}

TEST_CASE("an attached calibration network enables the adaptor method") {
  const PipelineResult& r = pipeline();
  REQUIRE(r.rc_train == CVCQA_OK);
  Session s;
  cvcqa_model* cvc = cvcqa_model_load(s.s, (r.run + "/models/cvc_seed1.json").c_str());
  REQUIRE(cvc != nullptr);
  const Parsed p = first_dev_instance();
  std::vector<double> scores(4);
  // before attaching: a usage error
  CHECK(cvcqa_predict(s.s, cvc, p.passage.data(),
                      static_cast<std::int32_t>(p.passage.size()), p.question.data(),
                      static_cast<std::int32_t>(p.question.size()),
                      p.flat_options.data(), p.option_lens.data(), "cvc-mv-adaptor",
                      scores.data(), nullptr) == CVCQA_EUSAGE);
  const std::string adaptor_path = r.run + "/models/adaptor_seed1.json";
  CHECK(cvcqa_model_attach_adaptor(s.s, nullptr, adaptor_path.c_str()) == CVCQA_EUSAGE);
  CHECK(cvcqa_model_attach_adaptor(s.s, cvc, (r.run + "/nope.json").c_str()) ==
        CVCQA_ERUNTIME);
  REQUIRE(cvcqa_model_attach_adaptor(s.s, cvc, adaptor_path.c_str()) == CVCQA_OK);
  std::int32_t pred = -1;
  const auto ad = predict_ok(s.s, cvc, p, "cvc-mv-adaptor", &pred);
  for (double x : ad) CHECK(std::isfinite(x));
  CHECK(pred == argmax_of(ad));
  cvcqa_model_free(cvc);

  // shape screening: a single-branch baseline cannot take this adaptor
  cvcqa_model* ct = cvcqa_model_load(s.s, (r.run + "/models/ct_seed1.json").c_str());
  REQUIRE(ct != nullptr);
  CHECK(cvcqa_model_attach_adaptor(s.s, ct, adaptor_path.c_str()) == CVCQA_ERUNTIME);
  CHECK(std::string(s.err()).find("does not match") != std::string::npos);
  cvcqa_model_free(ct);
}

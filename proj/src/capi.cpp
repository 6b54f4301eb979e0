#include "cvcqa.h"

#include <charconv>
#include <optional>
#include <stdexcept>
#include <string>

#include "cvcqa/bench.hpp"
#include "cvcqa/data.hpp"
#include "cvcqa/infer.hpp"
#include "cvcqa/model.hpp"

struct cvcqa_session {
  std::string error;
};

struct cvcqa_model {
  cvcqa::model::Model m;
  std::optional<cvcqa::infer::CAdaptor> adaptor;
};

namespace {

template <typename Fn>
int run(cvcqa_session* s, Fn&& fn) {
  if (!s) return CVCQA_EUSAGE;
  try {
    fn();
    s->error.clear();
    return CVCQA_OK;
  } catch (const cvcqa::bench::UsageError& e) {
    s->error = e.what();
    return CVCQA_EUSAGE;
  } catch (const std::invalid_argument& e) {
    s->error = e.what();
    return CVCQA_EUSAGE;
  } catch (const std::exception& e) {
    s->error = e.what();
    return CVCQA_ERUNTIME;
  }
}

std::string required(const char* value, const char* what) {
  if (!value || !*value)
    throw cvcqa::bench::UsageError(std::string(what) + " is required");
  return value;
}

cvcqa::bench::Overrides overrides(const char* out, const char* seed,
                                  const char* methods, const char* attacks,
                                  const char* augment) {
  cvcqa::bench::Overrides ov;
  if (out) ov.out = out;
  if (seed && *seed) {
    const std::string text = seed;
    const auto [p, ec] =
        std::from_chars(text.data(), text.data() + text.size(), ov.seed);
    if (ec != std::errc() || p != text.data() + text.size())
      throw cvcqa::bench::UsageError("--seed: '" + text + "' is not an unsigned integer");
    ov.has_seed = true;
  }
  if (methods) ov.methods = methods;
  if (attacks) ov.attacks = attacks;
  if (augment) ov.augment = augment;
  return ov;
}

}  // namespace

extern "C" {

const char* cvcqa_version(void) { return cvcqa::data::kToolVersion; }

cvcqa_session* cvcqa_session_new(void) { return new (std::nothrow) cvcqa_session; }

void cvcqa_session_free(cvcqa_session* s) { delete s; }

const char* cvcqa_last_error(const cvcqa_session* s) {
  return s ? s->error.c_str() : "null session";
}

int cvcqa_gen_data(cvcqa_session* s, const char* config_path, const char* out,
                   const char* seed) {
  return run(s, [&] {
    cvcqa::bench::gen_data(required(config_path, "config path"),
                           overrides(out, seed, nullptr, nullptr, nullptr));
  });
}

int cvcqa_attack(cvcqa_session* s, const char* config_path, const char* out,
                 const char* seed, const char* kinds) {
  return run(s, [&] {
    cvcqa::bench::attack(required(config_path, "config path"),
                         overrides(out, seed, nullptr, kinds, nullptr));
  });
}

int cvcqa_train(cvcqa_session* s, const char* config_path, const char* out,
                const char* seed, const char* augment) {
  return run(s, [&] {
    cvcqa::bench::train(required(config_path, "config path"),
                        overrides(out, seed, nullptr, nullptr, augment));
  });
}

int cvcqa_eval(cvcqa_session* s, const char* config_path, const char* out,
               const char* methods) {
  return run(s, [&] {
    cvcqa::bench::eval(required(config_path, "config path"),
                       overrides(out, nullptr, methods, nullptr, nullptr));
  });
}

int cvcqa_muting_study(cvcqa_session* s, const char* config_path, const char* out) {
  return run(s, [&] {
    cvcqa::bench::muting_study(required(config_path, "config path"),
                               overrides(out, nullptr, nullptr, nullptr, nullptr));
  });
}

int cvcqa_report(cvcqa_session* s, const char* run_dir) {
  return run(s, [&] { cvcqa::bench::report(required(run_dir, "run directory")); });
}

cvcqa_model* cvcqa_model_load(cvcqa_session* s, const char* path) {
  cvcqa_model* handle = nullptr;
  const int rc = run(s, [&] {
    handle = new cvcqa_model{
        cvcqa::model::load_model(required(path, "checkpoint path")), std::nullopt};
  });
  return rc == CVCQA_OK ? handle : nullptr;
}

void cvcqa_model_free(cvcqa_model* m) { delete m; }

int cvcqa_model_options(const cvcqa_model* m) { return m ? m->m.cfg.k : -1; }

int cvcqa_model_attach_adaptor(cvcqa_session* s, cvcqa_model* m, const char* path) {
  return run(s, [&] {
    if (!m) throw cvcqa::bench::UsageError("null model handle");
    cvcqa::infer::CAdaptor a = cvcqa::infer::load_adaptor(required(path, "adaptor path"));
    if (static_cast<int>(a.nets.size()) != m->m.cfg.n_shortcut() || a.k != m->m.cfg.k)
      throw std::runtime_error("adaptor shape does not match the model");
    m->adaptor = std::move(a);
  });
}

int cvcqa_predict(cvcqa_session* s, const cvcqa_model* m, const int32_t* passage,
                  int32_t passage_len, const int32_t* question, int32_t question_len,
                  const int32_t* options, const int32_t* option_lens,
                  const char* method, double* scores_out, int32_t* pred_out) {
  return run(s, [&] {
    namespace bench = cvcqa::bench;
    if (!m) throw bench::UsageError("null model handle");
    if (!scores_out) throw bench::UsageError("scores_out is required");
    if (!option_lens) throw bench::UsageError("option_lens is required");
    if (passage_len < 0 || question_len < 0)
      throw bench::UsageError("negative segment length");
    if (passage_len > 0 && !passage) throw bench::UsageError("null passage");
    if (question_len > 0 && !question) throw bench::UsageError("null question");

    const int k = m->m.cfg.k;
    const int vocab = m->m.cfg.vocab_size;
    cvcqa::data::McqaInstance inst;
    auto copy_tokens = [vocab](const int32_t* src, int32_t len) {
      cvcqa::data::TokenSeq out;
      for (int32_t i = 0; i < len; ++i) {
        if (src[i] < 0 || src[i] >= vocab)
          throw bench::UsageError("token id " + std::to_string(src[i]) +
                                  " outside the model vocabulary");
        out.push_back(src[i]);
      }
      return out;
    };
    inst.passage = copy_tokens(passage, passage_len);
    inst.question = copy_tokens(question, question_len);
    const int32_t* cursor = options;
    for (int i = 0; i < k; ++i) {
      if (option_lens[i] < 0) throw bench::UsageError("negative option length");
      if (option_lens[i] > 0 && !options) throw bench::UsageError("null options");
      inst.options.push_back(copy_tokens(cursor, option_lens[i]));
      cursor += option_lens[i];
    }

    cvcqa::infer::InferenceSpec spec =
        cvcqa::infer::InferenceSpec::from_name(required(method, "method name"));
    if (spec.c_source == cvcqa::infer::InferenceSpec::CSource::kAdaptor) {
      if (!m->adaptor)
        throw bench::UsageError("method 'cvc-mv-adaptor' needs an attached adaptor");
      spec.adaptor = &*m->adaptor;
    }
    const cvcqa::diffmath::Vec scores = cvcqa::infer::method_scores(m->m, spec, inst);
    for (int i = 0; i < k; ++i) scores_out[i] = scores[static_cast<std::size_t>(i)];
    if (pred_out) *pred_out = static_cast<int32_t>(cvcqa::diffmath::argmax(scores));
  });
}

}  // extern "C"

#include "cvcqa/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "cvcqa/attacks.hpp"
#include "cvcqa/config.hpp"
#include "cvcqa/data.hpp"
#include "cvcqa/infer.hpp"
#include "cvcqa/model.hpp"
#include "cvcqa/rng.hpp"
#include "cvcqa/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace cvcqa::bench {

namespace {

using config::Config;

struct Context {
  Config cfg;
  fs::path out;
  std::uint64_t master = 0;
};

Context resolve(const std::string& config_path, const Overrides& ov) {
  Context ctx;
  try {
    ctx.cfg = Config::load(config_path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  std::string out = !ov.out.empty() ? ov.out : ctx.cfg.get_string("experiment", "out", "");
  if (out.empty())
    throw UsageError("no output directory: set [experiment] out or pass --out");
  ctx.out = out;
  ctx.master = ov.has_seed ? ov.seed : ctx.cfg.get_uint("experiment", "seed", 42);
  return ctx;
}

fs::path data_dir(const Context& ctx) {
  const fs::path d = ctx.cfg.get_string("experiment", "data_dir", "data");
  return d.is_absolute() ? d : ctx.out / d;
}

void stamp(Config& echo, const Context& ctx) {
  echo.set("experiment", "out", ctx.out.generic_string());
  echo.set_uint("experiment", "seed", ctx.master);
  echo.set("meta", "tool_version", data::kToolVersion);
  echo.set("meta", "generator", rng::kGeneratorName);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + p.string());
  out << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string f6(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", x);
  return buf;
}

std::string pct2(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * x);
  return buf;
}

std::string hash_hex(std::uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double parse_double_token(const std::string& tok, const std::string& what) {
  double x = 0.0;
  const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
  if (ec != std::errc() || p != tok.data() + tok.size())
    throw UsageError(what + ": '" + tok + "' is not a number");
  return x;
}

std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& suffix) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() >= suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---- config -> module configs ----

data::CorpusConfig corpus_config_from(const Config& c, std::uint64_t master) {
  data::CorpusConfig cc;
  cc.k = static_cast<int>(c.get_int("corpus", "k", cc.k));
  cc.questions_per_passage = static_cast<int>(
      c.get_int("corpus", "questions_per_passage", cc.questions_per_passage));
  cc.beta = c.get_double("corpus", "beta", cc.beta);
  cc.entity_density = c.get_double("corpus", "entity_density", cc.entity_density);
  cc.theme_sentences =
      static_cast<int>(c.get_int("corpus", "theme_sentences", cc.theme_sentences));
  cc.passage_len_min =
      static_cast<int>(c.get_int("corpus", "passage_len_min", cc.passage_len_min));
  cc.passage_len_max =
      static_cast<int>(c.get_int("corpus", "passage_len_max", cc.passage_len_max));
  cc.train_size = static_cast<int>(c.get_int("corpus", "train_size", cc.train_size));
  cc.dev_size = static_cast<int>(c.get_int("corpus", "dev_size", cc.dev_size));
  cc.test_size = static_cast<int>(c.get_int("corpus", "test_size", cc.test_size));
  cc.seed = c.has("corpus", "seed") ? c.get_uint("corpus", "seed")
                                    : rng::derive_seed(master, "data");
  cc.vocab.keys_per_type =
      static_cast<int>(c.get_int("vocab", "keys_per_type", cc.vocab.keys_per_type));
  cc.vocab.entities_per_type = static_cast<int>(
      c.get_int("vocab", "entities_per_type", cc.vocab.entities_per_type));
  cc.vocab.n_themes = static_cast<int>(c.get_int("vocab", "n_themes", cc.vocab.n_themes));
  cc.vocab.n_fillers =
      static_cast<int>(c.get_int("vocab", "n_fillers", cc.vocab.n_fillers));
  cc.vocab.n_stops = static_cast<int>(c.get_int("vocab", "n_stops", cc.vocab.n_stops));
  return cc;
}

data::VariableView view_from_name(const std::string& name) {
  if (name == "full") return data::VariableView::full();
  if (name == "no_p") return data::VariableView::no_p();
  if (name == "no_q") return data::VariableView::no_q();
  if (name == "no_pq") return data::VariableView::no_pq();
  throw UsageError("unknown view '" + name + "' (expected full/no_p/no_q/no_pq)");
}

model::ModelConfig model_config_from(const Config& c, int k, int vocab_size, bool ct) {
  model::ModelConfig mc;
  mc.d = static_cast<int>(c.get_int("model", "d", mc.d));
  mc.layers = static_cast<int>(c.get_int("model", "layers", mc.layers));
  mc.layers_shared =
      static_cast<int>(c.get_int("model", "layers_shared", mc.layers_shared));
  mc.hidden = static_cast<int>(c.get_int("model", "hidden", mc.hidden));
  mc.k = k;
  mc.vocab_size = vocab_size;
  mc.shortcut_views.clear();
  if (!ct)
    for (const auto& name : c.get_strings("model", "shortcut_views", {"no_q"}))
      mc.shortcut_views.push_back(view_from_name(name));
  return mc;
}

// Keys may be scoped per training target: "[train] cvc_epochs = 5" overrides
// "[train] epochs" for the cvc target only. Lets the baseline train to
// convergence while the multi-branch run uses its own budget.
train::TrainConfig train_config_from(const Config& c, const std::string& target) {
  auto key = [&](const char* k) {
    const std::string scoped = target + "_" + k;
    return c.has("train", scoped) ? scoped : std::string(k);
  };
  train::TrainConfig tc;
  tc.epochs = static_cast<int>(c.get_int("train", key("epochs"), tc.epochs));
  tc.batch_size =
      static_cast<int>(c.get_int("train", key("batch_size"), tc.batch_size));
  tc.lr = c.get_double("train", key("lr"), tc.lr);
  tc.robust_lr = c.get_double("train", key("robust_lr"), tc.robust_lr);
  tc.optimizer = c.get_string("train", key("optimizer"), tc.optimizer);
  tc.loss_variant = c.get_string("train", key("loss_variant"), tc.loss_variant);
  tc.detach_shortcut_in_fusion = c.get_bool(
      "train", key("detach_shortcut_in_fusion"), tc.detach_shortcut_in_fusion);
  tc.track_accuracy =
      c.get_bool("train", key("track_accuracy"), tc.track_accuracy);
  return tc;
}

infer::CAdaptorConfig adaptor_config_from(const Config& c) {
  infer::CAdaptorConfig ac;
  ac.hidden = static_cast<int>(c.get_int("adaptor", "hidden", ac.hidden));
  ac.include_probs = c.get_bool("adaptor", "include_probs", ac.include_probs);
  ac.include_distance = c.get_bool("adaptor", "include_distance", ac.include_distance);
  ac.scalar_output = c.get_bool("adaptor", "scalar_output", ac.scalar_output);
  return ac;
}

// ---- dataset name resolution ----

bool looks_like_path(const std::string& name) {
  return name.find('/') != std::string::npos ||
         (name.size() > 6 && name.compare(name.size() - 6, 6, ".jsonl") == 0);
}

fs::path resolve_dataset(const Context& ctx, const std::string& name) {
  if (looks_like_path(name)) return fs::path(name);
  if (name.find(".adv") != std::string::npos)
    return ctx.out / "attacks" / (name + ".jsonl");
  return data_dir(ctx) / (name + ".jsonl");
}

fs::path resolve_augment(const Context& ctx, const std::string& name) {
  if (looks_like_path(name)) return fs::path(name);
  return ctx.out / "attacks" / (name + ".jsonl");
}

std::vector<std::string> replicate_labels(const Config& c) {
  return c.get_strings("train", "seeds", {"1"});
}

}  // namespace

// ===== gen-data =====

void gen_data(const std::string& config_path, const Overrides& ov) {
  Context ctx = resolve(config_path, ov);
  data::CorpusConfig base = corpus_config_from(ctx.cfg, ctx.master);
  const auto beta_tokens = ctx.cfg.get_strings("corpus", "betas", {});
  try {
    base.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  fs::create_directories(ctx.out);

  auto emit = [](const data::CorpusConfig& cc, const fs::path& dir) {
    cc.validate();
    const data::CorpusBundle bundle = data::generate_corpus(cc);
    fs::create_directories(dir);
    data::save_vocab(bundle.vocab, (dir / "vocab.json").string());
    data::save_jsonl(bundle.train, (dir / "train.jsonl").string());
    data::save_jsonl(bundle.dev, (dir / "dev.jsonl").string());
    data::save_jsonl(bundle.test_in, (dir / "test_in.jsonl").string());
    data::save_jsonl(bundle.test_anti, (dir / "test_anti.jsonl").string());
  };

  if (beta_tokens.empty()) {
    emit(base, data_dir(ctx));
  } else {
    for (const auto& tok : beta_tokens) {
      data::CorpusConfig cc = base;
      cc.beta = parse_double_token(tok, "[corpus] betas");
      if (cc.beta < 0.0 || cc.beta > 1.0)
        throw UsageError("[corpus] betas: '" + tok + "' out of [0,1]");
      cc.seed = rng::derive_seed(base.seed, "beta:" + tok);
      emit(cc, data_dir(ctx) / ("beta_" + tok));
    }
  }

  Config echo = ctx.cfg;
  stamp(echo, ctx);
  echo.set_int("corpus", "k", base.k);
  echo.set_int("corpus", "questions_per_passage", base.questions_per_passage);
  echo.set_double("corpus", "beta", base.beta);
  echo.set_double("corpus", "entity_density", base.entity_density);
  echo.set_int("corpus", "train_size", base.train_size);
  echo.set_int("corpus", "dev_size", base.dev_size);
  echo.set_int("corpus", "test_size", base.test_size);
  echo.set_uint("corpus", "seed", base.seed);
  echo.save((ctx.out / "gen-data.resolved.ini").string());
}

// ===== attack =====

void attack(const std::string& config_path, const Overrides& ov) {
  Context ctx = resolve(config_path, ov);
  const auto kind_names = !ov.attacks.empty()
                              ? config::split_list(ov.attacks)
                              : ctx.cfg.get_strings("attack", "kinds",
                                                    {"adv1", "adv2", "adv3", "adv4"});
  if (kind_names.empty()) throw UsageError("no attack kinds requested");
  std::vector<attacks::AttackKind> kinds;
  for (const auto& name : kind_names) {
    try {
      kinds.push_back(attacks::attack_from_name(name));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const std::string ds_name = ctx.cfg.get_string("attack", "dataset", "test_in");
  const std::uint64_t seed = ctx.cfg.has("attack", "seed")
                                 ? ctx.cfg.get_uint("attack", "seed")
                                 : rng::derive_seed(ctx.master, "attack");
  const fs::path ds_path = resolve_dataset(ctx, ds_name);
  const fs::path vocab_path =
      ctx.cfg.has("attack", "vocab") ? fs::path(ctx.cfg.get_string("attack", "vocab"))
                                     : data_dir(ctx) / "vocab.json";

  const data::Dataset input = data::load_jsonl(ds_path.string());
  const data::Vocabulary vocab = data::load_vocab(vocab_path.string());
  const std::string stem = fs::path(ds_name).stem().string();
  fs::create_directories(ctx.out / "attacks");

  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const attacks::AttackOutcome outcome = attacks::apply_attack(input, vocab, kinds[i], seed);
    const std::string base = stem + "." + attacks::attack_name(kinds[i]);
    data::save_jsonl(outcome.dataset, (ctx.out / "attacks" / (base + ".jsonl")).string());
    attacks::save_report(outcome.report,
                         (ctx.out / "attacks" / (base + ".report.json")).string());
  }

  Config echo = ctx.cfg;
  stamp(echo, ctx);
  echo.set("attack", "dataset", ds_name);
  echo.set_list("attack", "kinds", kind_names);
  echo.set_uint("attack", "seed", seed);
  echo.save((ctx.out / "attack.resolved.ini").string());
}

// ===== train =====

namespace {

std::vector<std::string> canonical_targets(const std::vector<std::string>& requested) {
  for (const auto& t : requested)
    if (t != "ct" && t != "cvc" && t != "adaptor")
      throw UsageError("unknown train target '" + t + "' (expected ct/cvc/adaptor)");
  std::vector<std::string> out;
  for (const char* t : {"ct", "cvc", "adaptor"})
    if (std::find(requested.begin(), requested.end(), t) != requested.end())
      out.push_back(t);
  return out;
}

}  // namespace

void train(const std::string& config_path, const Overrides& ov) {
  Context ctx = resolve(config_path, ov);
  const auto targets =
      canonical_targets(ctx.cfg.get_strings("train", "targets", {"ct", "cvc"}));
  const auto replicates = replicate_labels(ctx.cfg);
  const auto augment_names = !ov.augment.empty()
                                 ? config::split_list(ov.augment)
                                 : ctx.cfg.get_strings("train", "augment", {});
  for (const auto& target : targets) {
    if (target == "adaptor") continue;
    try {
      train_config_from(ctx.cfg, target).validate();
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }

  const fs::path dd = data_dir(ctx);
  const data::Vocabulary vocab = data::load_vocab((dd / "vocab.json").string());
  data::Dataset train_set = data::load_jsonl((dd / "train.jsonl").string());
  const data::Dataset dev_set = data::load_jsonl((dd / "dev.jsonl").string());
  if (!augment_names.empty()) {
    std::vector<data::Dataset> parts = {train_set};
    for (const auto& name : augment_names)
      parts.push_back(data::load_jsonl(resolve_augment(ctx, name).string()));
    train_set = data::merge(parts);
  }

  const std::uint64_t model_base = ctx.cfg.has("model", "seed")
                                       ? ctx.cfg.get_uint("model", "seed")
                                       : rng::derive_seed(ctx.master, "model");
  const std::uint64_t train_base = ctx.cfg.has("train", "seed")
                                       ? ctx.cfg.get_uint("train", "seed")
                                       : rng::derive_seed(ctx.master, "train");
  const fs::path models = ctx.out / "models";
  fs::create_directories(models);

  for (const auto& rep : replicates) {
    for (const auto& target : targets) {
      if (target == "ct" || target == "cvc") {
        const bool ct = target == "ct";
        model::ModelConfig mc =
            model_config_from(ctx.cfg, train_set.meta.k, vocab.size(), ct);
        try {
          mc.validate();
        } catch (const std::exception& e) {
          throw UsageError(e.what());
        }
        model::Model m = model::init_model(mc, rng::derive_seed(model_base, target + ":" + rep));
        train::TrainConfig tc = train_config_from(ctx.cfg, target);
        tc.seed = rng::derive_seed(train_base, target + ":" + rep);
        train::History hist;
        try {
          hist = ct ? train::train_ct(m, train_set, dev_set, tc)
                    : train::train_cvc(m, train_set, dev_set, tc);
        } catch (const std::exception& e) {
          // keep the partially trained parameters around for diagnosis
          model::save_model(
              m, (models / (target + "_seed" + rep + ".diverged.json")).string());
          throw std::runtime_error(std::string(e.what()) + " (partial checkpoint kept)");
        }
        model::save_model(m, (models / (target + "_seed" + rep + ".json")).string());
        write_text(models / (target + "_seed" + rep + ".history.csv"),
                   train::history_to_csv(hist, mc.n_shortcut()));
      } else {  // adaptor
        const fs::path cvc_path = models / ("cvc_seed" + rep + ".json");
        if (!fs::exists(cvc_path))
          throw std::runtime_error("adaptor training needs " + cvc_path.string() +
                                   "; train the cvc target first");
        const model::Model m = model::load_model(cvc_path.string());
        infer::CAdaptorConfig ac = adaptor_config_from(ctx.cfg);
        infer::CAdaptor a =
            infer::init_adaptor(ac, m.cfg.k, m.cfg.n_shortcut(),
                                rng::derive_seed(model_base, "adaptor:" + rep));
        infer::AdaptorTrainConfig atc;
        atc.epochs = static_cast<int>(ctx.cfg.get_int("adaptor", "epochs", atc.epochs));
        atc.batch_size =
            static_cast<int>(ctx.cfg.get_int("adaptor", "batch_size", atc.batch_size));
        atc.lr = ctx.cfg.get_double("adaptor", "lr", atc.lr);
        atc.seed = rng::derive_seed(train_base, "adaptor:" + rep);
        const std::vector<double> losses = infer::train_c_adaptor(m, a, train_set, atc);
        infer::save_adaptor(a, (models / ("adaptor_seed" + rep + ".json")).string());
        std::string csv = "epoch,loss\n";
        for (std::size_t e = 0; e < losses.size(); ++e) {
          char buf[48];
          std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", e + 1, losses[e]);
          csv += buf;
        }
        write_text(models / ("adaptor_seed" + rep + ".history.csv"), csv);
      }
    }
  }

  Config echo = ctx.cfg;
  stamp(echo, ctx);
  echo.set_list("train", "targets", targets);
  echo.set_list("train", "seeds", replicates);
  echo.set_list("train", "augment", augment_names);
  echo.set_uint("model", "seed", model_base);
  echo.set_uint("train", "seed", train_base);
  echo.save((ctx.out / "train.resolved.ini").string());
}

// ===== eval =====

void eval(const std::string& config_path, const Overrides& ov) {
  Context ctx = resolve(config_path, ov);
  std::vector<std::string> methods =
      !ov.methods.empty() ? config::split_list(ov.methods)
                          : ctx.cfg.get_strings("eval", "methods",
                                                {"ct", "np", "cvc-iv", "cvc-mv"});
  if (methods.empty()) throw UsageError("no evaluation methods requested");
  for (const auto& name : methods) {
    try {
      infer::InferenceSpec::from_name(name);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  // The ct baseline anchors the gain column; always measure it.
  if (std::find(methods.begin(), methods.end(), "ct") == methods.end())
    methods.insert(methods.begin(), "ct");

  std::vector<std::string> datasets = ctx.cfg.get_strings("eval", "datasets", {});
  if (datasets.empty()) {
    datasets = {"test_in", "test_anti"};
    for (const auto& p : sorted_files(ctx.out / "attacks", ".jsonl")) {
      std::string name = p.filename().string();
      name.resize(name.size() - 6);  // drop ".jsonl"
      datasets.push_back(name);
    }
  }
  const std::vector<double> grid =
      ctx.cfg.get_doubles("eval", "mv_grid", infer::default_mv_grid());
  const auto replicates = replicate_labels(ctx.cfg);
  const fs::path models = ctx.out / "models";

  const bool need_cvc = methods.size() > 1 ||
                        std::find(methods.begin(), methods.end(), "ct") == methods.end();
  const bool need_mv_const =
      std::find(methods.begin(), methods.end(), "cvc-mv") != methods.end();
  const bool need_adaptor =
      std::find(methods.begin(), methods.end(), "cvc-mv-adaptor") != methods.end();

  std::optional<data::Dataset> dev;
  if (need_mv_const)
    dev = data::load_jsonl((data_dir(ctx) / "dev.jsonl").string());

  std::vector<std::pair<std::string, data::Dataset>> loaded;
  for (const auto& name : datasets)
    loaded.emplace_back(name, data::load_jsonl(resolve_dataset(ctx, name).string()));

  std::string csv = "seed,method,dataset,n,accuracy,acc_shortcut_true,acc_shortcut_false\n";
  nlohmann::json summary;
  summary["tool_version"] = data::kToolVersion;
  summary["datasets"] = datasets;
  summary["methods"] = methods;

  // replicate -> method -> dataset -> accuracy (for the gain column)
  std::map<std::string, std::map<std::string, std::map<std::string, double>>> acc;

  for (const auto& rep : replicates) {
    const model::Model ct_model =
        model::load_model((models / ("ct_seed" + rep + ".json")).string());
    std::optional<model::Model> cvc_model;
    if (need_cvc)
      cvc_model = model::load_model((models / ("cvc_seed" + rep + ".json")).string());
    std::optional<infer::CAdaptor> adaptor;
    if (need_adaptor)
      adaptor =
          infer::load_adaptor((models / ("adaptor_seed" + rep + ".json")).string());
    double mv_c = 0.5;
    if (need_mv_const) {
      mv_c = infer::tune_mv_constant(*cvc_model, *dev, grid);
      summary["mv_constant"][rep] = mv_c;
    }

    for (const auto& [ds_name, ds] : loaded) {
      for (const auto& method : methods) {
        infer::InferenceSpec spec = infer::InferenceSpec::from_name(method);
        if (method == "cvc-mv") spec.c_r = mv_c;
        if (method == "cvc-mv-adaptor") spec.adaptor = &*adaptor;
        const model::Model& m = method == "ct" ? ct_model : *cvc_model;
        const infer::EvalResult res = infer::evaluate(m, spec, ds);
        acc[rep][method][ds_name] = res.accuracy;
        csv += rep + "," + method + "," + ds_name + "," + std::to_string(res.n) + "," +
               f6(res.accuracy) + "," + f6(res.acc_shortcut_true) + "," +
               f6(res.acc_shortcut_false) + "\n";
      }
    }

    // mean gain over the ct baseline across attacked sets
    std::vector<std::string> attacked;
    for (const auto& name : datasets)
      if (name.find("adv") != std::string::npos) attacked.push_back(name);
    for (const auto& method : methods) {
      if (method == "ct" || attacked.empty()) continue;
      double gain = 0.0;
      for (const auto& name : attacked)
        gain += acc[rep][method][name] - acc[rep]["ct"][name];
      gain /= static_cast<double>(attacked.size());
      summary["ag"][rep][method] = gain;
      csv += rep + "," + method + ",A.G.," + std::to_string(attacked.size()) + "," +
             f6(gain) + ",,\n";
    }
  }

  fs::create_directories(ctx.out / "eval");
  write_text(ctx.out / "eval" / "metrics.csv", csv);
  write_text(ctx.out / "eval" / "summary.json", summary.dump(2) + "\n");

  // Aligned markdown table: rows = methods, columns = datasets (+ gain),
  // cells = mean accuracy (percent) over replicates.
  std::vector<std::string> cols = datasets;
  cols.push_back("A.G.");
  std::vector<std::vector<std::string>> cells;
  for (const auto& method : methods) {
    std::vector<std::string> row;
    row.push_back(method);
    for (const auto& name : datasets) {
      double mean = 0.0;
      for (const auto& rep : replicates) mean += acc[rep][method][name];
      row.push_back(pct2(mean / static_cast<double>(replicates.size())));
    }
    if (method != "ct" && summary.contains("ag")) {
      double mean = 0.0;
      int n = 0;
      for (const auto& rep : replicates)
        if (summary["ag"].contains(rep) && summary["ag"][rep].contains(method)) {
          mean += summary["ag"][rep][method].get<double>();
          ++n;
        }
      row.push_back(n ? pct2(mean / n) : "-");
    } else {
      row.push_back("-");
    }
    cells.push_back(row);
  }
  std::vector<std::size_t> width(cols.size() + 1, 0);
  width[0] = std::string("method").size();
  for (std::size_t c = 0; c < cols.size(); ++c) width[c + 1] = cols[c].size();
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c)
      width[c] = std::max(width[c], row[c].size());
  auto pad = [](const std::string& s, std::size_t w) {
    return s + std::string(w - s.size(), ' ');
  };
  std::string md = "# Evaluation\n\nmean accuracy (%) over " +
                   std::to_string(replicates.size()) + " replicate(s)\n\n";
  md += "| " + pad("method", width[0]);
  for (std::size_t c = 0; c < cols.size(); ++c) md += " | " + pad(cols[c], width[c + 1]);
  md += " |\n|" + std::string(width[0] + 2, '-');
  for (std::size_t c = 0; c < cols.size(); ++c) md += "|" + std::string(width[c + 1] + 2, '-');
  md += "|\n";
  for (const auto& row : cells) {
    md += "| " + pad(row[0], width[0]);
    for (std::size_t c = 1; c < row.size(); ++c) md += " | " + pad(row[c], width[c]);
    md += " |\n";
  }
  write_text(ctx.out / "eval" / "report.md", md);

  Config echo = ctx.cfg;
  stamp(echo, ctx);
  echo.set_list("eval", "methods", methods);
  echo.set_list("eval", "datasets", datasets);
  echo.save((ctx.out / "eval.resolved.ini").string());
}

// ===== muting-study =====

void muting_study(const std::string& config_path, const Overrides& ov) {
  Context ctx = resolve(config_path, ov);
  const std::string ds_name = ctx.cfg.get_string("eval", "muting_dataset", "test_in");
  const data::Dataset ds = data::load_jsonl(resolve_dataset(ctx, ds_name).string());
  const auto replicates = replicate_labels(ctx.cfg);

  const std::pair<std::string, data::VariableView> views[] = {
      {"full", data::VariableView::full()},
      {"no_p", data::VariableView::no_p()},
      {"no_q", data::VariableView::no_q()},
      {"no_pq", data::VariableView::no_pq()},
  };

  std::string csv = "seed,view,dataset,n,accuracy\n";
  for (const auto& rep : replicates) {
    const model::Model m =
        model::load_model((ctx.out / "models" / ("ct_seed" + rep + ".json")).string());
    for (const auto& [view_name, view] : views) {
      int hits = 0;
      for (const auto& inst : ds.instances) {
        const data::McqaInstance muted = data::mute(inst, view);
        const model::BranchOutput out = model::forward_branch(m, muted, 0);
        hits += diffmath::argmax(out.probs) == inst.answer;
      }
      const double acc =
          ds.instances.empty() ? 0.0 : static_cast<double>(hits) / ds.instances.size();
      csv += rep + "," + view_name + "," + ds_name + "," +
             std::to_string(ds.instances.size()) + "," + f6(acc) + "\n";
    }
  }

  fs::create_directories(ctx.out / "eval");
  write_text(ctx.out / "eval" / "muting.csv", csv);

  Config echo = ctx.cfg;
  stamp(echo, ctx);
  echo.set("eval", "muting_dataset", ds_name);
  echo.save((ctx.out / "muting-study.resolved.ini").string());
}

// ===== report =====

namespace {

void embed_csv_table(std::string& md, const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  std::size_t cols = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) row.push_back(cell);
    if (line.back() == ',') row.push_back("");
    cols = std::max(cols, row.size());
    rows.push_back(std::move(row));
  }
  if (rows.empty()) return;
  std::vector<std::size_t> width(cols, 0);
  for (auto& row : rows) {
    row.resize(cols);
    for (std::size_t c = 0; c < cols; ++c) width[c] = std::max(width[c], row[c].size());
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    md += "|";
    for (std::size_t c = 0; c < cols; ++c)
      md += " " + rows[r][c] + std::string(width[c] - rows[r][c].size(), ' ') + " |";
    md += "\n";
    if (r == 0) {
      md += "|";
      for (std::size_t c = 0; c < cols; ++c) md += std::string(width[c] + 2, '-') + "|";
      md += "\n";
    }
  }
}

}  // namespace

void report(const std::string& run_dir) {
  const fs::path root = run_dir;
  std::string md = "# Benchmark run report\n\ntool version: ";
  md += data::kToolVersion;
  md += "\n";
  bool any = false;

  const auto inis = sorted_files(root, ".resolved.ini");
  if (!inis.empty()) {
    any = true;
    md += "\n## Configurations\n\n";
    for (const auto& p : inis)
      md += "- `" + p.filename().string() + "` (fnv1a " +
            hash_hex(data::fnv1a64(read_text(p))) + ")\n";
  }

  std::vector<fs::path> corpora;
  if (fs::is_directory(root / "data")) {
    if (fs::exists(root / "data" / "vocab.json")) corpora.push_back(root / "data");
    for (const auto& entry : fs::directory_iterator(root / "data"))
      if (entry.is_directory() && fs::exists(entry.path() / "vocab.json"))
        corpora.push_back(entry.path());
    std::sort(corpora.begin(), corpora.end());
  }
  if (!corpora.empty()) {
    any = true;
    md += "\n## Corpora\n\n";
    for (const auto& dir : corpora) {
      md += "### " + fs::relative(dir, root).generic_string() + "\n\n";
      for (const char* name : {"train", "dev", "test_in", "test_anti"}) {
        const fs::path p = dir / (std::string(name) + ".jsonl");
        if (!fs::exists(p)) continue;
        const std::string bytes = read_text(p);
        const data::Dataset d = data::dataset_from_jsonl(bytes);
        md += "- `" + std::string(name) + "`: " + std::to_string(d.instances.size()) +
              " instances, k=" + std::to_string(d.meta.k) +
              ", beta=" + config::format_double(d.meta.beta) + ", fnv1a " +
              hash_hex(data::fnv1a64(bytes)) + "\n";
      }
      md += "\n";
    }
  }

  const auto reports = sorted_files(root / "attacks", ".report.json");
  if (!reports.empty()) {
    any = true;
    md += "\n## Attacks\n\n";
    for (const auto& p : reports) {
      const nlohmann::json j = nlohmann::json::parse(read_text(p));
      md += "- `" + p.filename().string() + "`: " +
            std::to_string(j["counts"]["modified"].get<int>()) + "/" +
            std::to_string(j["counts"]["emitted"].get<int>()) + " modified\n";
    }
  }

  auto model_files = sorted_files(root / "models", ".json");
  if (!model_files.empty()) {
    any = true;
    md += "\n## Checkpoints\n\n";
    for (const auto& p : model_files) {
      const std::string bytes = read_text(p);
      const nlohmann::json j = nlohmann::json::parse(bytes);
      const std::string kind =
          j.contains("kind") ? j["kind"].get<std::string>() : "adaptor";
      md += "- `" + p.filename().string() + "` (" + kind + ", fnv1a " +
            hash_hex(data::fnv1a64(bytes)) + ")\n";
    }
  }

  if (fs::exists(root / "eval" / "metrics.csv")) {
    any = true;
    md += "\n## Metrics\n\n";
    embed_csv_table(md, read_text(root / "eval" / "metrics.csv"));
  }
  if (fs::exists(root / "eval" / "muting.csv")) {
    any = true;
    md += "\n## Muting study\n\n";
    embed_csv_table(md, read_text(root / "eval" / "muting.csv"));
  }

  if (!any) md += "\nNo runs found under '" + root.generic_string() + "'.\n";
  fs::create_directories(root);
  write_text(root / "report.md", md);
}

}  // namespace cvcqa::bench

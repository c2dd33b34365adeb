// SPDX-License-Identifier: Apache-2.0
//
// car_cli: corpus generation, pretraining, adaptation, evaluation, parameter
// budgets and the toy studies.
//
// Exit codes: 0 ok, 1 runtime/format error, 2 configuration error,
// 3 numerical failure.
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "car/harness.hpp"

namespace {

using namespace car;

Json read_config(const std::string& path) {
  if (path.empty()) return Json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

Json section(const Json& j, const char* key) { return j.contains(key) ? j.at(key) : Json::object(); }

void check_top_keys(const Json& j) {
  cfgio::check_keys(j, "config", {"model", "train", "study"});
}

void write_trace(const std::string& path, const TrainResult& r) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) out << i + 1 << "," << r.loss_trace[i] << "\n";
}

void print_budget(const BudgetReport& b, const std::string& scheme) {
  std::cout << "scheme " << scheme << "\n";
  std::cout << "total " << b.total_params << "\ntrainable " << b.trainable_params << "\nbackbone " << b.backbone_params
            << "\n";
  std::cout << std::fixed << std::setprecision(4) << "trainable/backbone " << 100 * b.trainable_vs_backbone()
            << "%\n";
  for (const auto& [m, s] : b.by_module) std::cout << "module " << m << " " << s.trainable << "/" << s.total << "\n";
  for (const auto& [r, s] : b.by_role) std::cout << "role " << r << " " << s.trainable << "/" << s.total << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continuous adaptation by reprogramming: toy ASR harness"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file");

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic language corpus");
  std::uint64_t lang_seed = 1, universe_seed = 7;
  std::size_t n_utts = 100, subset_size = 29, first_index = 0;
  double overlap = 1.0, proto_overlap = 1.0, sigma = 0.1;
  std::string out_path;
  gen->add_option("--lang-seed", lang_seed)->required();
  gen->add_option("--n-utts", n_utts)->required();
  gen->add_option("--subset-size", subset_size);
  gen->add_option("--overlap", overlap, "fraction of graphemes shared with ids 1..29");
  gen->add_option("--proto-overlap", proto_overlap, "fraction of graphemes with universal prototypes");
  gen->add_option("--universe-seed", universe_seed);
  gen->add_option("--sigma", sigma);
  gen->add_option("--first-index", first_index, "index of the first utterance (held-out splits)");
  gen->add_option("--out", out_path)->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "train a backbone from scratch");
  std::string corpus_path, ckpt_path, trace_path;
  std::uint64_t seed = 1;
  bool seed_set = false;
  pre->add_option("--corpus", corpus_path)->required();
  pre->add_option("--out", out_path)->required();
  pre->add_option("--trace", trace_path, "CSV loss trace");
  pre->add_option("--seed", seed)->each([&](const std::string&) { seed_set = true; });

  // adapt
  auto* ada = app.add_subcommand("adapt", "adapt a pretrained checkpoint with a scheme");
  std::string scheme = "CAR3";
  ada->add_option("--scheme", scheme)->required();
  ada->add_option("--checkpoint", ckpt_path)->required();
  ada->add_option("--corpus", corpus_path)->required();
  ada->add_option("--out", out_path)->required();
  ada->add_option("--trace", trace_path, "CSV loss trace");
  ada->add_option("--seed", seed)->each([&](const std::string&) { seed_set = true; });

  // eval
  auto* ev = app.add_subcommand("eval", "greedy-decode a corpus and report WER");
  ev->add_option("--checkpoint", ckpt_path)->required();
  ev->add_option("--corpus", corpus_path)->required();

  // params
  auto* par = app.add_subcommand("params", "parameter budget of a scheme");
  par->add_option("--scheme", scheme)->required();

  // study
  auto* st = app.add_subcommand("study", "run a toy study and print its report");
  int study_id = 1;
  std::string csv_path, pretrained;
  st->add_option("--id", study_id)->required()->check(CLI::Range(1, 3));
  st->add_option("--csv", csv_path);
  st->add_option("--pretrained", pretrained, "checkpoint(s) to reuse; study 2 takes single,mixed");
  st->add_option("--seed", seed, "single adaptation seed instead of the configured list")
      ->each([&](const std::string&) { seed_set = true; });
  bool quiet = false;
  st->add_flag("--quiet", quiet);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const Json cfg = read_config(config_path);
    check_top_keys(cfg);
    const ModelConfig model = model_from_json(section(cfg, "model"));
    TrainConfig train_cfg = train_from_json(section(cfg, "train"));
    if (seed_set) train_cfg.seed = seed;

    if (*gen) {
      LanguageParams p;
      p.name = "L" + std::to_string(lang_seed);
      p.universe_seed = universe_seed;
      p.lang_seed = lang_seed;
      p.subset_size = subset_size;
      p.reference = first_graphemes(29);
      p.overlap = overlap;
      p.proto_overlap = proto_overlap;
      p.sigma = sigma;
      const auto corpus = gen_language(make_language(p), n_utts, first_index);
      save_corpus(corpus, out_path);
      std::cout << "wrote " << corpus.size() << " utterances, coverage " << grapheme_coverage(corpus) << "/80\n";
    } else if (*pre) {
      const auto data = load_corpus(corpus_path);
      TrainResult trace;
      auto ck = pretrain_model(model, train_cfg, data, &std::cerr, &trace);
      save_checkpoint(ck, out_path);
      write_trace(trace_path, trace);
      std::cout << "final loss " << trace.loss_trace.back() << "\n";
    } else if (*ada) {
      const auto base = load_checkpoint(ckpt_path);
      if (cfg.contains("model")) digest_matches(base, model, &std::cerr);
      auto ck = prepare_adaptation(base, scheme, train_cfg.seed);
      train_cfg.scheme = ck.scheme;
      const auto data = load_corpus(corpus_path);
      const auto trace = train(train_cfg, ck.model, ck.ins, data, ck.store, &std::cerr);
      save_checkpoint(ck, out_path);
      write_trace(trace_path, trace);
      std::cout << "final loss " << trace.loss_trace.back() << "\n";
    } else if (*ev) {
      auto ck = load_checkpoint(ckpt_path);
      const auto data = load_corpus(corpus_path);
      std::cout << std::fixed << std::setprecision(4) << "WER " << evaluate_wer(ck.store, ck.model, ck.ins, data)
                << "\n";
    } else if (*par) {
      const auto s = build_scheme(scheme);
      auto store = init_backbone<float>(model, 1);
      std::mt19937_64 rng(1);
      apply_freezing_scheme(store, s, model.enc, model.rnnt, model.rp, model.ad, rng);
      print_budget(count_params(store), s.id);
    } else if (*st) {
      StudyConfig sc;
      if (cfg.contains("model")) sc.model = model;
      sc = study_from_json(section(cfg, "study"), sc);
      if (seed_set) sc.seeds = {seed};
      if (!pretrained.empty()) sc.pretrained = pretrained;
      const auto rep = run_study(study_id, sc, quiet ? nullptr : &std::cerr);
      std::cout << rep.to_text();
      if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw FormatError("cannot write '" + csv_path + "'");
        out << rep.to_csv();
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

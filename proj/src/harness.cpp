// SPDX-License-Identifier: Apache-2.0
#include "car/harness.hpp"

namespace car {

namespace cfgio {

void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace cfgio

Json to_json(const ModelConfig& c) {
  return Json{{"feature_dim", c.enc.feature_dim},
              {"model_dim", c.enc.model_dim},
              {"num_heads", c.enc.num_heads},
              {"conv_kernel", c.enc.conv_kernel},
              {"ffn_expansion", c.enc.ffn_expansion},
              {"block_layout", std::vector<std::size_t>(c.enc.block_layout.begin(), c.enc.block_layout.end())},
              {"time_stack_factor", c.enc.time_stack_factor},
              {"rel_pos_max_distance", c.enc.rel_pos_max_distance},
              {"group_norm_groups", c.enc.group_norm_groups},
              {"dropout", c.enc.dropout},
              {"strict_layout", c.enc.strict_layout},
              {"vocab_size", c.rnnt.vocab_size},
              {"embed_dim", c.rnnt.embed_dim},
              {"pred_dim", c.rnnt.pred_dim},
              {"pred_layers", c.rnnt.pred_layers},
              {"joint_dim", c.rnnt.joint_dim},
              {"reprogram_bottleneck", c.rp.bottleneck},
              {"reprogram_conv_groups", c.rp.conv_groups},
              {"reprogram_conv_taps", c.rp.conv_taps},
              {"reprogram_attn_kernel", c.rp.attn_kernel},
              {"adapter_bottleneck", c.ad.bottleneck},
              {"just", c.just},
              {"ssl_gamma", c.ssl.gamma},
              {"ssl_alpha", c.ssl.alpha},
              {"mask_ratio", c.ssl.mask_ratio},
              {"mask_span", c.ssl.mask_span},
              {"codebook_size", c.ssl.codebook_size},
              {"num_distractors", c.ssl.num_distractors},
              {"temperature", c.ssl.temperature},
              {"contrastive_layers", c.ssl.contrastive_layers}};
}

ModelConfig model_from_json(const Json& j, ModelConfig c) {
  cfgio::check_keys(j, "model",
                    {"feature_dim", "model_dim", "num_heads", "conv_kernel", "ffn_expansion", "block_layout",
                     "time_stack_factor", "rel_pos_max_distance", "group_norm_groups", "dropout", "strict_layout",
                     "vocab_size", "embed_dim", "pred_dim", "pred_layers", "joint_dim", "reprogram_bottleneck",
                     "reprogram_conv_groups", "reprogram_conv_taps", "reprogram_attn_kernel", "adapter_bottleneck",
                     "just", "ssl_gamma", "ssl_alpha", "mask_ratio", "mask_span", "codebook_size",
                     "num_distractors", "temperature", "contrastive_layers"});
  using cfgio::read;
  read(j, "feature_dim", c.enc.feature_dim);
  read(j, "model_dim", c.enc.model_dim);
  read(j, "num_heads", c.enc.num_heads);
  read(j, "conv_kernel", c.enc.conv_kernel);
  read(j, "ffn_expansion", c.enc.ffn_expansion);
  if (j.contains("block_layout")) {
    std::vector<std::size_t> v;
    read(j, "block_layout", v);
    if (v.size() != 3) throw ConfigError("block_layout needs three entries");
    std::copy(v.begin(), v.end(), c.enc.block_layout.begin());
  }
  read(j, "time_stack_factor", c.enc.time_stack_factor);
  read(j, "rel_pos_max_distance", c.enc.rel_pos_max_distance);
  read(j, "group_norm_groups", c.enc.group_norm_groups);
  read(j, "dropout", c.enc.dropout);
  read(j, "strict_layout", c.enc.strict_layout);
  read(j, "vocab_size", c.rnnt.vocab_size);
  read(j, "embed_dim", c.rnnt.embed_dim);
  read(j, "pred_dim", c.rnnt.pred_dim);
  read(j, "pred_layers", c.rnnt.pred_layers);
  read(j, "joint_dim", c.rnnt.joint_dim);
  read(j, "reprogram_bottleneck", c.rp.bottleneck);
  read(j, "reprogram_conv_groups", c.rp.conv_groups);
  read(j, "reprogram_conv_taps", c.rp.conv_taps);
  read(j, "reprogram_attn_kernel", c.rp.attn_kernel);
  read(j, "adapter_bottleneck", c.ad.bottleneck);
  read(j, "just", c.just);
  read(j, "ssl_gamma", c.ssl.gamma);
  read(j, "ssl_alpha", c.ssl.alpha);
  read(j, "mask_ratio", c.ssl.mask_ratio);
  read(j, "mask_span", c.ssl.mask_span);
  read(j, "codebook_size", c.ssl.codebook_size);
  read(j, "num_distractors", c.ssl.num_distractors);
  read(j, "temperature", c.ssl.temperature);
  read(j, "contrastive_layers", c.ssl.contrastive_layers);
  c.rnnt.enc_dim = c.enc.model_dim;
  c.validate();
  return c;
}

Json to_json(const Insertions& in) {
  return Json{{"input_reprogram", in.input_reprogram},
              {"latent_reprogram", in.latent_reprogram},
              {"extractor", extractor_name(in.extractor)},
              {"bridge", in.bridge.enabled},
              {"beta_hat", in.bridge.beta_hat},
              {"bridge_dropout", in.bridge.mode == BridgeMode::kDropout},
              {"share_weights", in.bridge.share_weights},
              {"adapters", in.adapters},
              {"extra_layer", in.extra_layer},
              {"probe", in.probe}};
}

Insertions insertions_from_json(const Json& j) {
  cfgio::check_keys(j, "insertions",
                    {"input_reprogram", "latent_reprogram", "extractor", "bridge", "beta_hat", "bridge_dropout",
                     "share_weights", "adapters", "extra_layer", "probe"});
  Insertions in;
  using cfgio::read;
  read(j, "input_reprogram", in.input_reprogram);
  read(j, "latent_reprogram", in.latent_reprogram);
  std::string ext = "none";
  read(j, "extractor", ext);
  in.extractor = parse_extractor(ext);
  read(j, "bridge", in.bridge.enabled);
  read(j, "beta_hat", in.bridge.beta_hat);
  bool drop = false;
  read(j, "bridge_dropout", drop);
  in.bridge.mode = drop ? BridgeMode::kDropout : BridgeMode::kScaled;
  read(j, "share_weights", in.bridge.share_weights);
  read(j, "adapters", in.adapters);
  read(j, "extra_layer", in.extra_layer);
  read(j, "probe", in.probe);
  return in;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Json to_json(const TrainConfig& t) {
  return Json{{"scheme", t.scheme},
              {"lr", t.lr},
              {"schedule", t.schedule == Schedule::kConstant ? "constant" : "inverse_sqrt"},
              {"warmup", t.warmup},
              {"adam_beta1", t.adam_beta1},
              {"adam_beta2", t.adam_beta2},
              {"eps", t.eps},
              {"batch_size", t.batch_size},
              {"steps", t.steps},
              {"seed", t.seed},
              {"clip", t.clip},
              {"backbone_lr", t.backbone_lr}};
}

TrainConfig train_from_json(const Json& j, TrainConfig t) {
  cfgio::check_keys(j, "train",
                    {"scheme", "lr", "schedule", "warmup", "adam_beta1", "adam_beta2", "eps", "batch_size", "steps",
                     "seed", "clip", "backbone_lr"});
  using cfgio::read;
  read(j, "scheme", t.scheme);
  read(j, "lr", t.lr);
  if (j.contains("schedule")) {
    std::string s;
    read(j, "schedule", s);
    if (s == "constant") t.schedule = Schedule::kConstant;
    else if (s == "inverse_sqrt") t.schedule = Schedule::kInverseSqrt;
    else throw ConfigError("schedule must be 'constant' or 'inverse_sqrt'");
  }
  read(j, "warmup", t.warmup);
  read(j, "adam_beta1", t.adam_beta1);
  read(j, "adam_beta2", t.adam_beta2);
  read(j, "eps", t.eps);
  read(j, "batch_size", t.batch_size);
  read(j, "steps", t.steps);
  read(j, "seed", t.seed);
  read(j, "clip", t.clip);
  read(j, "backbone_lr", t.backbone_lr);
  t.validate();
  return t;
}

TrainResult train(const TrainConfig& cfg, const ModelConfig& mc, const Insertions& ins, const Corpus& data,
                  ParamStore<float>& s, std::ostream* log) {
  cfg.validate();
  if (data.empty()) throw ContractError("train: empty corpus");
  TrainResult res;
  AdamState st;
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0x747261696eULL));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  bool any_trainable = false;
  for (const auto& e : s.entries()) any_trainable = any_trainable || e.trainable;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    s.zero_grad();
    double batch_loss = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& u = data[order[cursor++]];
      Graph<float> g(true, cfg.seed, step, any_trainable);
      auto l = utterance_loss(g, s, mc, ins, u.features, u.transcript, detail::mix_seed(cfg.seed, step * 4096 + b));
      if (!std::isfinite(l.parts.total)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " on utterance '" + u.id + "'");
      }
      batch_loss += l.parts.total;
      if (any_trainable) g.backward(ops::scale(l.total, 1.0f / static_cast<float>(cfg.batch_size)));
    }
    batch_loss /= static_cast<double>(cfg.batch_size);
    res.loss_trace.push_back(batch_loss);
    if (!any_trainable) continue;
    if (cfg.clip > 0) {
      double sq = 0;
      for (const auto& e : s.entries())
        if (e.trainable)
          for (auto v : e.grad.data()) sq += static_cast<double>(v) * v;
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) throw NumericError("non-finite gradient at step " + std::to_string(step));
      if (norm > cfg.clip) {
        const auto f = static_cast<float>(cfg.clip / norm);
        for (auto& e : s.entries())
          if (e.trainable)
            for (auto& v : e.grad.data()) v *= f;
      }
    }
    adam_step(s, st, cfg, cfg.lr_at(step));
    if (log && (step % 50 == 0 || step == cfg.steps)) {
      *log << "step " << step << " loss " << std::fixed << std::setprecision(4) << batch_loss << "\n";
    }
  }
  return res;
}

std::size_t edit_distance(const Transcript& ref, const Transcript& hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

double word_error_rate(const std::vector<Transcript>& refs, const std::vector<Transcript>& hyps) {
  if (refs.size() != hyps.size()) throw ContractError("wer: reference and hypothesis counts differ");
  std::size_t errs = 0, total = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    errs += edit_distance(refs[i], hyps[i]);
    total += refs[i].size();
  }
  if (total == 0) throw ContractError("wer: references are empty");
  return static_cast<double>(errs) / static_cast<double>(total);
}

double evaluate_wer(ParamStore<float>& s, const ModelConfig& mc, const Insertions& ins, const Corpus& data) {
  if (data.empty()) throw ContractError("evaluate_wer: empty corpus");
  std::vector<Transcript> refs, hyps;
  for (const auto& u : data) {
    refs.push_back(u.transcript);
    hyps.push_back(transcribe(s, mc, ins, u.features));
  }
  return word_error_rate(refs, hyps);
}

std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out(io::kCheckpointMagic, 4);
  io::put_le<std::uint32_t>(out, io::kCheckpointVersion);
  io::put_le<std::uint64_t>(out, config_digest(c.model));
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(kBlank));
  const std::string header = Json{{"model", to_json(c.model)}, {"insertions", to_json(c.ins)}, {"scheme", c.scheme}}.dump();
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.store.size()));
  for (const auto& e : c.store.entries()) {
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(e.role));
    out.push_back(static_cast<char>(e.trainable ? 1 : 0));
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : e.value.data()) io::put_f32(out, v);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  io::Reader r(bytes, "checkpoint");
  if (r.get_bytes(4) != std::string(io::kCheckpointMagic, 4)) throw FormatError("checkpoint: bad magic (expected CARP)");
  const auto version = r.get<std::uint32_t>();
  if (version != io::kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto digest = r.get<std::uint64_t>();
  if (r.get<std::uint32_t>() != static_cast<std::uint32_t>(kBlank)) throw FormatError("checkpoint: unexpected blank id");
  Json header;
  try {
    header = Json::parse(r.get_bytes(r.get<std::uint32_t>()));
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("checkpoint: corrupt header: ") + e.what());
  }
  Checkpoint c;
  c.model = model_from_json(header.at("model"));
  c.ins = insertions_from_json(header.at("insertions"));
  c.scheme = header.value("scheme", std::string("F0"));
  if (config_digest(c.model) != digest) throw FormatError("checkpoint: header does not match its digest");
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = r.get_bytes(r.get<std::uint32_t>());
    const auto role = r.get<std::uint8_t>();
    const auto trainable = r.get<std::uint8_t>();
    if (role > static_cast<std::uint8_t>(Role::kProbe)) throw FormatError("checkpoint: bad role tag for '" + name + "'");
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint32_t>();
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) v = r.get_f32();
    c.store.add(std::move(name), static_cast<Role>(role), Tensor<float>(std::move(shape), std::move(data)), trainable != 0);
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return c;
}

bool digest_matches(const Checkpoint& c, const ModelConfig& expected, std::ostream* warn) {
  const bool ok = config_digest(c.model) == config_digest(expected);
  if (!ok && warn) *warn << "warning: checkpoint config digest differs from the requested model config\n";
  return ok;
}

Checkpoint prepare_adaptation(const Checkpoint& base, const std::string& scheme_id, std::uint64_t seed) {
  Checkpoint c;
  c.model = base.model;
  c.store = base.store.cast<float>();
  const auto scheme = build_scheme(scheme_id);
  c.scheme = scheme.id;
  c.ins = scheme.ins;
  std::mt19937_64 rng(detail::mix_seed(seed, 0x61646170ULL));
  apply_freezing_scheme(c.store, scheme, c.model.enc, c.model.rnnt, c.model.rp, c.model.ad, rng);
  return c;
}

Json to_json(const StudyConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"universe_seed", c.universe_seed},
              {"sigma", c.sigma},
              {"pretrain_utts", c.pretrain_utts},
              {"adapt_utts", c.adapt_utts},
              {"test_utts", c.test_utts},
              {"target_languages", c.target_languages},
              {"pretrain", to_json(c.pretrain)},
              {"adapt", to_json(c.adapt)},
              {"seeds", c.seeds},
              {"schemes", c.schemes},
              {"pretrained", c.pretrained}};
}

StudyConfig study_from_json(const Json& j, StudyConfig c) {
  cfgio::check_keys(j, "study",
                    {"model", "universe_seed", "sigma", "pretrain_utts", "adapt_utts", "test_utts", "target_languages",
                     "pretrain", "adapt", "seeds", "schemes", "pretrained"});
  using cfgio::read;
  if (j.contains("model")) c.model = model_from_json(j.at("model"), c.model);
  read(j, "universe_seed", c.universe_seed);
  read(j, "sigma", c.sigma);
  read(j, "pretrain_utts", c.pretrain_utts);
  read(j, "adapt_utts", c.adapt_utts);
  read(j, "test_utts", c.test_utts);
  read(j, "target_languages", c.target_languages);
  if (j.contains("pretrain")) c.pretrain = train_from_json(j.at("pretrain"), c.pretrain);
  if (j.contains("adapt")) c.adapt = train_from_json(j.at("adapt"), c.adapt);
  read(j, "seeds", c.seeds);
  read(j, "schemes", c.schemes);
  read(j, "pretrained", c.pretrained);
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  if (c.target_languages < 1) throw ConfigError("target_languages must be >= 1");
  if (c.pretrain_utts < 2 || c.adapt_utts < 1 || c.test_utts < 1) throw ConfigError("corpus sizes must be >= 1");
  return c;
}

StudyLanguages study_languages(int study, const StudyConfig& c) {
  StudyLanguages L;
  const auto a_set = first_graphemes(29);
  L.source = make_language("A", c.universe_seed, 100, a_set, 1.0, c.sigma);
  if (study == 2) {
    LanguageParams b;
    b.name = "B";
    b.universe_seed = c.universe_seed;
    b.lang_seed = 300;
    b.subset_size = 30;
    b.reference = a_set;
    b.overlap = 8.0 / 30.0;
    b.proto_overlap = 1.0;
    b.sigma = c.sigma;
    L.second = make_language(b);
    // C: related to B. Half of its graphemes exist only in B, half only in
    // A; half of its prototypes are the shared ones.
    std::vector<int> b_only, a_only;
    std::set<int> bs(L.second.graphemes.begin(), L.second.graphemes.end());
    for (int g : L.second.graphemes)
      if (g > 29) b_only.push_back(g);
    for (int g : a_set)
      if (!bs.count(g)) a_only.push_back(g);
    std::vector<int> cg(b_only.begin(), b_only.begin() + 10);
    cg.insert(cg.end(), a_only.begin(), a_only.begin() + 10);
    for (std::size_t k = 0; k < c.target_languages; ++k) {
      // Rotate which graphemes keep the shared prototype per target.
      std::vector<int> g = cg;
      std::rotate(g.begin(), g.begin() + static_cast<std::ptrdiff_t>((5 * k) % g.size()), g.end());
      L.targets.push_back(make_language("C" + std::to_string(k + 1), c.universe_seed, 400 + k, g, 0.5, c.sigma));
    }
  } else {
    for (std::size_t k = 0; k < c.target_languages; ++k) {
      LanguageParams t;
      t.name = "B" + std::to_string(k + 1);
      t.universe_seed = c.universe_seed;
      t.lang_seed = 200 + k;
      t.subset_size = 20;
      t.reference = a_set;
      t.overlap = 1.0;
      t.proto_overlap = 0.0;
      t.sigma = c.sigma;
      L.targets.push_back(make_language(t));
    }
  }
  return L;
}

std::vector<std::string> default_schemes(int study) {
  switch (study) {
    case 1: return {"B0", "F0", "F1", "F1a", "F3", "F4", "F5", "CAR1", "CAR2", "CAR3"};
    case 2: return {"M0", "M1", "M2"};
    case 3: return {"J0", "J1", "J2", "J3", "J4"};
  }
  throw ConfigError("study id must be 1, 2 or 3");
}

Checkpoint pretrain_model(const ModelConfig& mc, const TrainConfig& tc, const Corpus& data,
                          std::ostream* log, TrainResult* trace) {
  Checkpoint c;
  c.model = mc;
  c.scheme = "F0";
  c.store = init_backbone<float>(mc, detail::mix_seed(tc.seed, 0x696e6974ULL));
  auto res = train(tc, mc, c.ins, data, c.store, log);
  if (trace) *trace = std::move(res);
  return c;
}

double adapt_and_score(const Checkpoint& base, const std::string& scheme, std::uint64_t seed,
                       const StudyConfig& c, const std::vector<LanguageSpec>& targets, BudgetReport* budget) {
  double sum = 0;
  for (const auto& lang : targets) {
    auto ad = prepare_adaptation(base, scheme, seed);
    if (budget) *budget = count_params(ad.store);
    auto tc = c.adapt;
    tc.seed = seed;
    tc.scheme = scheme;
    const bool frozen = count_params(ad.store).trainable_params == 0;
    if (!frozen) train(tc, ad.model, ad.ins, gen_language(lang, c.adapt_utts), ad.store);
    sum += evaluate_wer(ad.store, ad.model, ad.ins, gen_language(lang, c.test_utts, kTestOffset));
  }
  return sum / static_cast<double>(targets.size());
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

ExperimentReport run_study(int study, StudyConfig c, std::ostream* log) {
  if (study < 1 || study > 3) throw ConfigError("study id must be 1, 2 or 3");
  const auto schemes = c.schemes.empty() ? default_schemes(study) : c.schemes;
  if (study == 3) {
    c.model.just = true;
    c.model.enc.time_stack_factor = 1;
    c.model.enc.block_layout = {2, 1, 1};
    c.model.ssl.contrastive_layers = 2;
  }
  c.model.validate();
  const auto L = study_languages(study, c);

  struct Pretrained {
    std::string label;
    Checkpoint ckpt;
    std::size_t coverage;
  };
  std::vector<Pretrained> bases;
  auto load_or_train = [&](const std::string& label, const Corpus& data, const std::string& path) {
    Checkpoint ck;
    if (!path.empty()) {
      if (!std::filesystem::exists(path)) {
        throw ConfigError("pretrained checkpoint '" + path + "' not found; create it with `car_cli pretrain --out " +
                          path + "`");
      }
      ck = load_checkpoint(path);
      if (config_digest(ck.model) != config_digest(c.model)) {
        throw ConfigError("pretrained checkpoint '" + path + "' was built with a different model config");
      }
    } else {
      if (log) *log << "pretraining " << label << " on " << data.size() << " utterances\n";
      ck = pretrain_model(c.model, c.pretrain, data, log);
    }
    bases.push_back({label, std::move(ck), grapheme_coverage(data)});
  };
  const auto paths = split_csv(c.pretrained);
  if (study == 2) {
    Corpus single = gen_language(L.source, c.pretrain_utts);
    Corpus mixed = gen_language(L.source, c.pretrain_utts / 2);
    auto second = gen_language(L.second, c.pretrain_utts - c.pretrain_utts / 2);
    mixed.insert(mixed.end(), second.begin(), second.end());
    load_or_train("A", single, paths.size() > 0 ? paths[0] : "");
    load_or_train("A+B", mixed, paths.size() > 1 ? paths[1] : "");
  } else {
    load_or_train("A", gen_language(L.source, c.pretrain_utts), paths.empty() ? "" : paths[0]);
  }

  ExperimentReport rep;
  static const char* titles[] = {"", "Study 1: adapting a source-language model to unseen target languages",
                                 "Study 2: single- vs mixed-language pretraining, adapted to a related language",
                                 "Study 3: joint supervised + self-supervised model, adapted to target languages"};
  rep.title = titles[study];
  for (auto& base : bases) {
    const double src_wer = evaluate_wer(base.ckpt.store, base.ckpt.model, base.ckpt.ins,
                                        gen_language(study == 2 && base.label == "A+B" ? L.second : L.source,
                                                     c.test_utts, kTestOffset));
    std::ostringstream n;
    n << "pretrained " << base.label << ": held-out source WER " << std::fixed << std::setprecision(1)
      << 100 * src_wer << "%, coverage " << base.coverage << "/80";
    rep.notes.push_back(n.str());
    for (const auto& scheme : schemes) {
      ReportRow row;
      row.label = study == 2 ? base.label + "/" + scheme : scheme;
      BudgetReport budget;
      for (auto seed : c.seeds) {
        const double w = adapt_and_score(base.ckpt, scheme, seed, c, L.targets, &budget);
        row.wers.push_back(w);
        if (log) *log << row.label << " seed " << seed << " WER " << std::fixed << std::setprecision(3) << w << "\n";
      }
      row.trainable = budget.trainable_params;
      row.total = budget.total_params;
      row.backbone = budget.backbone_params;
      row.coverage = base.coverage;
      rep.rows.push_back(std::move(row));
    }
  }
  std::ostringstream n;
  n << c.seeds.size() << " seeds per scheme, macro-averaged over " << L.targets.size()
    << " target language(s); WER is token-level";
  rep.notes.push_back(n.str());
  return rep;
}

}  // namespace car

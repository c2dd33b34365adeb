// SPDX-License-Identifier: Apache-2.0
//
// Full transducer model: conformer encoder (+ inserted modules), predictor,
// joint network, optional probe, and optionally the self-supervised heads.
#pragma once

#include <random>
#include <string>

#include "car/conformer.hpp"
#include "car/errors.hpp"
#include "car/graph.hpp"
#include "car/ops.hpp"
#include "car/param_store.hpp"
#include "car/peft.hpp"
#include "car/reprogram.hpp"
#include "car/ssl.hpp"
#include "car/transducer.hpp"

namespace car {

struct ModelConfig {
  ConformerConfig enc;
  TransducerConfig rnnt;
  ReprogramConfig rp;
  AdapterConfig ad;
  SslConfig ssl;
  /// Adds the self-supervised heads and losses (contrastive net = first
  /// ssl.contrastive_layers encoder layers, MLM net = the rest).
  bool just = false;

  void validate() const {
    enc.validate();
    rnnt.validate();
    rp.validate();
    if (rnnt.enc_dim != enc.model_dim) throw ConfigError("transducer enc_dim must equal encoder model_dim");
    if (just) {
      ssl.validate();
      if (enc.time_stack_factor != 1) throw ConfigError("the self-supervised model runs without time stacking");
      if (ssl.contrastive_layers == 0 || ssl.contrastive_layers >= enc.num_layers()) {
        throw ConfigError("contrastive_layers must leave at least one MLM layer");
      }
    }
  }
};

/// Pretrainable parameters: encoder, decoder and (for the joint objective)
/// the mask embedding, codebook and MLM head.
template <std::floating_point T>
ParamStore<T> init_backbone(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamStore<T> s;
  init_encoder(s, cfg.enc, rng);
  init_predictor(s, cfg.rnnt, rng);
  init_joint(s, cfg.rnnt, rng);
  if (cfg.just) {
    const std::size_t d = cfg.enc.model_dim;
    s.add("ssl.mask_emb", Role::kWeight, uniform_init<T>({d}, T(0.5), rng));
    s.add("ssl.codebook", Role::kWeight, uniform_init<T>({cfg.ssl.codebook_size, d}, T(1), rng));
    s.add("ssl.mlm_head.w", Role::kWeight, glorot<T>(d, cfg.ssl.codebook_size, rng));
    s.add("ssl.mlm_head.b", Role::kBias, Tensor<T>({cfg.ssl.codebook_size}));
  }
  return s;
}

/// Encoder hooks realising the scheme's inserted modules.
template <std::floating_point T>
EncoderHooks<T> insertion_hooks(Graph<T>& g, ParamStore<T>& s, const ModelConfig& cfg, const Insertions& ins) {
  EncoderHooks<T> hooks;
  if (ins.input_reprogram || ins.adapters) {
    hooks.set(0, [&g, &s, ins](Var<T> x, std::optional<Var<T>>) {
      if (ins.input_reprogram) x = input_reprogram(g, s, "rp.in", x);
      if (ins.adapters) x = adapter_forward(g, s, "ad.in", x);
      return x;
    });
  }
  if (ins.latent_reprogram || ins.adapters) {
    for (std::size_t i = 1; i < cfg.enc.num_layers(); ++i) {
      const std::size_t width = cfg.enc.layer_dim(i);
      const auto rp = insertion_prefix("rp", i, width, ins.bridge.share_weights);
      const auto ad = insertion_prefix("ad", i, width, false);
      hooks.set(i, [&g, &s, ins, rp, ad, i](Var<T> h, std::optional<Var<T>> prev) {
        if (ins.latent_reprogram) h = latent_reprogram(g, s, rp, h, prev, ins.bridge, i);
        if (ins.adapters) h = adapter_forward(g, s, ad, h);
        return h;
      });
    }
  }
  return hooks;
}

template <std::floating_point T>
LogitTransform<T> logit_transform(Graph<T>& g, ParamStore<T>& s, const Insertions& ins) {
  if (!ins.probe) return {};
  return [&g, &s](Var<T> logits) { return linear_probe_head(g, s, logits); };
}

/// Encoder output [T' x d] including any appended extra layer.
template <std::floating_point T>
EncoderOutput<T> encode(Graph<T>& g, ParamStore<T>& s, const ModelConfig& cfg, const Insertions& ins,
                        const Tensor<T>& features, EncoderHooks<T> hooks) {
  auto out = encoder_forward(g, s, cfg.enc, features, hooks);
  if (ins.extra_layer) {
    out.out = conformer_block_forward(g, s, "extra.layer", out.out, cfg.enc, cfg.enc.num_layers() + 1);
  }
  return out;
}

template <std::floating_point T>
Var<T> encode(Graph<T>& g, ParamStore<T>& s, const ModelConfig& cfg, const Insertions& ins, const Tensor<T>& features) {
  return encode(g, s, cfg, ins, features, insertion_hooks(g, s, cfg, ins)).out;
}

struct LossParts {
  double rnnt = 0, contrastive = 0, mlm = 0, diversity = 0, total = 0;
};

template <std::floating_point T>
struct UtteranceLoss {
  Var<T> total;
  LossParts parts;
};

/// Training objective of one utterance. The self-supervised terms are only
/// active on training graphs of a joint-objective model; `mask_seed` fixes
/// the sampled spans and distractors.
template <std::floating_point T>
UtteranceLoss<T> utterance_loss(Graph<T>& g, ParamStore<T>& s, const ModelConfig& cfg, const Insertions& ins,
                                const Tensor<T>& features, const Transcript& transcript, std::uint64_t mask_seed = 0) {
  auto hooks = insertion_hooks(g, s, cfg, ins);
  const bool ssl_on = cfg.just && g.train();
  std::vector<std::size_t> masked;
  if (ssl_on) {
    SslConfig mc = cfg.ssl;
    mc.mask_span = std::min(mc.mask_span, features.rows());
    auto emb = g.param(s, "ssl.mask_emb");
    hooks.set_post_projection([&masked, emb, mc, mask_seed](Var<T> h) {
      auto m = mask_features(h, emb, mc, mask_seed);
      masked = std::move(m.positions);
      return m.masked;
    });
  }
  auto enc = encode(g, s, cfg, ins, features, hooks);
  auto pred = predictor_forward(g, s, cfg.rnnt, std::span<const int>(transcript));
  auto lattice = joint_logits(g, s, enc.out, pred, logit_transform(g, s, ins));
  auto rnnt = rnnt_loss(lattice, enc.out.value().rows(), std::span<const int>(transcript));
  UtteranceLoss<T> r{rnnt, {}};
  r.parts.rnnt = static_cast<double>(rnnt.value()[0]);
  if (ssl_on) {
    auto q = quantize(enc.taps[0], g.param(s, "ssl.codebook"));
    auto zero = g.constant(Tensor<T>({1}));
    Var<T> lc = zero;
    if (masked.size() >= 2) {
      auto dis = sample_distractors(masked, cfg.ssl.num_distractors, mask_seed ^ 0x5eedULL);
      lc = contrastive_loss(enc.taps[cfg.ssl.contrastive_layers], q.targets, masked, dis, cfg.ssl.temperature);
    }
    std::vector<int> ids;
    for (auto t : masked) ids.push_back(q.ids[t]);
    auto logits = ops::linear(ops::select_rows(enc.out, std::span<const std::size_t>(masked)),
                              g.param(s, "ssl.mlm_head.w"), g.param(s, "ssl.mlm_head.b"));
    auto lm = mlm_loss(logits, ids);
    auto ld = diversity_loss(q.usage);
    r.total = just_total_loss(rnnt, lc, lm, ld, cfg.ssl);
    r.parts.contrastive = static_cast<double>(lc.value()[0]);
    r.parts.mlm = static_cast<double>(lm.value()[0]);
    r.parts.diversity = static_cast<double>(ld.value()[0]);
  }
  r.parts.total = static_cast<double>(r.total.value()[0]);
  return r;
}

/// Greedy transcription with gradients disabled.
template <std::floating_point T>
Transcript transcribe(ParamStore<T>& s, const ModelConfig& cfg, const Insertions& ins, const Tensor<T>& features,
                      std::size_t max_symbols_per_frame = 4) {
  Graph<T> g(false, 0, 0, false);
  auto enc = encode(g, s, cfg, ins, features);
  return greedy_decode(g, s, cfg.rnnt, enc, max_symbols_per_frame, logit_transform(g, s, ins));
}

}  // namespace car

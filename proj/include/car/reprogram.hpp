// SPDX-License-Identifier: Apache-2.0
//
// Additive reprogramming of a frozen encoder. A module maps x to
// x + w + H(x), where w is a universal offset over the feature axis and H is
// a small feature-dependent generator:
//
//   H(x) = Up(swish(E(Down(x))))
//
// E is either a softmax-normalised grouped 1-D convolution over time (CAR2)
// or a per-frame attention mask over a 2-D convolution of the bottleneck
// plane (CAR1). Up is zero-initialised, so a fresh module is the identity.
#pragma once

#include <optional>
#include <random>
#include <string>

#include "car/errors.hpp"
#include "car/graph.hpp"
#include "car/ops.hpp"
#include "car/param_store.hpp"

namespace car {

enum class ExtractorKind { kNone, kAttention, kConv };

inline std::string extractor_name(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::kNone: return "none";
    case ExtractorKind::kAttention: return "attention";
    case ExtractorKind::kConv: return "conv";
  }
  return "?";
}

inline ExtractorKind parse_extractor(const std::string& s) {
  if (s == "none") return ExtractorKind::kNone;
  if (s == "attention") return ExtractorKind::kAttention;
  if (s == "conv") return ExtractorKind::kConv;
  throw ConfigError("unknown extractor kind '" + s + "'");
}

struct ReprogramConfig {
  std::size_t bottleneck = 40;
  std::size_t conv_groups = 2;
  std::size_t conv_taps = 5;
  std::size_t attn_kernel = 3;

  void validate() const {
    if (bottleneck == 0) throw ConfigError("reprogram bottleneck must be >= 1");
    if (conv_taps % 2 == 0 || attn_kernel % 2 == 0) throw ConfigError("reprogram kernels must be odd");
    if (conv_groups == 0 || bottleneck % conv_groups != 0) {
      throw ConfigError("reprogram bottleneck " + std::to_string(bottleneck) + " not divisible into " +
                        std::to_string(conv_groups) + " conv groups");
    }
  }
};

enum class BridgeMode { kScaled, kDropout };

struct BridgeConfig {
  bool enabled = false;
  double beta_hat = 0.15;
  BridgeMode mode = BridgeMode::kScaled;
  bool share_weights = false;

  void validate() const {
    if (!(beta_hat >= 0.0 && beta_hat <= 1.0)) throw ConfigError("beta_hat must lie in [0, 1]");
    if (mode == BridgeMode::kDropout && beta_hat >= 1.0) throw ConfigError("dropout bridge needs beta_hat < 1");
  }
};

// ----------------------------------------------------------------- extractors

/// Grouped depthwise convolution over time with softmax-normalised taps:
/// channel c uses kernel row c / (C / G) of `logits` [G x K].
template <std::floating_point T>
Var<T> extractor_conv(Var<T> x, Var<T> logits) {
  const auto& lv = logits.value();
  const std::size_t c = x.value().cols();
  if (lv.rank() != 2) throw DimensionError("extractor_conv: logits must be [groups x taps]");
  const std::size_t groups = lv.dim(0), taps = lv.dim(1);
  if (c % groups != 0) {
    throw ConfigError("extractor_conv: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  // [G x K] -> softmax over taps -> [K x G] -> broadcast to [K x C].
  auto w = ops::transpose(ops::softmax_lastdim(logits));
  std::vector<std::size_t> cols(c);
  for (std::size_t j = 0; j < c; ++j) cols[j] = j / (c / groups);
  std::vector<std::size_t> idx;
  idx.reserve(taps * c);
  for (std::size_t k = 0; k < taps; ++k) idx.insert(idx.end(), cols.begin(), cols.end());
  auto wk = ops::gather(w, std::span<const std::size_t>(idx), c);
  return ops::depthwise_conv1d(x, wk);
}

/// Per-frame attention mask a = softmax_t(x.s + s0) applied to conv2d(x):
/// y = T * a (.) conv2d(x). Uniform scores and a centred delta kernel give y = x.
template <std::floating_point T>
Var<T> extractor_attention(Var<T> x, Var<T> score_w, Var<T> score_b, Var<T> kernel,
                           Tensor<T>* attention_out = nullptr) {
  const std::size_t tlen = x.value().rows();
  auto scores = ops::add_bias(ops::matmul(x, score_w), score_b);  // [T x 1]
  auto a = ops::transpose(ops::softmax_lastdim(ops::transpose(scores)));
  if (attention_out) *attention_out = a.value();
  auto plane = ops::conv2d(x, kernel);
  return ops::mul_rowwise(plane, ops::scale(a, static_cast<T>(tlen)));
}

// ----------------------------------------------------------------- modules

/// Adds the parameters of one reprogramming module of width `width` under
/// `prefix`. Every entry is tagged Role::kReprogram.
template <std::floating_point T>
void init_reprogram_module(ParamStore<T>& s, const std::string& prefix, std::size_t width, ExtractorKind kind,
                           const ReprogramConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const Role r = Role::kReprogram;
  s.add(prefix + ".w", r, Tensor<T>({width}));
  if (kind == ExtractorKind::kNone) return;
  const std::size_t b = cfg.bottleneck;
  s.add(prefix + ".down.w", r, glorot<T>(width, b, rng));
  s.add(prefix + ".down.b", r, Tensor<T>({b}));
  if (kind == ExtractorKind::kConv) {
    s.add(prefix + ".ext.logits", r, Tensor<T>({cfg.conv_groups, cfg.conv_taps}));
    s.add(prefix + ".ext.b", r, Tensor<T>({b}));
  } else {
    s.add(prefix + ".ext.score.w", r, Tensor<T>({b, 1}));
    s.add(prefix + ".ext.score.b", r, Tensor<T>({1}));
    Tensor<T> k({cfg.attn_kernel, cfg.attn_kernel});
    k[(cfg.attn_kernel / 2) * cfg.attn_kernel + cfg.attn_kernel / 2] = T{1};
    s.add(prefix + ".ext.k2d", r, std::move(k));
  }
  s.add(prefix + ".up.w", r, Tensor<T>({b, width}));
  s.add(prefix + ".up.b", r, Tensor<T>({width}));
}

inline std::size_t reprogram_module_param_count(std::size_t width, ExtractorKind kind, const ReprogramConfig& cfg) {
  if (kind == ExtractorKind::kNone) return width;
  const std::size_t b = cfg.bottleneck;
  const std::size_t ext = kind == ExtractorKind::kConv ? cfg.conv_groups * cfg.conv_taps + b
                                                       : b + 1 + cfg.attn_kernel * cfg.attn_kernel;
  return width + (width * b + b) + ext + (b * width + width);
}

/// H(x); the extractor kind is read off the store.
template <std::floating_point T>
Var<T> reprogram_generator(Graph<T>& g, ParamStore<T>& s, const std::string& prefix, Var<T> x) {
  auto h = ops::linear(x, g.param(s, prefix + ".down.w"), g.param(s, prefix + ".down.b"));
  if (s.contains(prefix + ".ext.logits")) {
    h = ops::add_bias(extractor_conv(h, g.param(s, prefix + ".ext.logits")), g.param(s, prefix + ".ext.b"));
  } else {
    h = extractor_attention(h, g.param(s, prefix + ".ext.score.w"), g.param(s, prefix + ".ext.score.b"),
                            g.param(s, prefix + ".ext.k2d"));
  }
  h = ops::swish(h);
  return ops::linear(h, g.param(s, prefix + ".up.w"), g.param(s, prefix + ".up.b"));
}

/// R(x) = x + w + H(x) over [T x F].
template <std::floating_point T>
Var<T> input_reprogram(Graph<T>& g, ParamStore<T>& s, const std::string& prefix, Var<T> x) {
  auto w = g.param(s, prefix + ".w");
  if (w.value().size() != x.value().cols()) {
    throw DimensionError("reprogram '" + prefix + "' has width " + std::to_string(w.value().size()) +
                         " but the input is " + shape_str(x.shape()));
  }
  auto y = ops::add_bias(x, w);
  if (!s.contains(prefix + ".down.w")) return y;
  auto hx = reprogram_generator(g, s, prefix, x);
  if (hx.shape() != x.shape()) {
    throw ContractError("extractor output " + shape_str(hx.shape()) + " does not match input " + shape_str(x.shape()));
  }
  return ops::add(y, hx);
}

/// Plain mode R(h); bridged mode R(h + beta * h_prev). Without h_prev (first
/// boundary, or a width/length change) the bridge is skipped.
template <std::floating_point T>
Var<T> latent_reprogram(Graph<T>& g, ParamStore<T>& s, const std::string& prefix, Var<T> h,
                        std::optional<Var<T>> h_prev, const BridgeConfig& bridge, std::uint64_t layer_id = 0) {
  Var<T> arg = h;
  if (bridge.enabled && h_prev) {
    if (h_prev->shape() != h.shape()) {
      throw DimensionError("bridge: " + shape_str(h_prev->shape()) + " vs " + shape_str(h.shape()));
    }
    if (bridge.mode == BridgeMode::kScaled) {
      if (bridge.beta_hat != 0.0) arg = ops::add(h, ops::scale(*h_prev, static_cast<T>(bridge.beta_hat)));
    } else {
      arg = ops::add(h, ops::dropout(*h_prev, bridge.beta_hat, 0x6272000 + layer_id));
    }
  }
  return input_reprogram(g, s, prefix, arg);
}

}  // namespace car

// SPDX-License-Identifier: Apache-2.0
//
// Conformer encoder: macaron feed-forward halves around relative-position
// self-attention and a convolution module, arranged in three blocks with a
// time-stacking layer after block 1 and a projection back to the model width
// after block 2. Latent hooks let reprogramming and adapter modules rewrite
// the hidden sequence between frozen layers.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "car/errors.hpp"
#include "car/graph.hpp"
#include "car/ops.hpp"
#include "car/param_store.hpp"

namespace car {

struct ConformerConfig {
  std::size_t feature_dim = 80;
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t conv_kernel = 7;
  std::size_t ffn_expansion = 4;
  std::array<std::size_t, 3> block_layout{2, 1, 3};
  std::size_t time_stack_factor = 2;
  std::size_t rel_pos_max_distance = 8;
  std::size_t group_norm_groups = 4;
  double dropout = 0.0;
  /// Enforces a single conformer layer in block 2.
  bool strict_layout = true;

  std::size_t num_layers() const { return block_layout[0] + block_layout[1] + block_layout[2]; }

  /// Width of conformer layer `layer` (1-based). Block 2 runs on stacked frames.
  std::size_t layer_dim(std::size_t layer) const {
    const bool in_block2 = layer > block_layout[0] && layer <= block_layout[0] + block_layout[1];
    return in_block2 ? model_dim * time_stack_factor : model_dim;
  }

  void validate() const {
    if (model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0) {
      throw ConfigError("model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (block_layout[0] < 1 || block_layout[2] < 1) {
      throw ConfigError("blocks 1 and 3 need at least one conformer layer");
    }
    if (strict_layout && block_layout[1] != 1) {
      throw ConfigError("block 2 must hold exactly one conformer layer when strict_layout is set");
    }
    if (time_stack_factor < 1) throw ConfigError("time_stack_factor must be >= 1");
    if (conv_kernel % 2 == 0) throw ConfigError("conv_kernel must be odd");
    if (group_norm_groups == 0 || model_dim % group_norm_groups != 0) {
      throw ConfigError("group_norm_groups must divide model_dim");
    }
    if (feature_dim == 0 || ffn_expansion == 0) throw ConfigError("feature_dim and ffn_expansion must be >= 1");
  }
};

// ----------------------------------------------------------------- structural ops

/// Concatenates `factor` consecutive frames along the feature dim; the tail
/// is zero-padded to a full stack. [T x d] -> [ceil(T/factor) x factor*d].
template <std::floating_point T>
Var<T> time_stack(Var<T> x, std::size_t factor) {
  if (factor < 1) throw ContractError("time_stack: factor must be >= 1");
  if (factor == 1) return x;
  const auto& xv = x.value();
  const std::size_t tlen = xv.dim(0), d = xv.dim(1);
  const std::size_t out_t = (tlen + factor - 1) / factor;
  Tensor<T> y({out_t, factor * d});
  std::copy(xv.data().begin(), xv.data().end(), y.data().begin());
  return x.graph->record(std::move(y), {x}, [x](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
  });
}

/// Learned relative-position bias of one head as a [T x T] score offset:
/// entry (i, j) is table[head, clip(j - i, -R, R) + R].
template <std::floating_point T>
Var<T> relative_bias(Var<T> table, std::size_t head, std::size_t tlen, std::size_t max_dist) {
  const auto& tv = table.value();
  const std::size_t width = 2 * max_dist + 1;
  if (tv.rank() != 2 || tv.dim(1) != width || head >= tv.dim(0)) {
    throw DimensionError("relative_bias: table " + shape_str(tv.shape()) + " does not fit head " +
                         std::to_string(head));
  }
  auto slot = [max_dist](std::size_t i, std::size_t j) {
    const std::ptrdiff_t rel = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i);
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(max_dist);
    return static_cast<std::size_t>(std::clamp(rel, -r, r) + r);
  };
  Tensor<T> y({tlen, tlen});
  for (std::size_t i = 0; i < tlen; ++i)
    for (std::size_t j = 0; j < tlen; ++j) y[i * tlen + j] = tv[head * width + slot(i, j)];
  return table.graph->record(std::move(y), {table}, [table, head, tlen, width, slot](Graph<T>& g, const Tensor<T>& gy) {
    auto& gt = g.grad(table);
    for (std::size_t i = 0; i < tlen; ++i)
      for (std::size_t j = 0; j < tlen; ++j) gt[head * width + slot(i, j)] += gy[i * tlen + j];
  });
}

// ----------------------------------------------------------------- parameters

namespace detail {

template <std::floating_point T>
void add_linear(ParamStore<T>& s, const std::string& p, std::size_t in, std::size_t out, std::mt19937_64& rng,
                bool zero = false) {
  s.add(p + ".w", Role::kWeight, zero ? Tensor<T>({in, out}) : glorot<T>(in, out, rng));
  s.add(p + ".b", Role::kBias, Tensor<T>({out}));
}

template <std::floating_point T>
void add_norm(ParamStore<T>& s, const std::string& p, std::size_t dim) {
  s.add(p + ".g", Role::kWeight, Tensor<T>({dim}, T{1}));
  s.add(p + ".b", Role::kBias, Tensor<T>({dim}));
}

template <std::floating_point T>
Var<T> apply_linear(Graph<T>& g, ParamStore<T>& s, const std::string& p, Var<T> x) {
  return ops::linear(x, g.param(s, p + ".w"), g.param(s, p + ".b"));
}

template <std::floating_point T>
Var<T> apply_norm(Graph<T>& g, ParamStore<T>& s, const std::string& p, Var<T> x) {
  return ops::layer_norm(x, g.param(s, p + ".g"), g.param(s, p + ".b"));
}

}  // namespace detail

/// Adds one conformer layer of width `dim` under `prefix`.
template <std::floating_point T>
void init_conformer_layer(ParamStore<T>& s, const std::string& prefix, std::size_t dim, const ConformerConfig& cfg,
                          std::mt19937_64& rng) {
  const std::size_t hidden = dim * cfg.ffn_expansion;
  for (const char* ffn : {".ffn1", ".ffn2"}) {
    detail::add_norm(s, prefix + ffn + ".ln", dim);
    detail::add_linear(s, prefix + ffn + ".up", dim, hidden, rng);
    detail::add_linear(s, prefix + ffn + ".down", hidden, dim, rng);
  }
  detail::add_norm(s, prefix + ".mhsa.ln", dim);
  for (const char* proj : {".mhsa.q", ".mhsa.k", ".mhsa.v", ".mhsa.o"}) {
    detail::add_linear(s, prefix + proj, dim, dim, rng);
  }
  s.add(prefix + ".mhsa.relpos", Role::kWeight, Tensor<T>({cfg.num_heads, 2 * cfg.rel_pos_max_distance + 1}));
  detail::add_norm(s, prefix + ".conv.ln", dim);
  detail::add_linear(s, prefix + ".conv.pw1", dim, 2 * dim, rng);
  const T dw_bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.conv_kernel)));
  s.add(prefix + ".conv.dw.w", Role::kWeight, uniform_init<T>({cfg.conv_kernel, dim}, dw_bound, rng));
  s.add(prefix + ".conv.dw.b", Role::kBias, Tensor<T>({dim}));
  detail::add_norm(s, prefix + ".conv.gn", dim);
  detail::add_linear(s, prefix + ".conv.pw2", dim, dim, rng);
  detail::add_norm(s, prefix + ".ln_out", dim);
}

/// Exact parameter count of one conformer layer of width `dim`.
inline std::size_t conformer_layer_param_count(std::size_t dim, const ConformerConfig& cfg) {
  const std::size_t hidden = dim * cfg.ffn_expansion;
  const std::size_t ffn = 2 * dim + (dim * hidden + hidden) + (hidden * dim + dim);
  const std::size_t mhsa = 2 * dim + 4 * (dim * dim + dim) + cfg.num_heads * (2 * cfg.rel_pos_max_distance + 1);
  const std::size_t conv = 2 * dim + (dim * 2 * dim + 2 * dim) + (cfg.conv_kernel * dim + dim) + 2 * dim +
                           (dim * dim + dim);
  return 2 * ffn + mhsa + conv + 2 * dim;
}

// ----------------------------------------------------------------- layer forward

template <std::floating_point T>
Var<T> feed_forward(Graph<T>& g, ParamStore<T>& s, const std::string& p, Var<T> x, double drop,
                    std::uint64_t layer_id) {
  auto h = detail::apply_norm(g, s, p + ".ln", x);
  h = ops::swish(detail::apply_linear(g, s, p + ".up", h));
  h = ops::dropout(h, drop, layer_id);
  h = detail::apply_linear(g, s, p + ".down", h);
  return ops::dropout(h, drop, layer_id + 1);
}

/// Multi-head self-attention with per-head relative-position bias. When
/// `weights` is given, each head's [T x T] attention matrix is appended.
template <std::floating_point T>
Var<T> self_attention(Graph<T>& g, ParamStore<T>& s, const std::string& p, Var<T> x, const ConformerConfig& cfg,
                      std::vector<Tensor<T>>* weights = nullptr) {
  const std::size_t dim = x.value().dim(1), tlen = x.value().dim(0);
  if (dim % cfg.num_heads != 0) throw ConfigError("attention width not divisible by num_heads");
  const std::size_t dh = dim / cfg.num_heads;
  auto h = detail::apply_norm(g, s, p + ".ln", x);
  auto q = detail::apply_linear(g, s, p + ".q", h);
  auto k = detail::apply_linear(g, s, p + ".k", h);
  auto v = detail::apply_linear(g, s, p + ".v", h);
  auto table = g.param(s, p + ".relpos");
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Var<T>> heads;
  for (std::size_t hd = 0; hd < cfg.num_heads; ++hd) {
    auto qh = ops::slice_cols(q, hd * dh, (hd + 1) * dh);
    auto kh = ops::slice_cols(k, hd * dh, (hd + 1) * dh);
    auto vh = ops::slice_cols(v, hd * dh, (hd + 1) * dh);
    auto scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    scores = ops::add(scores, relative_bias(table, hd, tlen, cfg.rel_pos_max_distance));
    auto attn = ops::softmax_lastdim(scores);
    if (weights) weights->push_back(attn.value());
    heads.push_back(ops::matmul(attn, vh));
  }
  auto merged = cfg.num_heads == 1 ? heads[0] : ops::concat_cols(heads);
  return detail::apply_linear(g, s, p + ".o", merged);
}

/// Pointwise-GLU, depthwise conv, group norm, swish, pointwise.
template <std::floating_point T>
Var<T> conv_module(Graph<T>& g, ParamStore<T>& s, const std::string& p, Var<T> x, const ConformerConfig& cfg,
                   std::uint64_t layer_id) {
  auto h = detail::apply_norm(g, s, p + ".ln", x);
  h = ops::glu(detail::apply_linear(g, s, p + ".pw1", h));
  h = ops::add_bias(ops::depthwise_conv1d(h, g.param(s, p + ".dw.w")), g.param(s, p + ".dw.b"));
  h = ops::group_norm(h, g.param(s, p + ".gn.g"), g.param(s, p + ".gn.b"), cfg.group_norm_groups);
  h = ops::swish(h);
  h = detail::apply_linear(g, s, p + ".pw2", h);
  return ops::dropout(h, cfg.dropout, layer_id);
}

/// One macaron conformer layer; shape preserving.
template <std::floating_point T>
Var<T> conformer_block_forward(Graph<T>& g, ParamStore<T>& s, const std::string& prefix, Var<T> x,
                               const ConformerConfig& cfg, std::uint64_t layer_id = 0,
                               std::vector<Tensor<T>>* attn_weights = nullptr) {
  if (x.value().empty()) throw ContractError("conformer layer received an empty input sequence");
  const std::uint64_t base = layer_id * 16;
  const T half{0.5};
  x = ops::add(x, ops::scale(feed_forward(g, s, prefix + ".ffn1", x, cfg.dropout, base), half));
  x = ops::add(x, ops::dropout(self_attention(g, s, prefix + ".mhsa", x, cfg, attn_weights), cfg.dropout, base + 2));
  x = ops::add(x, conv_module(g, s, prefix + ".conv", x, cfg, base + 3));
  x = ops::add(x, ops::scale(feed_forward(g, s, prefix + ".ffn2", x, cfg.dropout, base + 4), half));
  return detail::apply_norm(g, s, prefix + ".ln_out", x);
}

// ----------------------------------------------------------------- encoder

/// Hooks keyed by insertion point: 0 rewrites the raw feature sequence,
/// i in [1, N) rewrites the output of conformer layer i before it reaches
/// layer i+1. Each hook receives (h^i, h^{i-1}) where h^{i-1} is the sequence
/// that was fed into layer i (so it already carries the previous hook's
/// rewrite). h^{i-1} is absent at point 0 and wherever widths or lengths differ.
template <std::floating_point T>
class EncoderHooks {
 public:
  using Hook = std::function<Var<T>(Var<T> h, std::optional<Var<T>> h_prev)>;

  using Stage = std::function<Var<T>(Var<T>)>;

  void set(std::size_t point, Hook hook) { hooks_[point] = std::move(hook); }
  /// Rewrites the projected input before layer 1 (used for masking).
  void set_post_projection(Stage stage) { post_proj_ = std::move(stage); }
  const Stage& post_projection() const { return post_proj_; }
  bool empty() const { return hooks_.empty() && !post_proj_; }
  const Hook* find(std::size_t point) const {
    auto it = hooks_.find(point);
    return it == hooks_.end() ? nullptr : &it->second;
  }
  void validate(std::size_t num_layers) const {
    for (const auto& [pt, _] : hooks_) {
      if (pt >= num_layers) {
        throw ConfigError("hook at insertion point " + std::to_string(pt) + " but the encoder has only points 0.." +
                          std::to_string(num_layers - 1));
      }
    }
  }

 private:
  std::map<std::size_t, Hook> hooks_;
  Stage post_proj_;
};

template <std::floating_point T>
struct EncoderOutput {
  Var<T> out;
  /// taps[0] = projected input (before any post-projection stage),
  /// taps[i] = output of conformer layer i (before its hook).
  std::vector<Var<T>> taps;
};

inline std::string layer_prefix(const std::string& root, std::size_t layer) {
  return root + ".layer" + std::to_string(layer);
}

/// Adds every encoder parameter under `root`.
template <std::floating_point T>
void init_encoder(ParamStore<T>& s, const ConformerConfig& cfg, std::mt19937_64& rng, const std::string& root = "enc") {
  cfg.validate();
  detail::add_linear(s, root + ".in_proj", cfg.feature_dim, cfg.model_dim, rng);
  for (std::size_t i = 1; i <= cfg.num_layers(); ++i) {
    init_conformer_layer(s, layer_prefix(root, i), cfg.layer_dim(i), cfg, rng);
  }
  if (cfg.time_stack_factor > 1) {
    detail::add_linear(s, root + ".out_proj", cfg.model_dim * cfg.time_stack_factor, cfg.model_dim, rng);
  }
}

inline std::size_t encoder_param_count(const ConformerConfig& cfg) {
  std::size_t n = cfg.feature_dim * cfg.model_dim + cfg.model_dim;
  for (std::size_t i = 1; i <= cfg.num_layers(); ++i) n += conformer_layer_param_count(cfg.layer_dim(i), cfg);
  if (cfg.time_stack_factor > 1) n += cfg.model_dim * cfg.time_stack_factor * cfg.model_dim + cfg.model_dim;
  return n;
}

/// Input projection -> block 1 -> time stack -> block 2 -> projection to the
/// model width -> block 3, with hooks applied at their insertion points.
/// Relative position enters through the per-layer attention bias tables.
template <std::floating_point T>
EncoderOutput<T> encoder_forward(Graph<T>& g, ParamStore<T>& s, const ConformerConfig& cfg, const Tensor<T>& features,
                                 const EncoderHooks<T>& hooks = {}, const std::string& root = "enc") {
  if (features.empty()) throw ContractError("encoder received an empty feature sequence");
  if (features.rank() != 2 || features.dim(1) != cfg.feature_dim) {
    throw DimensionError("encoder expects [T x " + std::to_string(cfg.feature_dim) + "] features, got " +
                         shape_str(features.shape()));
  }
  const std::size_t n = cfg.num_layers();
  hooks.validate(n);
  Var<T> x = g.constant(features);
  if (const auto* hk = hooks.find(0)) x = (*hk)(x, std::nullopt);
  EncoderOutput<T> res;
  Var<T> h = detail::apply_linear(g, s, root + ".in_proj", x);
  res.taps.push_back(h);
  if (hooks.post_projection()) h = hooks.post_projection()(h);
  const std::size_t end1 = cfg.block_layout[0], end2 = end1 + cfg.block_layout[1];
  for (std::size_t i = 1; i <= n; ++i) {
    const Var<T> layer_in = h;
    h = conformer_block_forward(g, s, layer_prefix(root, i), h, cfg, i);
    res.taps.push_back(h);
    if (i == n) break;
    if (const auto* hk = hooks.find(i)) {
      const bool same = layer_in.value().shape() == h.value().shape();
      h = (*hk)(h, same ? std::optional<Var<T>>(layer_in) : std::nullopt);
    }
    if (i == end1) h = time_stack(h, cfg.time_stack_factor);
    if (i == end2 && cfg.time_stack_factor > 1) h = detail::apply_linear(g, s, root + ".out_proj", h);
  }
  res.out = h;
  return res;
}

/// Number of output frames for an input of `frames` frames.
inline std::size_t encoder_frames(const ConformerConfig& cfg, std::size_t frames) {
  return (frames + cfg.time_stack_factor - 1) / cfg.time_stack_factor;
}

}  // namespace car

// SPDX-License-Identifier: Apache-2.0
//
// Joint supervised + self-supervised objective: span masking, a single
// nearest-neighbour codebook, contrastive and masked-prediction losses, and
// the entropy diversity term.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "car/errors.hpp"
#include "car/graph.hpp"
#include "car/ops.hpp"

namespace car {

struct SslConfig {
  double gamma = 0.01;
  double alpha = 0.1;
  double mask_ratio = 0.065;
  std::size_t mask_span = 3;
  std::size_t codebook_size = 64;
  std::size_t num_distractors = 8;
  double temperature = 0.1;
  /// Layers of the contrastive net; the rest of the encoder is the MLM net.
  std::size_t contrastive_layers = 2;

  void validate() const {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in (0, 1)");
    if (gamma < 0.0 || alpha < 0.0) throw ConfigError("gamma and alpha must be >= 0");
    if (codebook_size < 2) throw ConfigError("codebook_size must be >= 2");
    if (mask_span < 1 || num_distractors < 1) throw ConfigError("mask_span and num_distractors must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  }
};

// ----------------------------------------------------------------- masking

/// Sorted frame indices covered by the sampled spans. The number of starts is
/// max(1, floor(ratio * T)), drawn without replacement from [0, T - span].
inline std::vector<std::size_t> sample_mask(std::size_t frames, double ratio, std::size_t span, std::uint64_t seed) {
  if (span == 0 || frames < span) {
    throw ContractError("sample_mask: need T >= span, got T=" + std::to_string(frames) +
                        ", span=" + std::to_string(span));
  }
  const std::size_t slots = frames - span + 1;
  const auto want = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(frames))));
  const std::size_t starts = std::min(want, slots);
  std::vector<std::size_t> pool(slots);
  std::iota(pool.begin(), pool.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < starts; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, slots - 1);
    std::swap(pool[i], pool[d(rng)]);
  }
  std::vector<char> hit(frames, 0);
  for (std::size_t i = 0; i < starts; ++i)
    for (std::size_t k = 0; k < span; ++k) hit[pool[i] + k] = 1;
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < frames; ++t)
    if (hit[t]) out.push_back(t);
  return out;
}

/// Rows listed in `positions` replaced by the embedding `emb` [d]; other
/// rows are copied unchanged.
template <std::floating_point T>
Var<T> replace_rows(Var<T> h, Var<T> emb, const std::vector<std::size_t>& positions) {
  const auto& hv = h.value();
  const std::size_t c = hv.cols();
  if (emb.value().size() != c) throw DimensionError("replace_rows: embedding width mismatch");
  Tensor<T> y = hv;
  for (auto t : positions) {
    if (t >= hv.rows()) throw DimensionError("replace_rows: position out of range");
    std::copy(emb.value().data().begin(), emb.value().data().end(), y.data().begin() + t * c);
  }
  std::vector<char> masked(hv.rows(), 0);
  for (auto t : positions) masked[t] = 1;
  return h.graph->record(std::move(y), {h, emb}, [h, emb, c, masked](Graph<T>& g, const Tensor<T>& gy) {
    for (std::size_t t = 0; t < masked.size(); ++t) {
      if (masked[t]) {
        if (g.requires_grad(emb)) {
          auto& ge = g.grad(emb);
          for (std::size_t j = 0; j < c; ++j) ge[j] += gy[t * c + j];
        }
      } else if (g.requires_grad(h)) {
        auto& gh = g.grad(h);
        for (std::size_t j = 0; j < c; ++j) gh[t * c + j] += gy[t * c + j];
      }
    }
  });
}

template <std::floating_point T>
struct MaskResult {
  Var<T> masked;
  std::vector<std::size_t> positions;
};

template <std::floating_point T>
MaskResult<T> mask_features(Var<T> h, Var<T> mask_emb, const SslConfig& cfg, std::uint64_t seed) {
  auto pos = sample_mask(h.value().rows(), cfg.mask_ratio, cfg.mask_span, seed);
  return {replace_rows(h, mask_emb, pos), std::move(pos)};
}

// ----------------------------------------------------------------- quantizer

/// Nearest code by squared Euclidean distance; ties go to the lower index.
template <std::floating_point T>
std::vector<int> nearest_codes(const Tensor<T>& h, const Tensor<T>& codebook) {
  const std::size_t d = h.cols(), v = codebook.rows();
  if (codebook.cols() != d) throw DimensionError("quantize: codebook width mismatch");
  std::vector<int> ids(h.rows());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < v; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(h[t * d + j]) - static_cast<double>(codebook[k * d + j]);
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        ids[t] = static_cast<int>(k);
      }
    }
  }
  return ids;
}

/// Negative squared distances -||h_t - c_k||^2 as a [T x V] matrix.
template <std::floating_point T>
Var<T> neg_sq_dist(Var<T> h, Var<T> codebook) {
  const auto& hv = h.value();
  const auto& cv = codebook.value();
  const std::size_t tl = hv.rows(), d = hv.cols(), v = cv.rows();
  if (cv.cols() != d) throw DimensionError("neg_sq_dist: width mismatch");
  Tensor<T> y({tl, v});
  for (std::size_t t = 0; t < tl; ++t)
    for (std::size_t k = 0; k < v; ++k) {
      T s{0};
      for (std::size_t j = 0; j < d; ++j) {
        const T diff = hv[t * d + j] - cv[k * d + j];
        s += diff * diff;
      }
      y[t * v + k] = -s;
    }
  return h.graph->record(std::move(y), {h, codebook}, [h, codebook, tl, d, v](Graph<T>& g, const Tensor<T>& gy) {
    const auto& hv = g.value(h);
    const auto& cv = g.value(codebook);
    Tensor<T>* gh = g.requires_grad(h) ? &g.grad(h) : nullptr;
    Tensor<T>* gc = g.requires_grad(codebook) ? &g.grad(codebook) : nullptr;
    for (std::size_t t = 0; t < tl; ++t)
      for (std::size_t k = 0; k < v; ++k) {
        const T go = gy[t * v + k];
        for (std::size_t j = 0; j < d; ++j) {
          const T diff = hv[t * d + j] - cv[k * d + j];
          if (gh) (*gh)[t * d + j] -= T{2} * go * diff;
          if (gc) (*gc)[k * d + j] += T{2} * go * diff;
        }
      }
  });
}

/// Value of codebook rows `ids`, gradient passed straight through to h.
template <std::floating_point T>
Var<T> straight_through(Var<T> h, const Tensor<T>& codebook, const std::vector<int>& ids) {
  const std::size_t d = h.value().cols();
  Tensor<T> y(h.value().shape());
  for (std::size_t t = 0; t < ids.size(); ++t)
    std::copy_n(codebook.data().begin() + static_cast<std::size_t>(ids[t]) * d, d, y.data().begin() + t * d);
  return h.graph->record(std::move(y), {h}, [h](Graph<T>& g, const Tensor<T>& gy) {
    auto& gh = g.grad(h);
    for (std::size_t i = 0; i < gy.size(); ++i) gh[i] += gy[i];
  });
}

template <std::floating_point T>
struct QuantizeResult {
  std::vector<int> ids;
  Var<T> targets;  ///< [T x d] straight-through code vectors
  Var<T> soft;     ///< [T x V] softmax(-dist^2)
  Var<T> usage;    ///< [1 x V] mean soft assignment
};

template <std::floating_point T>
QuantizeResult<T> quantize(Var<T> h, Var<T> codebook) {
  QuantizeResult<T> r;
  r.ids = nearest_codes(h.value(), codebook.value());
  r.targets = straight_through(h, codebook.value(), r.ids);
  r.soft = ops::softmax_lastdim(neg_sq_dist(h, codebook));
  r.usage = ops::mean_rows(r.soft);
  return r;
}

// ----------------------------------------------------------------- losses

/// For every masked position, `k` distractor positions drawn from the other
/// masked positions (with replacement when fewer than k are available).
inline std::vector<std::vector<std::size_t>> sample_distractors(const std::vector<std::size_t>& positions, std::size_t k,
                                                                std::uint64_t seed) {
  if (positions.size() < 2) throw ContractError("contrastive loss needs at least two masked positions");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < positions.size(); ++j)
      if (j != i) others.push_back(positions[j]);
    std::vector<std::size_t> pick;
    if (others.size() >= k) {
      for (std::size_t n = 0; n < k; ++n) {
        std::uniform_int_distribution<std::size_t> d(n, others.size() - 1);
        std::swap(others[n], others[d(rng)]);
        pick.push_back(others[n]);
      }
    } else {
      std::uniform_int_distribution<std::size_t> d(0, others.size() - 1);
      for (std::size_t n = 0; n < k; ++n) pick.push_back(others[d(rng)]);
    }
    out.push_back(std::move(pick));
  }
  return out;
}

/// InfoNCE with cosine similarity and temperature kappa, averaged over the
/// masked positions. `distractors[i]` lists target rows competing with
/// positions[i]; the true target is the same row of `targets`.
template <std::floating_point T>
Var<T> contrastive_loss(Var<T> context, Var<T> targets, const std::vector<std::size_t>& positions,
                        const std::vector<std::vector<std::size_t>>& distractors, double kappa) {
  if (positions.empty()) throw ContractError("contrastive loss needs at least one masked position");
  if (distractors.size() != positions.size() || distractors[0].empty()) {
    throw ContractError("contrastive loss needs distractors for every masked position");
  }
  const std::size_t k1 = distractors[0].size() + 1;
  auto c = ops::normalize_rows(ops::select_rows(context, std::span<const std::size_t>(positions)));
  auto q = ops::normalize_rows(targets);
  auto sims = ops::matmul(c, ops::transpose(q));  // [M x T]
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (distractors[i].size() + 1 != k1) throw ContractError("ragged distractor lists");
    idx.push_back(positions[i]);
    idx.insert(idx.end(), distractors[i].begin(), distractors[i].end());
  }
  auto logits = ops::scale(ops::gather(sims, std::span<const std::size_t>(idx), k1), static_cast<T>(1.0 / kappa));
  auto lp = ops::log_softmax_lastdim(logits);
  std::vector<std::size_t> first(positions.size(), 0);
  auto pos_lp = ops::gather(lp, std::span<const std::size_t>(first), 1);
  return ops::scale(ops::sum(pos_lp), static_cast<T>(-1.0 / static_cast<double>(positions.size())));
}

/// Mean cross-entropy of `logits` [M x V] against code ids.
template <std::floating_point T>
Var<T> mlm_loss(Var<T> logits, const std::vector<int>& ids) {
  if (ids.size() != logits.value().rows()) throw DimensionError("mlm_loss: one id per logit row required");
  std::vector<std::size_t> idx;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= logits.value().cols()) throw ContractError("mlm_loss: bad code id");
    idx.push_back(static_cast<std::size_t>(id));
  }
  auto lp = ops::gather(ops::log_softmax_lastdim(logits), std::span<const std::size_t>(idx), 1);
  return ops::scale(ops::sum(lp), static_cast<T>(-1.0 / static_cast<double>(ids.size())));
}

/// 1 - H(p) / ln V for a distribution p [1 x V]; 0 log 0 is taken as 0.
template <std::floating_point T>
Var<T> diversity_loss(Var<T> p) {
  const auto& pv = p.value();
  const std::size_t v = pv.size();
  if (v < 2) throw ContractError("diversity_loss: need at least two codes");
  const T lnv = static_cast<T>(std::log(static_cast<double>(v)));
  T h{0};
  for (auto x : pv.data()) {
    if (x < T{0}) throw ContractError("diversity_loss: negative probability");
    if (x > T{0}) h -= x * std::log(x);
  }
  return p.graph->record(Tensor<T>({1}, T{1} - h / lnv), {p}, [p, lnv](Graph<T>& g, const Tensor<T>& gy) {
    const auto& pv = g.value(p);
    auto& gp = g.grad(p);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const T x = std::max(pv[i], T(1e-12));
      gp[i] += gy[0] * (std::log(x) + T{1}) / lnv;
    }
  });
}

inline double just_total_loss(double l_rnnt, double l_c, double l_mlm, double l_div, const SslConfig& cfg) {
  return l_rnnt + cfg.gamma * (l_c + l_mlm + cfg.alpha * l_div);
}

template <std::floating_point T>
Var<T> just_total_loss(Var<T> l_rnnt, Var<T> l_c, Var<T> l_mlm, Var<T> l_div, const SslConfig& cfg) {
  auto ssl = ops::add(ops::add(l_c, l_mlm), ops::scale(l_div, static_cast<T>(cfg.alpha)));
  return ops::add(l_rnnt, ops::scale(ssl, static_cast<T>(cfg.gamma)));
}

}  // namespace car

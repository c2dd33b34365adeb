// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "car/errors.hpp"
#include "car/graph.hpp"
#include "car/ops.hpp"
#include "car/param_store.hpp"

namespace car {

/// Grapheme ids; 0 is reserved for blank and never appears in a transcript.
using Transcript = std::vector<int>;

inline constexpr int kBlank = 0;

struct TransducerConfig {
  std::size_t vocab_size = 81;  ///< including blank
  std::size_t enc_dim = 64;
  std::size_t embed_dim = 32;
  std::size_t pred_dim = 64;
  std::size_t pred_layers = 2;
  std::size_t joint_dim = 64;

  void validate() const {
    if (vocab_size < 2 || enc_dim == 0 || embed_dim == 0 || pred_dim == 0 || pred_layers == 0 || joint_dim == 0) {
      throw ConfigError("transducer dims must be >= 1 and vocab_size >= 2");
    }
  }
};

// ----------------------------------------------------------------- parameters

template <std::floating_point T>
void init_predictor(ParamStore<T>& s, const TransducerConfig& cfg, std::mt19937_64& rng) {
  s.add("pred.embed", Role::kWeight, uniform_init<T>({cfg.vocab_size, cfg.embed_dim}, T(0.5), rng));
  for (std::size_t l = 0; l < cfg.pred_layers; ++l) {
    const std::string p = "pred.lstm" + std::to_string(l);
    const std::size_t in = l == 0 ? cfg.embed_dim : cfg.pred_dim;
    s.add(p + ".wx", Role::kWeight, glorot<T>(in, 4 * cfg.pred_dim, rng));
    s.add(p + ".wh", Role::kWeight, glorot<T>(cfg.pred_dim, 4 * cfg.pred_dim, rng));
    Tensor<T> b({4 * cfg.pred_dim});
    for (std::size_t j = cfg.pred_dim; j < 2 * cfg.pred_dim; ++j) b[j] = T{1};  // forget gate
    s.add(p + ".b", Role::kBias, std::move(b));
  }
}

template <std::floating_point T>
void init_head(ParamStore<T>& s, const TransducerConfig& cfg, std::mt19937_64& rng) {
  s.add("joint.head.w", Role::kWeight, glorot<T>(cfg.joint_dim, cfg.vocab_size, rng));
  s.add("joint.head.b", Role::kBias, Tensor<T>({cfg.vocab_size}));
}

template <std::floating_point T>
void init_joint(ParamStore<T>& s, const TransducerConfig& cfg, std::mt19937_64& rng) {
  s.add("joint.enc.w", Role::kWeight, glorot<T>(cfg.enc_dim, cfg.joint_dim, rng));
  s.add("joint.pred.w", Role::kWeight, glorot<T>(cfg.pred_dim, cfg.joint_dim, rng));
  s.add("joint.b", Role::kBias, Tensor<T>({cfg.joint_dim}));
  init_head(s, cfg, rng);
}

inline std::size_t predictor_param_count(const TransducerConfig& c) {
  std::size_t n = c.vocab_size * c.embed_dim;
  for (std::size_t l = 0; l < c.pred_layers; ++l) {
    const std::size_t in = l == 0 ? c.embed_dim : c.pred_dim;
    n += in * 4 * c.pred_dim + c.pred_dim * 4 * c.pred_dim + 4 * c.pred_dim;
  }
  return n;
}

inline std::size_t joint_param_count(const TransducerConfig& c) {
  return c.enc_dim * c.joint_dim + c.pred_dim * c.joint_dim + c.joint_dim + c.joint_dim * c.vocab_size +
         c.vocab_size;
}

// ----------------------------------------------------------------- predictor

template <std::floating_point T>
struct PredictorState {
  std::vector<Var<T>> h, c;
};

template <std::floating_point T>
PredictorState<T> initial_state(Graph<T>& g, const TransducerConfig& cfg) {
  PredictorState<T> st;
  for (std::size_t l = 0; l < cfg.pred_layers; ++l) {
    st.h.push_back(g.constant(Tensor<T>({1, cfg.pred_dim})));
    st.c.push_back(g.constant(Tensor<T>({1, cfg.pred_dim})));
  }
  return st;
}

namespace detail {

/// One LSTM step given the precomputed input projection row (x.Wx + b).
template <std::floating_point T>
std::pair<Var<T>, Var<T>> lstm_cell(Var<T> xproj, Var<T> h, Var<T> c, Var<T> wh, std::size_t hidden) {
  auto gates = ops::add(xproj, ops::matmul(h, wh));
  auto i = ops::sigmoid(ops::slice_cols(gates, 0, hidden));
  auto f = ops::sigmoid(ops::slice_cols(gates, hidden, 2 * hidden));
  auto cand = ops::tanh(ops::slice_cols(gates, 2 * hidden, 3 * hidden));
  auto o = ops::sigmoid(ops::slice_cols(gates, 3 * hidden, 4 * hidden));
  auto c_new = ops::add(ops::mul(f, c), ops::mul(i, cand));
  auto h_new = ops::mul(o, ops::tanh(c_new));
  return {h_new, c_new};
}

inline void check_labels(std::span<const int> labels, std::size_t vocab) {
  for (int id : labels) {
    if (id <= kBlank || static_cast<std::size_t>(id) >= vocab) {
      throw ContractError("label id " + std::to_string(id) + " outside [1, " + std::to_string(vocab) + ")");
    }
  }
}

}  // namespace detail

/// Label encodings for every prefix: row u encodes labels[0..u), row 0 the
/// empty prefix (fed as blank). Output [(U+1) x pred_dim].
template <std::floating_point T>
Var<T> predictor_forward(Graph<T>& g, ParamStore<T>& s, const TransducerConfig& cfg, std::span<const int> labels) {
  detail::check_labels(labels, cfg.vocab_size);
  std::vector<int> inputs{kBlank};
  inputs.insert(inputs.end(), labels.begin(), labels.end());
  Var<T> x = ops::embedding(g.param(s, "pred.embed"), std::span<const int>(inputs));
  const std::size_t steps = inputs.size();
  for (std::size_t l = 0; l < cfg.pred_layers; ++l) {
    const std::string p = "pred.lstm" + std::to_string(l);
    auto xproj = ops::linear(x, g.param(s, p + ".wx"), g.param(s, p + ".b"));
    auto wh = g.param(s, p + ".wh");
    Var<T> h = g.constant(Tensor<T>({1, cfg.pred_dim}));
    Var<T> c = g.constant(Tensor<T>({1, cfg.pred_dim}));
    std::vector<Var<T>> outs;
    for (std::size_t u = 0; u < steps; ++u) {
      std::tie(h, c) = detail::lstm_cell(ops::slice_rows(xproj, u, u + 1), h, c, wh, cfg.pred_dim);
      outs.push_back(h);
    }
    x = steps == 1 ? outs[0] : ops::concat_rows(outs);
  }
  return x;
}

/// Advances the predictor by one label; returns the new top-layer output.
template <std::floating_point T>
Var<T> predictor_step(Graph<T>& g, ParamStore<T>& s, const TransducerConfig& cfg, int label, PredictorState<T>& st) {
  const int ids[1] = {label};
  Var<T> x = ops::embedding(g.param(s, "pred.embed"), std::span<const int>(ids));
  for (std::size_t l = 0; l < cfg.pred_layers; ++l) {
    const std::string p = "pred.lstm" + std::to_string(l);
    auto xproj = ops::linear(x, g.param(s, p + ".wx"), g.param(s, p + ".b"));
    std::tie(st.h[l], st.c[l]) = detail::lstm_cell(xproj, st.h[l], st.c[l], g.param(s, p + ".wh"), cfg.pred_dim);
    x = st.h[l];
  }
  return x;
}

// ----------------------------------------------------------------- joint

/// Optional stage applied to the head logits before normalisation (the
/// linear probe hooks in here).
template <std::floating_point T>
using LogitTransform = std::function<Var<T>(Var<T>)>;

/// Hidden activation tanh(We.enc_t + Wp.pred_u + b) for every (t, u); rows are
/// ordered t * (U+1) + u.
template <std::floating_point T>
Var<T> joint_hidden(Graph<T>& g, ParamStore<T>& s, Var<T> enc, Var<T> pred) {
  auto e = ops::matmul(enc, g.param(s, "joint.enc.w"));
  auto p = ops::add_bias(ops::matmul(pred, g.param(s, "joint.pred.w")), g.param(s, "joint.b"));
  return ops::tanh(ops::outer_add(e, p));
}

/// Lattice of log-probabilities z[t,u,k] as a [T*(U+1) x V] matrix.
template <std::floating_point T>
Var<T> joint_logits(Graph<T>& g, ParamStore<T>& s, Var<T> enc, Var<T> pred, const LogitTransform<T>& post = {}) {
  auto logits = ops::linear(joint_hidden(g, s, enc, pred), g.param(s, "joint.head.w"), g.param(s, "joint.head.b"));
  if (post) logits = post(logits);
  return ops::log_softmax_lastdim(logits);
}

// ----------------------------------------------------------------- loss

namespace detail {

template <class T>
T logadd(T a, T b) {
  if (a == -std::numeric_limits<T>::infinity()) return b;
  if (b == -std::numeric_limits<T>::infinity()) return a;
  const T m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// Forward variables alpha[t*(U+1)+u]; returns log P(labels | lattice).
template <class T>
T rnnt_alpha(const Tensor<T>& lp, std::size_t frames, std::span<const int> y, std::vector<T>& alpha) {
  const std::size_t u1 = y.size() + 1, v = lp.cols();
  auto z = [&](std::size_t t, std::size_t u, std::size_t k) { return lp[(t * u1 + u) * v + k]; };
  alpha.assign(frames * u1, -std::numeric_limits<T>::infinity());
  alpha[0] = 0;
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t u = 0; u < u1; ++u) {
      if (t == 0 && u == 0) continue;
      T a = -std::numeric_limits<T>::infinity();
      if (t > 0) a = alpha[(t - 1) * u1 + u] + z(t - 1, u, kBlank);
      if (u > 0) a = logadd(a, alpha[t * u1 + u - 1] + z(t, u - 1, static_cast<std::size_t>(y[u - 1])));
      alpha[t * u1 + u] = a;
    }
  return alpha[(frames - 1) * u1 + u1 - 1] + z(frames - 1, u1 - 1, kBlank);
}

template <class T>
void check_lattice(const Tensor<T>& lp, std::size_t frames, std::span<const int> y) {
  if (frames == 0) throw ContractError("rnnt_loss: T must be >= 1");
  if (lp.rank() != 2 || lp.rows() != frames * (y.size() + 1)) {
    throw DimensionError("rnnt_loss: lattice " + shape_str(lp.shape()) + " does not match T=" +
                         std::to_string(frames) + ", U=" + std::to_string(y.size()));
  }
  for (int id : y) {
    if (id <= kBlank || static_cast<std::size_t>(id) >= lp.cols()) throw ContractError("rnnt_loss: bad label id");
  }
}

}  // namespace detail

/// -log sum over alignments, by forward-variable dynamic programming.
template <std::floating_point T>
T rnnt_loss_value(const Tensor<T>& lattice, std::size_t frames, std::span<const int> labels) {
  detail::check_lattice(lattice, frames, labels);
  std::vector<T> alpha;
  return -detail::rnnt_alpha(lattice, frames, labels, alpha);
}

/// Differentiable transducer loss over a lattice Var [T*(U+1) x V].
template <std::floating_point T>
Var<T> rnnt_loss(Var<T> lattice, std::size_t frames, std::span<const int> labels) {
  const auto& lp = lattice.value();
  detail::check_lattice(lp, frames, labels);
  std::vector<T> alpha;
  const T logp = detail::rnnt_alpha(lp, frames, labels, alpha);
  std::vector<int> y(labels.begin(), labels.end());
  return lattice.graph->record(
      Tensor<T>({1}, -logp), {lattice},
      [lattice, frames, y = std::move(y), alpha = std::move(alpha), logp](Graph<T>& g, const Tensor<T>& gy) {
        const auto& lp = g.value(lattice);
        auto& gl = g.grad(lattice);
        const std::size_t u1 = y.size() + 1, v = lp.cols();
        auto z = [&](std::size_t t, std::size_t u, std::size_t k) { return lp[(t * u1 + u) * v + k]; };
        std::vector<T> beta(frames * u1, -std::numeric_limits<T>::infinity());
        for (std::size_t t = frames; t-- > 0;)
          for (std::size_t u = u1; u-- > 0;) {
            T b = -std::numeric_limits<T>::infinity();
            if (t == frames - 1 && u == u1 - 1) b = z(t, u, kBlank);
            if (t + 1 < frames) b = detail::logadd(b, beta[(t + 1) * u1 + u] + z(t, u, kBlank));
            if (u + 1 < u1) b = detail::logadd(b, beta[t * u1 + u + 1] + z(t, u, static_cast<std::size_t>(y[u])));
            beta[t * u1 + u] = b;
          }
        const T scale = gy[0];
        for (std::size_t t = 0; t < frames; ++t)
          for (std::size_t u = 0; u < u1; ++u) {
            const T a = alpha[t * u1 + u];
            const std::size_t row = (t * u1 + u) * v;
            T next_blank = -std::numeric_limits<T>::infinity();
            if (t + 1 < frames) next_blank = beta[(t + 1) * u1 + u];
            if (t == frames - 1 && u == u1 - 1) next_blank = 0;
            gl[row + kBlank] -= scale * std::exp(a + z(t, u, kBlank) + next_blank - logp);
            if (u + 1 < u1) {
              const auto k = static_cast<std::size_t>(y[u]);
              gl[row + k] -= scale * std::exp(a + z(t, u, k) + beta[t * u1 + u + 1] - logp);
            }
          }
      });
}

struct BruteForceResult {
  double loss = 0;
  std::size_t paths = 0;
};

/// Exhaustive enumeration of every monotonic blank/label interleaving that
/// ends with the final blank at (T-1, U). Independent of the recursion above.
template <std::floating_point T>
BruteForceResult rnnt_loss_bruteforce(const Tensor<T>& lattice, std::size_t frames, std::span<const int> labels) {
  detail::check_lattice(lattice, frames, labels);
  const std::size_t big_u = labels.size();
  if (frames + big_u > 12) throw ContractError("rnnt_loss_bruteforce: T+U exceeds the enumeration guard of 12");
  const std::size_t u1 = big_u + 1, v = lattice.cols();
  std::vector<double> path_logps;
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t t, std::size_t u, double acc) {
    const double blank = static_cast<double>(lattice[(t * u1 + u) * v + kBlank]);
    if (t == frames - 1 && u == big_u) {
      path_logps.push_back(acc + blank);
      return;
    }
    if (t + 1 < frames) walk(t + 1, u, acc + blank);
    if (u < big_u) {
      walk(t, u + 1, acc + static_cast<double>(lattice[(t * u1 + u) * v + static_cast<std::size_t>(labels[u])]));
    }
  };
  walk(0, 0, 0.0);
  const double mx = *std::max_element(path_logps.begin(), path_logps.end());
  double s = 0;
  for (double lp : path_logps) s += std::exp(lp - mx);
  return {-(mx + std::log(s)), path_logps.size()};
}

// ----------------------------------------------------------------- decoding

/// Greedy transducer search over encoder frames `enc`. At each frame the
/// argmax symbol is emitted until blank wins or `max_symbols_per_frame`
/// labels were emitted; each emission advances the predictor.
template <std::floating_point T>
Transcript greedy_decode(Graph<T>& g, ParamStore<T>& s, const TransducerConfig& cfg, Var<T> enc,
                         std::size_t max_symbols_per_frame = 4, const LogitTransform<T>& post = {}) {
  if (max_symbols_per_frame < 1) throw ContractError("max_symbols_per_frame must be >= 1");
  Transcript out;
  auto st = initial_state(g, cfg);
  Var<T> pred = predictor_step(g, s, cfg, kBlank, st);
  auto e = ops::matmul(enc, g.param(s, "joint.enc.w"));
  auto wp = g.param(s, "joint.pred.w");
  auto jb = g.param(s, "joint.b");
  auto hw = g.param(s, "joint.head.w");
  auto hb = g.param(s, "joint.head.b");
  Var<T> p = ops::add_bias(ops::matmul(pred, wp), jb);
  const std::size_t frames = e.value().dim(0);
  for (std::size_t t = 0; t < frames; ++t) {
    auto et = ops::slice_rows(e, t, t + 1);
    for (std::size_t n = 0; n < max_symbols_per_frame; ++n) {
      auto logits = ops::linear(ops::tanh(ops::add(et, p)), hw, hb);
      if (post) logits = post(logits);
      const auto& lv = logits.value();
      const auto best = static_cast<int>(std::max_element(lv.data().begin(), lv.data().end()) - lv.data().begin());
      if (best == kBlank) break;
      out.push_back(best);
      pred = predictor_step(g, s, cfg, best, st);
      p = ops::add_bias(ops::matmul(pred, wp), jb);
    }
  }
  return out;
}

}  // namespace car

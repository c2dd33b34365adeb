// SPDX-License-Identifier: Apache-2.0
//
// Differentiable op catalog. Every op takes and returns Var handles on one
// Graph, validates its shape contract up front, and records a closure that
// accumulates input gradients. Matrices are rank-2 [rows x cols]; rank-1
// tensors are treated as a single row.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "car/errors.hpp"
#include "car/graph.hpp"
#include "car/tensor.hpp"

namespace car::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;

template <class T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
void require_matrix(const char* op, const Tensor<T>& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Uniform [0,1) from (seed, step, layer, index); stateless so any forward
/// pass can be replayed exactly.
inline double counter_uniform(std::uint64_t seed, std::uint64_t step, std::uint64_t layer,
                              std::uint64_t index) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ step);
  h = splitmix64(h ^ (layer * 0x100000001b3ULL));
  h = splitmix64(h ^ index);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace detail

// ----------------------------------------------------------------- elementwise

template <std::floating_point T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same("add", a.value(), b.value());
  Tensor<T> y = a.value();
  detail::accumulate(y, b.value());
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& gy) {
    if (g.requires_grad(a)) detail::accumulate(g.grad(a), gy);
    if (g.requires_grad(b)) detail::accumulate(g.grad(b), gy);
  });
}

template <std::floating_point T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same("sub", a.value(), b.value());
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& gy) {
    if (g.requires_grad(a)) detail::accumulate(g.grad(a), gy);
    if (g.requires_grad(b)) {
      auto& gb = g.grad(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
    }
  });
}

/// Hadamard product.
template <std::floating_point T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same("mul", a.value(), b.value());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return a.graph->record(std::move(y), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& gy) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.requires_grad(a)) {
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      auto& gb = g.grad(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

template <std::floating_point T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> y = a.value();
  for (auto& v : y.data()) v *= s;
  return a.graph->record(std::move(y), {a}, [a, s](Graph<T>& g, const Tensor<T>& gy) {
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += s * gy[i];
  });
}

/// y = x + b with b broadcast along every row; b holds cols(x) values.
template <std::floating_point T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match trailing dim of " +
                         shape_str(xv.shape()));
  }
  Tensor<T> y = xv;
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] += bv[j];
  return x.graph->record(std::move(y), {x, b}, [x, b, c](Graph<T>& g, const Tensor<T>& gy) {
    if (g.requires_grad(x)) detail::accumulate(g.grad(x), gy);
    if (g.requires_grad(b)) {
      auto& gb = g.grad(b);
      for (std::size_t r = 0; r < gy.size() / c; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += gy[r * c + j];
    }
  });
}

namespace detail {

template <class T, class F, class DF>
Var<T> pointwise(Var<T> x, F f, DF dfdx) {
  const auto& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return x.graph->record(std::move(y), {x}, [x, dfdx](Graph<T>& g, const Tensor<T>& gy) {
    const auto& xv = g.value(x);
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * dfdx(xv[i]);
  });
}

template <class T>
T sigmoid(T v) {
  return v >= 0 ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
}

}  // namespace detail

template <std::floating_point T>
Var<T> sigmoid(Var<T> x) {
  return detail::pointwise(
      x, [](T v) { return detail::sigmoid(v); },
      [](T v) {
        const T s = detail::sigmoid(v);
        return s * (T{1} - s);
      });
}

template <std::floating_point T>
Var<T> tanh(Var<T> x) {
  return detail::pointwise(
      x, [](T v) { return std::tanh(v); },
      [](T v) {
        const T t = std::tanh(v);
        return T{1} - t * t;
      });
}

/// x * sigmoid(x)
template <std::floating_point T>
Var<T> swish(Var<T> x) {
  return detail::pointwise(
      x, [](T v) { return v * detail::sigmoid(v); },
      [](T v) {
        const T s = detail::sigmoid(v);
        return s + v * s * (T{1} - s);
      });
}

template <std::floating_point T>
Var<T> exp(Var<T> x) {
  return detail::pointwise(
      x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

/// Natural log; inputs must be positive.
template <std::floating_point T>
Var<T> log(Var<T> x) {
  for (auto v : x.value().data()) {
    if (!(v > T{0})) throw ContractError("log: non-positive input");
  }
  return detail::pointwise(
      x, [](T v) { return std::log(v); }, [](T v) { return T{1} / v; });
}

/// GLU over the trailing dim: [a ; b] -> a * sigmoid(b).
template <std::floating_point T>
Var<T> glu(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t c2 = xv.cols();
  if (c2 % 2 != 0) throw DimensionError("glu: trailing dim must be even, got " + shape_str(xv.shape()));
  const std::size_t c = c2 / 2;
  const std::size_t rows = xv.rows();
  Shape shape = xv.shape();
  shape.back() = c;
  Tensor<T> y(shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j)
      y[r * c + j] = xv[r * c2 + j] * detail::sigmoid(xv[r * c2 + c + j]);
  return x.graph->record(std::move(y), {x}, [x, c, c2, rows](Graph<T>& g, const Tensor<T>& gy) {
    const auto& xv = g.value(x);
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const T a = xv[r * c2 + j];
        const T s = detail::sigmoid(xv[r * c2 + c + j]);
        const T go = gy[r * c + j];
        gx[r * c2 + j] += go * s;
        gx[r * c2 + c + j] += go * a * s * (T{1} - s);
      }
  });
}

// ----------------------------------------------------------------- linear algebra

/// [M x K] . [K x N] -> [M x N]; d/da = g.b^T, d/db = a^T.g
template <std::floating_point T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  const auto m = static_cast<Eigen::Index>(av.dim(0));
  const auto k = static_cast<Eigen::Index>(av.dim(1));
  const auto n = static_cast<Eigen::Index>(bv.dim(1));
  Tensor<T> y({av.dim(0), bv.dim(1)});
  detail::Map<T>(y.data().data(), m, n).noalias() =
      detail::MapC<T>(av.data().data(), m, k) * detail::MapC<T>(bv.data().data(), k, n);
  return a.graph->record(std::move(y), {a, b}, [a, b, m, k, n](Graph<T>& g, const Tensor<T>& gy) {
    detail::MapC<T> G(gy.data().data(), m, n);
    if (g.requires_grad(a)) {
      detail::Map<T>(g.grad(a).data().data(), m, k).noalias() +=
          G * detail::MapC<T>(g.value(b).data().data(), k, n).transpose();
    }
    if (g.requires_grad(b)) {
      detail::Map<T>(g.grad(b).data().data(), k, n).noalias() +=
          detail::MapC<T>(g.value(a).data().data(), m, k).transpose() * G;
    }
  });
}

template <std::floating_point T>
Var<T> transpose(Var<T> x) {
  const auto& xv = x.value();
  detail::require_matrix("transpose", xv);
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<T> y({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = xv[i * c + j];
  return x.graph->record(std::move(y), {x}, [x, r, c](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[j * r + i];
  });
}

/// x.W + b for x [R x I], W [I x O], b [O].
template <std::floating_point T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_bias(matmul(x, w), b);
}

// ----------------------------------------------------------------- normalisation

/// Per-row normalisation over the trailing dim with affine gamma/beta [C].
template <std::floating_point T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols(), rows = xv.rows();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw DimensionError("layer_norm: affine params must have " + std::to_string(c) + " entries");
  }
  Tensor<T> y(xv.shape());
  std::vector<T> xhat(xv.size()), rstd(rows);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T mean{0};
    for (std::size_t j = 0; j < c; ++j) mean += xv[r * c + j];
    mean /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) {
      const T d = xv[r * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    rstd[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (xv[r * c + j] - mean) * rstd[r];
      y[r * c + j] = xhat[r * c + j] * gv[j] + bv[j];
    }
  }
  return x.graph->record(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, c, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
          Graph<T>& g, const Tensor<T>& gy) {
        const auto& gv = g.value(gamma);
        if (g.requires_grad(gamma)) {
          auto& gg = g.grad(gamma);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gg[j] += gy[r * c + j] * xhat[r * c + j];
        }
        if (g.requires_grad(beta)) {
          auto& gb = g.grad(beta);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gb[j] += gy[r * c + j];
        }
        if (g.requires_grad(x)) {
          auto& gx = g.grad(x);
          const T inv_c = T{1} / static_cast<T>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            T s1{0}, s2{0};
            for (std::size_t j = 0; j < c; ++j) {
              const T dxh = gy[r * c + j] * gv[j];
              s1 += dxh;
              s2 += dxh * xhat[r * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const T dxh = gy[r * c + j] * gv[j];
              gx[r * c + j] += rstd[r] * (dxh - inv_c * s1 - xhat[r * c + j] * inv_c * s2);
            }
          }
        }
      });
}

/// Per-frame group normalisation: the C channels of each row are split into
/// `groups` contiguous groups, each normalised on its own, then a per-channel
/// affine is applied.
template <std::floating_point T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::size_t groups, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols(), rows = xv.rows();
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw DimensionError("group_norm: affine params must have " + std::to_string(c) + " entries");
  }
  const std::size_t m = c / groups;
  Tensor<T> y(xv.shape());
  std::vector<T> xhat(xv.size()), rstd(rows * groups);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < groups; ++q) {
      const std::size_t base = r * c + q * m;
      T mean{0};
      for (std::size_t j = 0; j < m; ++j) mean += xv[base + j];
      mean /= static_cast<T>(m);
      T var{0};
      for (std::size_t j = 0; j < m; ++j) {
        const T d = xv[base + j] - mean;
        var += d * d;
      }
      var /= static_cast<T>(m);
      const T rs = T{1} / std::sqrt(var + eps);
      rstd[r * groups + q] = rs;
      for (std::size_t j = 0; j < m; ++j) {
        xhat[base + j] = (xv[base + j] - mean) * rs;
        y[base + j] = xhat[base + j] * gv[q * m + j] + bv[q * m + j];
      }
    }
  }
  return x.graph->record(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, c, rows, m, groups, xhat = std::move(xhat), rstd = std::move(rstd)](
          Graph<T>& g, const Tensor<T>& gy) {
        const auto& gv = g.value(gamma);
        if (g.requires_grad(gamma)) {
          auto& gg = g.grad(gamma);
          for (std::size_t i = 0; i < gy.size(); ++i) gg[i % c] += gy[i] * xhat[i];
        }
        if (g.requires_grad(beta)) {
          auto& gb = g.grad(beta);
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i % c] += gy[i];
        }
        if (g.requires_grad(x)) {
          auto& gx = g.grad(x);
          const T inv_m = T{1} / static_cast<T>(m);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t q = 0; q < groups; ++q) {
              const std::size_t base = r * c + q * m;
              T s1{0}, s2{0};
              for (std::size_t j = 0; j < m; ++j) {
                const T dxh = gy[base + j] * gv[q * m + j];
                s1 += dxh;
                s2 += dxh * xhat[base + j];
              }
              const T rs = rstd[r * groups + q];
              for (std::size_t j = 0; j < m; ++j) {
                const T dxh = gy[base + j] * gv[q * m + j];
                gx[base + j] += rs * (dxh - inv_m * s1 - xhat[base + j] * inv_m * s2);
              }
            }
          }
        }
      });
}

// ----------------------------------------------------------------- convolutions

/// Same-padded depthwise convolution over time: x [T x C], w [K x C], K odd.
/// y[t,c] = sum_k w[k,c] * x[t + k - K/2, c], zero outside [0, T).
template <std::floating_point T>
Var<T> depthwise_conv1d(Var<T> x, Var<T> w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require_matrix("depthwise_conv1d", xv);
  if (wv.rank() != 2 || wv.dim(1) != xv.dim(1) || wv.dim(0) % 2 == 0) {
    throw DimensionError("depthwise_conv1d: kernel " + shape_str(wv.shape()) +
                         " must be [odd K x C] for input " + shape_str(xv.shape()));
  }
  const std::size_t tlen = xv.dim(0), c = xv.dim(1), k = wv.dim(0);
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  Tensor<T> y(xv.shape());
  for (std::size_t t = 0; t < tlen; ++t)
    for (std::size_t kk = 0; kk < k; ++kk) {
      const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + kk) - half;
      if (s < 0 || s >= static_cast<std::ptrdiff_t>(tlen)) continue;
      for (std::size_t j = 0; j < c; ++j) y[t * c + j] += wv[kk * c + j] * xv[s * c + j];
    }
  return x.graph->record(std::move(y), {x, w}, [x, w, tlen, c, k, half](Graph<T>& g, const Tensor<T>& gy) {
    const auto& xv = g.value(x);
    const auto& wv = g.value(w);
    const bool gx_on = g.requires_grad(x), gw_on = g.requires_grad(w);
    Tensor<T>* gx = gx_on ? &g.grad(x) : nullptr;
    Tensor<T>* gw = gw_on ? &g.grad(w) : nullptr;
    for (std::size_t t = 0; t < tlen; ++t)
      for (std::size_t kk = 0; kk < k; ++kk) {
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + kk) - half;
        if (s < 0 || s >= static_cast<std::ptrdiff_t>(tlen)) continue;
        for (std::size_t j = 0; j < c; ++j) {
          const T go = gy[t * c + j];
          if (gx) (*gx)[s * c + j] += go * wv[kk * c + j];
          if (gw) (*gw)[kk * c + j] += go * xv[s * c + j];
        }
      }
  });
}

/// Single-channel same-padded 2-D convolution (cross-correlation) of the
/// plane x [H x W] with kernel [kh x kw], both kernel dims odd.
template <std::floating_point T>
Var<T> conv2d(Var<T> x, Var<T> kernel) {
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  detail::require_matrix("conv2d", xv);
  if (kv.rank() != 2 || kv.dim(0) % 2 == 0 || kv.dim(1) % 2 == 0) {
    throw DimensionError("conv2d: kernel must be [odd x odd], got " + shape_str(kv.shape()));
  }
  const std::ptrdiff_t h = xv.dim(0), wd = xv.dim(1);
  const std::ptrdiff_t kh = kv.dim(0), kw = kv.dim(1);
  const std::ptrdiff_t ph = kh / 2, pw = kw / 2;
  Tensor<T> y(xv.shape());
  for (std::ptrdiff_t i = 0; i < h; ++i)
    for (std::ptrdiff_t a = 0; a < kh; ++a) {
      const std::ptrdiff_t si = i + a - ph;
      if (si < 0 || si >= h) continue;
      for (std::ptrdiff_t b = 0; b < kw; ++b) {
        const T kval = kv[a * kw + b];
        for (std::ptrdiff_t j = 0; j < wd; ++j) {
          const std::ptrdiff_t sj = j + b - pw;
          if (sj < 0 || sj >= wd) continue;
          y[i * wd + j] += kval * xv[si * wd + sj];
        }
      }
    }
  return x.graph->record(std::move(y), {x, kernel},
                         [x, kernel, h, wd, kh, kw, ph, pw](Graph<T>& g, const Tensor<T>& gy) {
    const auto& xv = g.value(x);
    const auto& kv = g.value(kernel);
    Tensor<T>* gx = g.requires_grad(x) ? &g.grad(x) : nullptr;
    Tensor<T>* gk = g.requires_grad(kernel) ? &g.grad(kernel) : nullptr;
    for (std::ptrdiff_t i = 0; i < h; ++i)
      for (std::ptrdiff_t a = 0; a < kh; ++a) {
        const std::ptrdiff_t si = i + a - ph;
        if (si < 0 || si >= h) continue;
        for (std::ptrdiff_t b = 0; b < kw; ++b) {
          for (std::ptrdiff_t j = 0; j < wd; ++j) {
            const std::ptrdiff_t sj = j + b - pw;
            if (sj < 0 || sj >= wd) continue;
            const T go = gy[i * wd + j];
            if (gx) (*gx)[si * wd + sj] += go * kv[a * kw + b];
            if (gk) (*gk)[a * kw + b] += go * xv[si * wd + sj];
          }
        }
      }
  });
}

// ----------------------------------------------------------------- softmax family

template <std::floating_point T>
Var<T> softmax_lastdim(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols(), rows = xv.rows();
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, xv[r * c + j]);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) {
      y[r * c + j] = std::exp(xv[r * c + j] - mx);
      s += y[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] /= s;
  }
  Tensor<T> saved = y;
  return x.graph->record(std::move(y), {x}, [x, c, rows, saved = std::move(saved)](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += gy[r * c + j] * saved[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += saved[r * c + j] * (gy[r * c + j] - dot);
    }
  });
}

template <std::floating_point T>
Var<T> log_softmax_lastdim(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols(), rows = xv.rows();
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, xv[r * c + j]);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += std::exp(xv[r * c + j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = xv[r * c + j] - lse;
  }
  Tensor<T> saved = y;
  return x.graph->record(std::move(y), {x}, [x, c, rows, saved = std::move(saved)](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      T s{0};
      for (std::size_t j = 0; j < c; ++j) s += gy[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gy[r * c + j] - std::exp(saved[r * c + j]) * s;
    }
  });
}

// ----------------------------------------------------------------- indexing

/// Rows of `table` [V x E] selected by `ids` -> [n x E].
template <std::floating_point T>
Var<T> embedding(Var<T> table, std::span<const int> ids) {
  const auto& tv = table.value();
  detail::require_matrix("embedding", tv);
  const std::size_t vocab = tv.dim(0), e = tv.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor<T> y({idv.size(), e});
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= vocab) {
      throw ContractError("embedding: id " + std::to_string(idv[i]) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
    std::copy_n(tv.data().begin() + idv[i] * e, e, y.data().begin() + i * e);
  }
  return table.graph->record(std::move(y), {table}, [table, e, idv = std::move(idv)](Graph<T>& g, const Tensor<T>& gy) {
    auto& gt = g.grad(table);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < e; ++j) gt[idv[i] * e + j] += gy[i * e + j];
  });
}

/// Row subset: y[i] = x[rows[i]] (repeats allowed).
template <std::floating_point T>
Var<T> select_rows(Var<T> x, std::span<const std::size_t> rows) {
  const auto& xv = x.value();
  detail::require_matrix("select_rows", xv);
  if (rows.empty()) throw DimensionError("select_rows: empty row list");
  const std::size_t c = xv.dim(1);
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  Tensor<T> y({rv.size(), c});
  for (std::size_t i = 0; i < rv.size(); ++i) {
    if (rv[i] >= xv.dim(0)) throw DimensionError("select_rows: row index out of range");
    std::copy_n(xv.data().begin() + rv[i] * c, c, y.data().begin() + i * c);
  }
  return x.graph->record(std::move(y), {x}, [x, c, rv = std::move(rv)](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < rv.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gx[rv[i] * c + j] += gy[i * c + j];
  });
}

/// Per-row column pick: x [R x C], idx holds R*K column ids -> [R x K].
template <std::floating_point T>
Var<T> gather(Var<T> x, std::span<const std::size_t> idx, std::size_t per_row) {
  const auto& xv = x.value();
  detail::require_matrix("gather", xv);
  const std::size_t rows = xv.dim(0), c = xv.dim(1);
  if (per_row == 0 || idx.size() != rows * per_row) {
    throw DimensionError("gather: need " + std::to_string(rows) + " x k indices");
  }
  std::vector<std::size_t> iv(idx.begin(), idx.end());
  Tensor<T> y({rows, per_row});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < per_row; ++k) {
      if (iv[r * per_row + k] >= c) throw DimensionError("gather: column index out of range");
      y[r * per_row + k] = xv[r * c + iv[r * per_row + k]];
    }
  return x.graph->record(std::move(y), {x}, [x, c, per_row, rows, iv = std::move(iv)](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < per_row; ++k) gx[r * c + iv[r * per_row + k]] += gy[r * per_row + k];
  });
}

/// Column-wise concatenation of matrices with equal row counts.
template <std::floating_point T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> offs;
  for (const auto& p : parts) {
    detail::require_matrix("concat_cols", p.value());
    if (p.value().dim(0) != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    offs.push_back(total);
    total += p.value().dim(1);
  }
  Tensor<T> y({rows, total});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& pv = parts[i].value();
    const std::size_t c = pv.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data().begin() + r * c, c, y.data().begin() + r * total + offs[i]);
  }
  return parts[0].graph->record(std::move(y), parts, [parts, offs, rows, total](Graph<T>& g, const Tensor<T>& gy) {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!g.requires_grad(parts[i])) continue;
      auto& gp = g.grad(parts[i]);
      const std::size_t c = gp.dim(1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += gy[r * total + offs[i] + j];
    }
  });
}

/// Row-wise concatenation of matrices with equal column counts.
template <std::floating_point T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix("concat_rows", p.value());
    if (p.value().dim(1) != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.value().dim(0);
  }
  Tensor<T> y({total, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), y.data().begin() + off);
    off += p.value().size();
  }
  return parts[0].graph->record(std::move(y), parts, [parts](Graph<T>& g, const Tensor<T>& gy) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t n = g.value(p).size();
      if (g.requires_grad(p)) {
        auto& gp = g.grad(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += gy[off + i];
      }
      off += n;
    }
  });
}

/// Columns [begin, end) of a matrix.
template <std::floating_point T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  detail::require_matrix("slice_cols", xv);
  if (begin >= end || end > xv.dim(1)) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") for " + shape_str(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), c = xv.dim(1), w = end - begin;
  Tensor<T> y({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data().begin() + r * c + begin, w, y.data().begin() + r * w);
  return x.graph->record(std::move(y), {x}, [x, rows, c, w, begin](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) gx[r * c + begin + j] += gy[r * w + j];
  });
}

/// Rows [begin, end) of a matrix.
template <std::floating_point T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  detail::require_matrix("slice_rows", xv);
  if (begin >= end || end > xv.dim(0)) {
    throw DimensionError("slice_rows: bad range for " + shape_str(xv.shape()));
  }
  const std::size_t c = xv.dim(1);
  Tensor<T> y({end - begin, c});
  std::copy_n(xv.data().begin() + begin * c, (end - begin) * c, y.data().begin());
  return x.graph->record(std::move(y), {x}, [x, begin, c](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[begin * c + i] += gy[i];
  });
}

// ----------------------------------------------------------------- reductions

template <std::floating_point T>
Var<T> sum(Var<T> x) {
  T s{0};
  for (auto v : x.value().data()) s += v;
  return x.graph->record(Tensor<T>({1}, s), {x}, [x](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (auto& v : gx.data()) v += gy[0];
  });
}

template <std::floating_point T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Mean over rows: [R x C] -> [1 x C].
template <std::floating_point T>
Var<T> mean_rows(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  Tensor<T> y({1, c});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) y[j] += xv[r * c + j];
  for (auto& v : y.data()) v /= static_cast<T>(rows);
  return x.graph->record(std::move(y), {x}, [x, rows, c](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    const T inv = T{1} / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gy[j] * inv;
  });
}

/// Sum over the trailing dim: [R x C] -> [R x 1].
template <std::floating_point T>
Var<T> sum_cols(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  Tensor<T> y({rows, 1});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) y[r] += xv[r * c + j];
  return x.graph->record(std::move(y), {x}, [x, rows, c](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gy[r];
  });
}

/// x [R x C] scaled row-wise by s [R x 1].
template <std::floating_point T>
Var<T> mul_rowwise(Var<T> x, Var<T> s) {
  const auto& xv = x.value();
  const auto& sv = s.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  if (sv.size() != rows) {
    throw DimensionError("mul_rowwise: scale " + shape_str(sv.shape()) + " vs " + shape_str(xv.shape()));
  }
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = xv[r * c + j] * sv[r];
  return x.graph->record(std::move(y), {x, s}, [x, s, rows, c](Graph<T>& g, const Tensor<T>& gy) {
    const auto& xv = g.value(x);
    const auto& sv = g.value(s);
    if (g.requires_grad(x)) {
      auto& gx = g.grad(x);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gy[r * c + j] * sv[r];
    }
    if (g.requires_grad(s)) {
      auto& gs = g.grad(s);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gs[r] += gy[r * c + j] * xv[r * c + j];
    }
  });
}

/// Rows scaled to unit L2 norm (eps guards the zero row).
template <std::floating_point T>
Var<T> normalize_rows(Var<T> x, T eps = T(1e-8)) {
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  Tensor<T> y(xv.shape());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += xv[r * c + j] * xv[r * c + j];
    norms[r] = std::sqrt(s + eps);
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = xv[r * c + j] / norms[r];
  }
  Tensor<T> saved = y;
  return x.graph->record(std::move(y), {x},
                         [x, rows, c, norms = std::move(norms), saved = std::move(saved)](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += gy[r * c + j] * saved[r * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[r * c + j] += (gy[r * c + j] - saved[r * c + j] * dot) / norms[r];
    }
  });
}

/// Every pairwise row sum: a [A x J], b [B x J] -> [(A*B) x J], row i*B + j
/// holding a[i] + b[j]. This is the joint-network broadcast.
template <std::floating_point T>
Var<T> outer_add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_matrix("outer_add", av);
  detail::require_matrix("outer_add", bv);
  if (av.dim(1) != bv.dim(1)) {
    throw DimensionError("outer_add: width mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const std::size_t na = av.dim(0), nb = bv.dim(0), c = av.dim(1);
  Tensor<T> y({na * nb, c});
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j)
      for (std::size_t k = 0; k < c; ++k) y[(i * nb + j) * c + k] = av[i * c + k] + bv[j * c + k];
  return a.graph->record(std::move(y), {a, b}, [a, b, na, nb, c](Graph<T>& g, const Tensor<T>& gy) {
    Tensor<T>* ga = g.requires_grad(a) ? &g.grad(a) : nullptr;
    Tensor<T>* gb = g.requires_grad(b) ? &g.grad(b) : nullptr;
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j)
        for (std::size_t k = 0; k < c; ++k) {
          const T go = gy[(i * nb + j) * c + k];
          if (ga) (*ga)[i * c + k] += go;
          if (gb) (*gb)[j * c + k] += go;
        }
  });
}

/// Inverted dropout. Identity when the graph is in eval mode or rate == 0.
/// The mask depends only on (graph seed, graph step, layer_id, element index).
template <std::floating_point T>
Var<T> dropout(Var<T> x, double rate, std::uint64_t layer_id) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
  auto& g = *x.graph;
  if (!g.train() || rate == 0.0) return x;
  const auto& xv = x.value();
  std::vector<T> mask(xv.size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = detail::counter_uniform(g.seed(), g.step(), layer_id, i) < rate ? T{0} : keep_scale;
  }
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * mask[i];
  return g.record(std::move(y), {x}, [x, mask = std::move(mask)](Graph<T>& g, const Tensor<T>& gy) {
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * mask[i];
  });
}

}  // namespace car::ops

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <deque>
#include <unordered_map>
#include <vector>

#include "car/errors.hpp"
#include "car/param_store.hpp"
#include "car/tensor.hpp"

namespace car {

template <std::floating_point T>
class Graph;

/// Handle to a node of a Graph.
template <std::floating_point T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return graph->requires_grad(*this); }
};

/// Tape of op records in creation (= topological) order. One graph per
/// forward pass; it is not safe to extend a graph from several threads.
template <std::floating_point T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  /// `train` selects dropout behaviour; `seed` and `step` feed the
  /// counter-based dropout masks; `grad_enabled = false` records no closures.
  explicit Graph(bool train = false, std::uint64_t seed = 0, std::uint64_t step = 0,
                 bool grad_enabled = true)
      : train_(train), grad_enabled_(grad_enabled), seed_(seed), step_(step) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  bool train() const noexcept { return train_; }
  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t step() const noexcept { return step_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Non-differentiable input.
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// Free leaf; its gradient is readable with grad() after backward.
  Var<T> input(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad && grad_enabled_, {});
  }

  /// Leaf bound to a store entry. Gradients accumulate into entry.grad only
  /// when the entry is trainable; frozen entries are never written.
  Var<T> param(ParamEntry<T>& entry) {
    auto it = param_nodes_.find(&entry);
    if (it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.external = &entry.value;
    n.requires_grad = grad_enabled_ && entry.trainable;
    if (n.requires_grad) n.sink = &entry.grad;
    nodes_.push_back(std::move(n));
    param_nodes_.emplace(&entry, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }
  Var<T> param(ParamStore<T>& store, std::string_view name) { return param(store.at(name)); }

  /// Records an op result. `backward` is kept only if some input needs a gradient.
  Var<T> record(Tensor<T> out, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || requires_grad(v);
#ifndef NDEBUG
    bool finite_in = true;
    for (const auto& v : inputs) finite_in = finite_in && value(v).all_finite();
    if (finite_in && !out.all_finite()) throw NumericError("non-finite op output on finite inputs");
#endif
    return push(std::move(out), rg, rg ? std::move(backward) : Backward{});
  }
  Var<T> record(Tensor<T> out, const std::vector<Var<T>>& inputs, Backward backward) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || requires_grad(v);
    return push(std::move(out), rg, rg ? std::move(backward) : Backward{});
  }

  const Tensor<T>& value(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first touch.
  Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape(), T{0});
    return n.grad;
  }

  /// Reverse sweep from a scalar loss. Each node is visited once, in reverse
  /// creation order; parameter leaves flush into their store entries.
  void backward(Var<T> loss) {
    if (value(loss).size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(value(loss).shape()));
    }
    if (!requires_grad(loss)) return;
    grad(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) {
        Tensor<T> g = std::move(n.grad);
        n.backward(*this, g);
        n.grad = std::move(g);
      } else if (n.sink) {
        auto dst = n.sink->data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Tensor<T>* sink = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> value, bool rg, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // deque: value() references survive later pushes
  std::unordered_map<const ParamEntry<T>*, std::size_t> param_nodes_;
  bool train_;
  bool grad_enabled_;
  std::uint64_t seed_;
  std::uint64_t step_;
};

}  // namespace car

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "car/errors.hpp"
#include "car/tensor.hpp"

namespace car {

/// What a parameter is, independent of where it lives.
enum class Role : std::uint8_t { kWeight = 0, kBias = 1, kReprogram = 2, kAdapter = 3, kProbe = 4 };

inline std::string_view role_name(Role r) {
  switch (r) {
    case Role::kWeight: return "weight";
    case Role::kBias: return "bias";
    case Role::kReprogram: return "reprogram";
    case Role::kAdapter: return "adapter";
    case Role::kProbe: return "probe";
  }
  return "?";
}

template <std::floating_point T>
struct ParamEntry {
  std::string name;
  Role role = Role::kWeight;
  bool trainable = true;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Named parameter tensors in insertion order. Names are dot-separated paths
/// whose first component is the owning module ("enc", "pred", "joint", "rp", ...).
template <std::floating_point T>
class ParamStore {
 public:
  ParamEntry<T>& add(std::string name, Role role, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    Tensor<T> grad(value.shape(), T{0});
    entries_.push_back({std::move(name), role, trainable, std::move(value), std::move(grad)});
    return entries_.back();
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  ParamEntry<T>& at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return entries_[it->second];
  }
  const ParamEntry<T>& at(std::string_view name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  std::vector<ParamEntry<T>>& entries() noexcept { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(T{0});
  }

  /// Removes every entry whose name starts with `prefix`.
  void erase_prefix(std::string_view prefix) {
    std::vector<ParamEntry<T>> kept;
    for (auto& e : entries_) {
      if (!std::string_view(e.name).starts_with(prefix)) kept.push_back(std::move(e));
    }
    entries_ = std::move(kept);
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].name, i);
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <std::floating_point U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.role, e.value.template cast<U>(), e.trainable);
    return out;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Deterministic parameter initialisers.
template <std::floating_point T>
Tensor<T> uniform_init(Shape shape, T bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

/// Glorot-uniform for a [fan_in x fan_out] matrix.
template <std::floating_point T>
Tensor<T> glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init<T>({fan_in, fan_out}, static_cast<T>(bound), rng);
}

}  // namespace car

// SPDX-License-Identifier: Apache-2.0
//
// Adaptation schemes: which modules get inserted into a pretrained store,
// which parameters train, and what happens to the output head. Also the
// residual adapter, the linear probe, and exact parameter accounting.
#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "car/conformer.hpp"
#include "car/errors.hpp"
#include "car/graph.hpp"
#include "car/ops.hpp"
#include "car/param_store.hpp"
#include "car/reprogram.hpp"
#include "car/transducer.hpp"

namespace car {

// ----------------------------------------------------------------- adapter

struct AdapterConfig {
  std::size_t bottleneck = 40;
};

template <std::floating_point T>
void init_adapter(ParamStore<T>& s, const std::string& prefix, std::size_t width, std::size_t bottleneck,
                  std::mt19937_64& rng) {
  if (bottleneck == 0) throw ConfigError("adapter bottleneck must be >= 1");
  const Role r = Role::kAdapter;
  s.add(prefix + ".ln.g", r, Tensor<T>({width}, T{1}));
  s.add(prefix + ".ln.b", r, Tensor<T>({width}));
  s.add(prefix + ".down.w", r, glorot<T>(width, bottleneck, rng));
  s.add(prefix + ".down.b", r, Tensor<T>({bottleneck}));
  s.add(prefix + ".up.w", r, Tensor<T>({bottleneck, width}));
  s.add(prefix + ".up.b", r, Tensor<T>({width}));
}

inline std::size_t adapter_param_count(std::size_t width, std::size_t bottleneck) {
  return (width * bottleneck + bottleneck) + (bottleneck * width + width) + 2 * width;
}

/// h + Up(swish(Down(layer_norm(h)))).
template <std::floating_point T>
Var<T> adapter_forward(Graph<T>& g, ParamStore<T>& s, const std::string& prefix, Var<T> h) {
  auto z = ops::layer_norm(h, g.param(s, prefix + ".ln.g"), g.param(s, prefix + ".ln.b"));
  z = ops::swish(ops::linear(z, g.param(s, prefix + ".down.w"), g.param(s, prefix + ".down.b")));
  z = ops::linear(z, g.param(s, prefix + ".up.w"), g.param(s, prefix + ".up.b"));
  return ops::add(h, z);
}

// ----------------------------------------------------------------- probe

template <std::floating_point T>
void init_probe(ParamStore<T>& s, std::size_t vocab) {
  Tensor<T> w({vocab, vocab});
  for (std::size_t i = 0; i < vocab; ++i) w[i * vocab + i] = T{1};
  s.add("probe.w", Role::kProbe, std::move(w));
  s.add("probe.b", Role::kProbe, Tensor<T>({vocab}));
}

/// Dense layer appended after the output head: logits.W + b.
template <std::floating_point T>
Var<T> linear_probe_head(Graph<T>& g, ParamStore<T>& s, Var<T> logits) {
  const auto& w = s.at("probe.w").value;
  if (w.dim(0) != logits.value().cols()) {
    throw DimensionError("probe " + shape_str(w.shape()) + " does not fit logits " + shape_str(logits.shape()));
  }
  return ops::linear(logits, g.param(s, "probe.w"), g.param(s, "probe.b"));
}

// ----------------------------------------------------------------- schemes

enum class HeadPolicy { kLoad, kReinit };

/// Modules inserted into the backbone. Stored with checkpoints so a model can
/// be rebuilt from its file.
struct Insertions {
  bool input_reprogram = false;
  bool latent_reprogram = false;
  ExtractorKind extractor = ExtractorKind::kNone;
  BridgeConfig bridge;
  bool adapters = false;
  bool extra_layer = false;
  bool probe = false;
};

/// Parameter groups a scheme can mark trainable.
enum TrainGroup : unsigned {
  kTrainEncoder = 1u << 0,
  kTrainLastLayer = 1u << 1,
  kTrainDecoder = 1u << 2,
  kTrainBias = 1u << 3,
  kTrainReprogram = 1u << 4,
  kTrainAdapter = 1u << 5,
  kTrainProbe = 1u << 6,
  kTrainExtra = 1u << 7,
  kTrainSsl = 1u << 8,
};

struct AdaptationScheme {
  std::string id;
  Insertions ins;
  HeadPolicy head = HeadPolicy::kLoad;
  unsigned train = 0;
};

const std::vector<std::string>& known_scheme_ids();

AdaptationScheme build_car_scheme(const std::string& variant);

/// Scheme ids are case-insensitive on input; the canonical spelling is kept.
AdaptationScheme build_scheme(std::string id);

/// Trainable flag for one parameter. Every name must belong to a known
/// module; anything else is a hard error.
bool scheme_trains(const AdaptationScheme& s, const std::string& name, Role role, std::size_t num_layers);

/// Prefix of the reprogram / adapter module serving insertion point `point`
/// (0 = raw features, i >= 1 = output of layer i).
std::string insertion_prefix(const std::string& root, std::size_t point, std::size_t width, bool shared);

/// Inserts the scheme's modules into `s` (if missing), applies the head
/// policy, then sets every trainable flag.
template <std::floating_point T>
void apply_freezing_scheme(ParamStore<T>& s, const AdaptationScheme& scheme, const ConformerConfig& enc,
                           const TransducerConfig& rnnt, const ReprogramConfig& rp, const AdapterConfig& ad,
                           std::mt19937_64& rng) {
  const auto& in = scheme.ins;
  in.bridge.validate();
  const std::size_t n = enc.num_layers();
  auto add_rp = [&](std::size_t point, std::size_t width) {
    const auto p = insertion_prefix("rp", point, width, point > 0 && in.bridge.share_weights);
    if (!s.contains(p + ".w")) init_reprogram_module(s, p, width, in.extractor, rp, rng);
  };
  auto add_ad = [&](std::size_t point, std::size_t width) {
    const auto p = insertion_prefix("ad", point, width, false);
    if (!s.contains(p + ".ln.g")) init_adapter(s, p, width, ad.bottleneck, rng);
  };
  if (in.input_reprogram) add_rp(0, enc.feature_dim);
  if (in.adapters) add_ad(0, enc.feature_dim);
  for (std::size_t i = 1; i < n; ++i) {
    if (in.latent_reprogram) add_rp(i, enc.layer_dim(i));
    if (in.adapters) add_ad(i, enc.layer_dim(i));
  }
  if (in.extra_layer && !s.contains("extra.layer.ln_out.g")) {
    init_conformer_layer(s, "extra.layer", enc.model_dim, enc, rng);
  }
  if (in.probe && !s.contains("probe.w")) init_probe(s, rnnt.vocab_size);
  if (scheme.head == HeadPolicy::kReinit) {
    s.at("joint.head.w").value = glorot<T>(rnnt.joint_dim, rnnt.vocab_size, rng);
    s.at("joint.head.b").value.fill(T{0});
  }
  for (auto& e : s.entries()) e.trainable = scheme_trains(scheme, e.name, e.role, n);
}

// ----------------------------------------------------------------- accounting

struct BudgetReport {
  struct Split {
    std::size_t total = 0;
    std::size_t trainable = 0;
  };
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  /// enc + pred + joint + ssl, independent of inserted modules.
  std::size_t backbone_params = 0;
  std::map<std::string, Split> by_module;
  std::map<std::string, Split> by_role;

  double trainable_fraction() const {
    return total_params == 0 ? 0.0 : static_cast<double>(trainable_params) / static_cast<double>(total_params);
  }
  /// Trainable count relative to the backbone size (the figure quoted for
  /// reprogramming budgets).
  double trainable_vs_backbone() const {
    return backbone_params == 0 ? 0.0
                                : static_cast<double>(trainable_params) / static_cast<double>(backbone_params);
  }
};

template <std::floating_point T>
BudgetReport count_params(const ParamStore<T>& s) {
  BudgetReport r;
  for (const auto& e : s.entries()) {
    const std::size_t n = e.value.size();
    const std::string module = e.name.substr(0, e.name.find('.'));
    r.total_params += n;
    auto& m = r.by_module[module];
    auto& ro = r.by_role[std::string(role_name(e.role))];
    m.total += n;
    ro.total += n;
    if (module == "enc" || module == "pred" || module == "joint" || module == "ssl") r.backbone_params += n;
    if (e.trainable) {
      r.trainable_params += n;
      m.trainable += n;
      ro.trainable += n;
    }
  }
  return r;
}

}  // namespace car

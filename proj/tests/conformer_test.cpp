// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "car/conformer.hpp"
#include "gradcheck.hpp"

namespace car {
namespace {

using testing::G;
using testing::TD;
using testing::V;

ConformerConfig tiny_config(std::size_t d = 8) {
  ConformerConfig c;
  c.feature_dim = 6;
  c.model_dim = d;
  c.num_heads = 2;
  c.conv_kernel = 3;
  c.ffn_expansion = 2;
  c.group_norm_groups = 2;
  c.rel_pos_max_distance = 3;
  c.block_layout = {1, 1, 1};
  return c;
}

ParamStore<double> layer_store(const ConformerConfig& c, std::size_t dim, std::uint64_t seed = 3) {
  ParamStore<double> s;
  std::mt19937_64 rng(seed);
  init_conformer_layer(s, "L", dim, c, rng);
  // Non-trivial norm and bias parameters so every path carries signal.
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& e : s.entries())
    if (e.role == Role::kBias || e.name.ends_with(".relpos"))
      for (auto& v : e.value.data()) v = u(rng);
  return s;
}

TEST(ConformerBlock, PreservesShape) {
  std::mt19937_64 rng(1);
  for (std::size_t d : {4, 8, 12})
    for (std::size_t t : {1, 3, 7}) {
      auto c = tiny_config(d);
      auto s = layer_store(c, d);
      G g(false);
      auto y = conformer_block_forward(g, s, "L", g.input(testing::random_tensor({t, d}, rng)), c);
      EXPECT_EQ(y.value().shape(), (Shape{t, d}));
    }
}

TEST(ConformerBlock, ZeroWeightsReduceToLayerNorm) {
  auto c = tiny_config();
  auto s = layer_store(c, 8);
  for (auto& e : s.entries()) e.value.fill(e.name.ends_with(".g") ? 1.0 : 0.0);
  std::mt19937_64 rng(5);
  const TD x = testing::random_tensor({5, 8}, rng, -2, 2);
  G g(false);
  const TD y = conformer_block_forward(g, s, "L", g.input(x), c).value();
  for (std::size_t t = 0; t < 5; ++t) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 8; ++j) mean += x.at(t, j) / 8;
    for (std::size_t j = 0; j < 8; ++j) var += (x.at(t, j) - mean) * (x.at(t, j) - mean) / 8;
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(y.at(t, j), (x.at(t, j) - mean) / std::sqrt(var + 1e-5), 1e-6);
  }
}

TEST(ConformerBlock, ParamGradientMatchesFiniteDifferences) {
  auto c = tiny_config();
  auto s = layer_store(c, 8);
  std::mt19937_64 rng(9);
  const TD x = testing::random_tensor({4, 8}, rng);
  const double err = testing::check_params(
      [&](G& g, ParamStore<double>& st) { return conformer_block_forward(g, st, "L", g.input(x), c); }, s);
  EXPECT_LT(err, 1e-4);
}

TEST(ConformerBlock, InputGradientMatchesFiniteDifferences) {
  auto c = tiny_config();
  auto s = layer_store(c, 8);
  std::mt19937_64 rng(10);
  const double err = testing::check_inputs(
      [&](G& g, const std::vector<V>& in) { return conformer_block_forward(g, s, "L", in[0], c); },
      {testing::random_tensor({4, 8}, rng)});
  EXPECT_LT(err, 1e-4);
}

TEST(ConformerBlock, AttentionRowsSumToOne) {
  auto c = tiny_config();
  auto s = layer_store(c, 8);
  std::mt19937_64 rng(2);
  G g(false);
  std::vector<TD> weights;
  conformer_block_forward(g, s, "L", g.input(testing::random_tensor({6, 8}, rng, -3, 3)), c, 0, &weights);
  ASSERT_EQ(weights.size(), c.num_heads);
  for (const auto& w : weights)
    for (std::size_t i = 0; i < w.dim(0); ++i) {
      double row = 0;
      for (std::size_t j = 0; j < w.dim(1); ++j) row += w.at(i, j);
      EXPECT_NEAR(row, 1.0, 1e-6);
    }
}

TEST(ConformerBlock, ConstantSequenceIsShiftInvariant) {
  // Every frame of a constant sequence sees the same values, so the
  // attention output cannot depend on absolute position or length.
  auto c = tiny_config();
  auto s = layer_store(c, 8);
  std::mt19937_64 rng(4);
  const TD frame = testing::random_tensor({1, 8}, rng);
  auto run = [&](std::size_t t) {
    TD x({t, 8});
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < 8; ++j) x.at(i, j) = frame.at(0, j);
    G g(false);
    return self_attention(g, s, "L.mhsa", g.input(x), c).value();
  };
  const TD a = run(5), b = run(9);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(b.at(i, j), a.at(0, j), 1e-12);
      if (i < 5) {
        EXPECT_NEAR(a.at(i, j), a.at(0, j), 1e-12);
      }
    }
}

TEST(TimeStack, PairsConsecutiveFrames) {
  TD x({4, 3});
  for (std::size_t i = 0; i < 12; ++i) x[i] = static_cast<double>(i);
  G g(false);
  const TD y = time_stack(g.input(x), 2).value();
  ASSERT_EQ(y.shape(), (Shape{2, 6}));
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(y.at(0, j), static_cast<double>(j));
}

TEST(TimeStack, FactorOneIsIdentity) {
  std::mt19937_64 rng(1);
  const TD x = testing::random_tensor({5, 3}, rng);
  G g(false);
  EXPECT_EQ(time_stack(g.input(x), 1).value(), x);
}

TEST(TimeStack, PadsTheTailWithZeros) {
  TD x({5, 2});
  for (std::size_t i = 0; i < 10; ++i) x[i] = static_cast<double>(i + 1);
  G g(false);
  const TD y = time_stack(g.input(x), 2).value();
  ASSERT_EQ(y.shape(), (Shape{3, 4}));
  EXPECT_EQ(y.at(2, 0), 9.0);
  EXPECT_EQ(y.at(2, 1), 10.0);
  EXPECT_EQ(y.at(2, 2), 0.0);
  EXPECT_EQ(y.at(2, 3), 0.0);
}

TEST(TimeStack, RejectsFactorZero) {
  TD x({2, 2});
  G g(false);
  EXPECT_THROW(time_stack(g.input(x), 0), ContractError);
}

ConformerConfig small_encoder() {
  ConformerConfig c;
  c.model_dim = 16;
  c.num_heads = 4;
  c.group_norm_groups = 4;
  return c;  // default layout (2, 1, 3), factor 2
}

TEST(Encoder, DefaultLayoutHalvesTime) {
  const auto c = small_encoder();
  ParamStore<float> s;
  std::mt19937_64 rng(1);
  init_encoder(s, c, rng);
  EXPECT_EQ(s.total_count(), encoder_param_count(c));
  Tensor<float> f({20, 80}, 0.1f);
  Graph<float> g(false);
  auto out = encoder_forward(g, s, c, f);
  EXPECT_EQ(out.out.value().shape(), (Shape{10, 16}));
  EXPECT_EQ(encoder_frames(c, 20), 10u);
  ASSERT_EQ(out.taps.size(), c.num_layers() + 1);
  EXPECT_EQ(out.taps[0].value().rows(), 20u);
  EXPECT_EQ(out.taps[1].value().rows(), 20u);
  EXPECT_EQ(out.taps[2].value().rows(), 20u);
  EXPECT_EQ(out.taps[3].value().shape(), (Shape{10, 32}));
  EXPECT_EQ(out.taps[6].value().rows(), 10u);
}

TEST(Encoder, IdentityHooksMatchNoHooks) {
  const auto c = small_encoder();
  ParamStore<double> s;
  std::mt19937_64 rng(2);
  init_encoder(s, c, rng);
  const TD f = testing::random_tensor({9, 80}, rng);
  G g1(false), g2(false);
  const TD a = encoder_forward(g1, s, c, f).out.value();
  EncoderHooks<double> hooks;
  std::size_t calls = 0;
  for (std::size_t i = 0; i < c.num_layers(); ++i) {
    hooks.set(i, [&calls](V h, std::optional<V>) {
      ++calls;
      return h;
    });
  }
  const TD b = encoder_forward(g2, s, c, f, hooks).out.value();
  EXPECT_EQ(a, b);
  EXPECT_EQ(calls, c.num_layers());
}

TEST(Encoder, HookReceivesPreviousLayerInputWhenShapesMatch) {
  const auto c = small_encoder();
  ParamStore<double> s;
  std::mt19937_64 rng(3);
  init_encoder(s, c, rng);
  const TD f = testing::random_tensor({8, 80}, rng);
  EncoderHooks<double> hooks;
  std::vector<bool> got(c.num_layers(), false);
  for (std::size_t i = 1; i < c.num_layers(); ++i) {
    hooks.set(i, [&got, i](V h, std::optional<V> prev) {
      got[i] = prev.has_value();
      if (prev) {
        EXPECT_EQ(prev->value().shape(), h.value().shape());
      }
      return h;
    });
  }
  G g(false);
  encoder_forward(g, s, c, f, hooks);
  for (std::size_t i = 1; i < c.num_layers(); ++i) EXPECT_TRUE(got[i]) << "point " << i;
}

TEST(Encoder, HookAtMissingPointIsConfigError) {
  const auto c = small_encoder();
  ParamStore<float> s;
  std::mt19937_64 rng(1);
  init_encoder(s, c, rng);
  EncoderHooks<float> hooks;
  hooks.set(c.num_layers(), [](Var<float> h, std::optional<Var<float>>) { return h; });
  Graph<float> g(false);
  EXPECT_THROW(encoder_forward(g, s, c, Tensor<float>({4, 80}), hooks), ConfigError);
}

TEST(Encoder, RejectsEmptyAndMisshapenFeatures) {
  const auto c = small_encoder();
  ParamStore<float> s;
  std::mt19937_64 rng(1);
  init_encoder(s, c, rng);
  Graph<float> g(false);
  EXPECT_THROW(encoder_forward(g, s, c, Tensor<float>{}), ContractError);
  EXPECT_THROW(encoder_forward(g, s, c, Tensor<float>({4, 40})), DimensionError);
}

TEST(Encoder, DeterministicForFixedSeed) {
  auto c = small_encoder();
  c.dropout = 0.2;
  ParamStore<float> s;
  std::mt19937_64 rng(1);
  init_encoder(s, c, rng);
  Tensor<float> f({6, 80}, 0.3f);
  Graph<float> g1(true, 42, 7), g2(true, 42, 7), g3(true, 43, 7);
  const auto a = encoder_forward(g1, s, c, f).out.value();
  EXPECT_EQ(a, encoder_forward(g2, s, c, f).out.value());
  EXPECT_NE(a, encoder_forward(g3, s, c, f).out.value());
}

TEST(ConformerConfig, Validation) {
  ConformerConfig c;
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.block_layout = {0, 1, 3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.block_layout = {2, 2, 3};
  EXPECT_THROW(c.validate(), ConfigError);
  c.strict_layout = false;
  EXPECT_NO_THROW(c.validate());
  c = {};
  c.block_layout = {4, 1, 12};  // full-size 4/1/12 layout stays constructible
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.num_layers(), 17u);
}

}  // namespace
}  // namespace car

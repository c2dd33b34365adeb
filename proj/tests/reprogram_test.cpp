// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "car/model.hpp"
#include "car/reprogram.hpp"
#include "gradcheck.hpp"

namespace car {
namespace {

using testing::G;
using testing::TD;
using testing::V;

ReprogramConfig tiny_rp() {
  ReprogramConfig c;
  c.bottleneck = 4;
  c.conv_groups = 2;
  c.conv_taps = 3;
  c.attn_kernel = 3;
  return c;
}

/// Randomises every entry under `prefix` so no path is trivially zero.
void randomise(ParamStore<double>& s, const std::string& prefix, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& e : s.entries())
    if (e.name.starts_with(prefix))
      for (auto& v : e.value.data()) v = u(rng);
}

TEST(InputReprogram, FreshModuleIsIdentity) {
  for (auto kind : {ExtractorKind::kNone, ExtractorKind::kConv, ExtractorKind::kAttention}) {
    ParamStore<double> s;
    std::mt19937_64 rng(1);
    init_reprogram_module(s, "rp.in", 6, kind, tiny_rp(), rng);
    const TD x = testing::random_tensor({5, 6}, rng);
    G g(false);
    EXPECT_EQ(input_reprogram(g, s, "rp.in", g.input(x)).value(), x) << extractor_name(kind);
  }
}

TEST(InputReprogram, ConstantShiftWithoutExtractor) {
  ParamStore<double> s;
  std::mt19937_64 rng(2);
  init_reprogram_module(s, "rp.in", 4, ExtractorKind::kNone, tiny_rp(), rng);
  EXPECT_EQ(s.size(), 1u);
  s.at("rp.in.w").value.fill(0.25);
  const TD x = testing::random_tensor({3, 4}, rng);
  G g(false);
  const TD y = input_reprogram(g, s, "rp.in", g.input(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i] + 0.25);
}

TEST(InputReprogram, ExtractorShapeMismatchIsContractError) {
  ParamStore<double> s;
  std::mt19937_64 rng(3);
  init_reprogram_module(s, "rp.in", 6, ExtractorKind::kConv, tiny_rp(), rng);
  s.at("rp.in.up.w").value = TD({4, 5});
  s.at("rp.in.up.b").value = TD({5});
  G g(false);
  EXPECT_THROW(input_reprogram(g, s, "rp.in", g.input(TD({3, 6}))), ContractError);
}

TEST(InputReprogram, GradientMatchesFiniteDifferences) {
  for (auto kind : {ExtractorKind::kConv, ExtractorKind::kAttention}) {
    ParamStore<double> s;
    std::mt19937_64 rng(4);
    init_reprogram_module(s, "rp.in", 6, kind, tiny_rp(), rng);
    randomise(s, "rp.in", 5);
    const TD x = testing::random_tensor({5, 6}, rng);
    const double err = testing::check_params(
        [&](G& g, ParamStore<double>& st) { return input_reprogram(g, st, "rp.in", g.input(x)); }, s);
    EXPECT_LT(err, 1e-4) << extractor_name(kind);
    const double in_err = testing::check_inputs(
        [&](G& g, const std::vector<V>& in) { return input_reprogram(g, s, "rp.in", in[0]); }, {x});
    EXPECT_LT(in_err, 1e-4) << extractor_name(kind);
  }
}

TEST(InputReprogram, ParamCountsMatchStoreAndAreAtParity) {
  const auto c = tiny_rp();
  for (auto kind : {ExtractorKind::kNone, ExtractorKind::kConv, ExtractorKind::kAttention}) {
    ParamStore<float> s;
    std::mt19937_64 rng(1);
    init_reprogram_module(s, "m", 7, kind, c, rng);
    EXPECT_EQ(s.total_count(), reprogram_module_param_count(7, kind, c));
    for (const auto& e : s.entries()) EXPECT_EQ(e.role, Role::kReprogram) << e.name;
  }
  const ReprogramConfig def;
  EXPECT_EQ(reprogram_module_param_count(80, ExtractorKind::kConv, def),
            reprogram_module_param_count(80, ExtractorKind::kAttention, def));
}

// Moving average with zero padding, written out directly.
TD moving_average(const TD& x, std::size_t k) {
  TD y(x.shape());
  const auto t = static_cast<std::ptrdiff_t>(x.rows()), half = static_cast<std::ptrdiff_t>(k / 2);
  for (std::ptrdiff_t i = 0; i < t; ++i)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double acc = 0;
      for (std::ptrdiff_t d = -half; d <= half; ++d)
        if (i + d >= 0 && i + d < t) acc += x.at(static_cast<std::size_t>(i + d), c);
      y.at(static_cast<std::size_t>(i), c) = acc / static_cast<double>(k);
    }
  return y;
}

TEST(ExtractorConv, EqualLogitsGiveMovingAverage) {
  std::mt19937_64 rng(1);
  const TD x = testing::random_tensor({7, 4}, rng);
  G g(false);
  const TD y = extractor_conv(g.input(x), g.input(TD({2, 5}, 0.7))).value();
  const TD expect = moving_average(x, 5);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
}

TEST(ExtractorConv, LargeCentreLogitApproachesIdentity) {
  std::mt19937_64 rng(2);
  const TD x = testing::random_tensor({6, 4}, rng);
  TD logits({2, 5});
  logits.at(0, 2) = 20;
  logits.at(1, 2) = 20;
  G g(false);
  const TD y = extractor_conv(g.input(x), g.input(logits)).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-6);
}

TEST(ExtractorConv, TapsPerGroupSumToOne) {
  // Any logits: a constant signal stays constant away from the borders.
  std::mt19937_64 rng(3);
  TD x({9, 4}, 2.5);
  G g(false);
  const TD y = extractor_conv(g.input(x), g.input(testing::random_tensor({2, 3}, rng, -4, 4))).value();
  for (std::size_t t = 1; t + 1 < 9; ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y.at(t, c), 2.5, 1e-12);
}

TEST(ExtractorConv, GroupsShareTaps) {
  std::mt19937_64 rng(4);
  TD x({5, 4});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 4; ++c) x.at(t, c) = static_cast<double>(t);
  G g(false);
  const TD y = extractor_conv(g.input(x), g.input(testing::random_tensor({2, 3}, rng))).value();
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_DOUBLE_EQ(y.at(t, 0), y.at(t, 1));
    EXPECT_DOUBLE_EQ(y.at(t, 2), y.at(t, 3));
  }
}

TEST(ExtractorConv, IndivisibleChannelsAreConfigError) {
  G g(false);
  EXPECT_THROW(extractor_conv(g.input(TD({3, 5})), g.input(TD({2, 3}))), ConfigError);
}

TEST(ExtractorConv, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const double err = testing::check_inputs(
      [](G&, const std::vector<V>& in) { return extractor_conv(in[0], in[1]); },
      {testing::random_tensor({6, 4}, rng), testing::random_tensor({2, 3}, rng)});
  EXPECT_LT(err, 1e-4);
}

// Same-padded 2-D cross-correlation, written out directly.
TD conv2d_reference(const TD& x, const TD& k) {
  TD y(x.shape());
  const auto h = static_cast<std::ptrdiff_t>(x.rows()), w = static_cast<std::ptrdiff_t>(x.cols());
  const auto kh = static_cast<std::ptrdiff_t>(k.rows()), kw = static_cast<std::ptrdiff_t>(k.cols());
  for (std::ptrdiff_t i = 0; i < h; ++i)
    for (std::ptrdiff_t j = 0; j < w; ++j) {
      double acc = 0;
      for (std::ptrdiff_t a = 0; a < kh; ++a)
        for (std::ptrdiff_t b = 0; b < kw; ++b) {
          const auto si = i + a - kh / 2, sj = j + b - kw / 2;
          if (si >= 0 && si < h && sj >= 0 && sj < w) acc += k[a * kw + b] * x[si * w + sj];
        }
      y[i * w + j] = acc;
    }
  return y;
}

TEST(ExtractorAttention, ConstantScoreGivesPlainConv) {
  std::mt19937_64 rng(6);
  const TD x = testing::random_tensor({6, 5}, rng);
  const TD k = testing::random_tensor({3, 3}, rng);
  G g(false);
  TD attn;
  const TD y = extractor_attention(g.input(x), g.input(TD({5, 1})), g.input(TD({1}, 0.3)), g.input(k), &attn).value();
  const TD expect = conv2d_reference(x, k);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
  for (std::size_t t = 0; t < 6; ++t) EXPECT_NEAR(attn[t], 1.0 / 6.0, 1e-15);
}

TEST(ExtractorAttention, DeltaKernelAndUniformScoresIsIdentity) {
  std::mt19937_64 rng(7);
  const TD x = testing::random_tensor({4, 3}, rng);
  TD k({3, 3});
  k.at(1, 1) = 1;
  G g(false);
  const TD y = extractor_attention(g.input(x), g.input(TD({3, 1})), g.input(TD({1})), g.input(k)).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-12);
}

TEST(ExtractorAttention, MaskSumsToOne) {
  std::mt19937_64 rng(8);
  G g(false);
  TD attn;
  extractor_attention(g.input(testing::random_tensor({9, 4}, rng, -3, 3)), g.input(testing::random_tensor({4, 1}, rng)),
                      g.input(TD({1})), g.input(testing::random_tensor({3, 3}, rng)), &attn);
  double total = 0;
  for (double a : attn.data()) total += a;
  EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(ExtractorAttention, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  const TD bias = testing::random_tensor({1}, rng);
  const double err = testing::check_inputs(
      [&](G& g, const std::vector<V>& in) { return extractor_attention(in[0], in[1], g.constant(bias), in[2]); },
      {testing::random_tensor({5, 4}, rng), testing::random_tensor({4, 1}, rng), testing::random_tensor({3, 3}, rng)});
  EXPECT_LT(err, 1e-4);
  // The score bias shifts every logit equally, so the softmax cancels it.
  G g(false);
  auto b = g.input(bias);
  auto y = extractor_attention(g.input(testing::random_tensor({5, 4}, rng)), g.input(testing::random_tensor({4, 1}, rng)),
                               b, g.input(testing::random_tensor({3, 3}, rng)));
  g.backward(ops::sum(y));
  EXPECT_NEAR(g.grad(b)[0], 0.0, 1e-12);
}

TEST(LatentReprogram, ZeroBetaEqualsPlainMode) {
  ParamStore<double> s;
  std::mt19937_64 rng(10);
  init_reprogram_module(s, "rp.lat1", 6, ExtractorKind::kAttention, tiny_rp(), rng);
  randomise(s, "rp.lat1", 11);
  const TD h = testing::random_tensor({4, 6}, rng), prev = testing::random_tensor({4, 6}, rng);
  BridgeConfig bridged{true, 0.0};
  BridgeConfig plain;
  G g(false);
  const TD a = latent_reprogram(g, s, "rp.lat1", g.input(h), std::optional<V>(g.input(prev)), bridged).value();
  const TD b = latent_reprogram(g, s, "rp.lat1", g.input(h), std::optional<V>(g.input(prev)), plain).value();
  EXPECT_EQ(a, b);
}

TEST(LatentReprogram, FreshModuleAddsScaledPreviousLatent) {
  ParamStore<double> s;
  std::mt19937_64 rng(12);
  init_reprogram_module(s, "rp.lat1", 6, ExtractorKind::kAttention, tiny_rp(), rng);
  const TD h = testing::random_tensor({4, 6}, rng), prev = testing::random_tensor({4, 6}, rng);
  G g(false);
  const TD y =
      latent_reprogram(g, s, "rp.lat1", g.input(h), std::optional<V>(g.input(prev)), BridgeConfig{true, 0.15}).value();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], h[i] + 0.15 * prev[i], 1e-12);
  // Without h_prev the bridge is skipped.
  const TD z = latent_reprogram(g, s, "rp.lat1", g.input(h), std::optional<V>{}, BridgeConfig{true, 0.15}).value();
  EXPECT_EQ(z, h);
}

TEST(LatentReprogram, DropoutBridgeIsSeededAndIdentityInEval) {
  ParamStore<double> s;
  std::mt19937_64 rng(13);
  init_reprogram_module(s, "rp.lat1", 6, ExtractorKind::kConv, tiny_rp(), rng);
  const TD h = testing::random_tensor({4, 6}, rng), prev = testing::random_tensor({4, 6}, rng);
  BridgeConfig b{true, 0.15, BridgeMode::kDropout};
  G eval(false);
  const TD e = latent_reprogram(eval, s, "rp.lat1", eval.input(h), std::optional<V>(eval.input(prev)), b, 1).value();
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(e[i], h[i] + prev[i], 1e-12);
  G t1(true, 5, 1), t2(true, 5, 1);
  EXPECT_EQ(latent_reprogram(t1, s, "rp.lat1", t1.input(h), std::optional<V>(t1.input(prev)), b, 1).value(),
            latent_reprogram(t2, s, "rp.lat1", t2.input(h), std::optional<V>(t2.input(prev)), b, 1).value());
}

TEST(LatentReprogram, GradientMatchesFiniteDifferences) {
  ParamStore<double> s;
  std::mt19937_64 rng(14);
  init_reprogram_module(s, "rp.lat1", 6, ExtractorKind::kAttention, tiny_rp(), rng);
  randomise(s, "rp.lat1", 15);
  const BridgeConfig b{true, 0.15};
  const double err = testing::check_inputs(
      [&](G& g, const std::vector<V>& in) {
        (void)g;
        return latent_reprogram(*in[0].graph, s, "rp.lat1", in[0], std::optional<V>(in[1]), b);
      },
      {testing::random_tensor({4, 6}, rng), testing::random_tensor({4, 6}, rng)});
  EXPECT_LT(err, 1e-4);
}

TEST(BridgeConfig, Validation) {
  EXPECT_THROW((BridgeConfig{true, 1.5}.validate()), ConfigError);
  EXPECT_THROW((BridgeConfig{true, -0.1}.validate()), ConfigError);
  EXPECT_NO_THROW((BridgeConfig{true, 0.15}.validate()));
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.enc.feature_dim = 6;
  m.enc.model_dim = 4;
  m.enc.num_heads = 2;
  m.enc.conv_kernel = 3;
  m.enc.ffn_expansion = 2;
  m.enc.group_norm_groups = 2;
  m.enc.rel_pos_max_distance = 2;
  m.enc.block_layout = {1, 1, 1};
  m.rnnt.vocab_size = 4;
  m.rnnt.enc_dim = 4;
  m.rnnt.embed_dim = 2;
  m.rnnt.pred_dim = 3;
  m.rnnt.pred_layers = 1;
  m.rnnt.joint_dim = 3;
  m.rp = tiny_rp();
  m.rp.bottleneck = 2;
  m.rp.conv_groups = 1;
  return m;
}

TEST(Car3, EndToEndReprogramGradient) {
  const auto m = tiny_model();
  auto s = init_backbone<double>(m, 1);
  const auto scheme = build_scheme("CAR3");
  std::mt19937_64 rng(2);
  apply_freezing_scheme(s, scheme, m.enc, m.rnnt, m.rp, m.ad, rng);
  randomise(s, "rp.", 3, 0.3);
  const TD feats = testing::random_tensor({4, 6}, rng);
  const Transcript y{2, 1};
  const double err = testing::check_params(
      [&](G& g, ParamStore<double>& st) { return utterance_loss(g, st, m, scheme.ins, feats, y).total; }, s);
  EXPECT_LT(err, 1e-4);
}

TEST(Car3, ZeroInitWithZeroBetaMatchesBackbone) {
  const auto m = tiny_model();
  auto base = init_backbone<double>(m, 1);
  std::mt19937_64 rng(4);
  const TD feats = testing::random_tensor({6, 6}, rng);
  G g0(false);
  const TD ref = encode(g0, base, m, Insertions{}, feats).value();
  for (const char* id : {"CAR1", "CAR2", "CAR3"}) {
    auto scheme = build_scheme(id);
    scheme.ins.bridge.beta_hat = 0.0;
    auto s = base;
    apply_freezing_scheme(s, scheme, m.enc, m.rnnt, m.rp, m.ad, rng);
    G g(false);
    const TD out = encode(g, s, m, scheme.ins, feats).value();
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-6) << id;
  }
}

TEST(Car3, ZeroInitBridgeAddsExactlyTheScaledLatent) {
  // Direct construction: a frozen encoder where each boundary adds
  // 0.15 * (layer input) must equal zero-initialised CAR3.
  const auto m = tiny_model();
  auto s = init_backbone<double>(m, 1);
  std::mt19937_64 rng(5);
  const TD feats = testing::random_tensor({6, 6}, rng);
  EncoderHooks<double> manual;
  for (std::size_t i = 1; i < m.enc.num_layers(); ++i) {
    manual.set(i, [](V h, std::optional<V> prev) { return prev ? ops::add(h, ops::scale(*prev, 0.15)) : h; });
  }
  G g0(false);
  const TD ref = encoder_forward(g0, s, m.enc, feats, manual).out.value();
  const auto scheme = build_scheme("CAR3");
  apply_freezing_scheme(s, scheme, m.enc, m.rnnt, m.rp, m.ad, rng);
  G g(false);
  const TD out = encode(g, s, m, scheme.ins, feats).value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(Car3, SchemesDifferOnlyInBridge) {
  const auto c1 = build_car_scheme("CAR1"), c2 = build_car_scheme("CAR2"), c3 = build_car_scheme("CAR3");
  EXPECT_FALSE(c1.ins.bridge.enabled);
  EXPECT_TRUE(c3.ins.bridge.enabled);
  EXPECT_DOUBLE_EQ(c3.ins.bridge.beta_hat, 0.15);
  EXPECT_EQ(c1.ins.extractor, ExtractorKind::kAttention);
  EXPECT_EQ(c2.ins.extractor, ExtractorKind::kConv);
  EXPECT_EQ(c3.ins.extractor, ExtractorKind::kAttention);
  EXPECT_THROW(build_car_scheme("CAR4"), ConfigError);

  ModelConfig m;
  std::size_t counts[3];
  int k = 0;
  for (const auto* sc : {&c1, &c2, &c3}) {
    auto s = init_backbone<float>(m, 1);
    std::mt19937_64 rng(1);
    apply_freezing_scheme(s, *sc, m.enc, m.rnnt, m.rp, m.ad, rng);
    const auto b = count_params(s);
    counts[k++] = b.trainable_params;
    for (const auto& e : s.entries()) EXPECT_EQ(e.trainable, e.role == Role::kReprogram) << e.name;
  }
  EXPECT_EQ(counts[0], counts[1]);
  EXPECT_EQ(counts[0], counts[2]);
}

}  // namespace
}  // namespace car

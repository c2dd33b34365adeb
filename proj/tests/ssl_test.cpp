// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "car/ssl.hpp"
#include "gradcheck.hpp"

namespace car {
namespace {

using testing::G;
using testing::TD;
using testing::V;

TEST(Mask, ThirteenStartsAtT200) {
  // span 1: each start masks exactly one frame.
  const auto pos = sample_mask(200, 0.065, 1, 7);
  EXPECT_EQ(pos.size(), 13u);
  EXPECT_EQ(std::set<std::size_t>(pos.begin(), pos.end()).size(), 13u);
}

TEST(Mask, AtLeastOneSpanForShortInputs) {
  const auto pos = sample_mask(5, 0.065, 3, 1);
  EXPECT_EQ(pos.size(), 3u);
  EXPECT_EQ(pos.back() - pos.front(), 2u);
  EXPECT_THROW(sample_mask(2, 0.065, 3, 1), ContractError);
}

TEST(Mask, SpansCoverContiguousFrames) {
  const auto pos = sample_mask(100, 0.065, 3, 3);
  std::set<std::size_t> hit(pos.begin(), pos.end());
  EXPECT_GE(hit.size(), 3u);
  EXPECT_LE(hit.size(), 18u);
  for (auto t : pos) EXPECT_LT(t, 100u);
}

TEST(Mask, DeterministicPerSeedAndVariesAcrossSeeds) {
  EXPECT_EQ(sample_mask(80, 0.065, 2, 11), sample_mask(80, 0.065, 2, 11));
  std::set<std::vector<std::size_t>> distinct;
  for (std::uint64_t s = 0; s < 100; ++s) distinct.insert(sample_mask(80, 0.065, 2, s));
  EXPECT_GT(distinct.size(), 90u);
}

TEST(Mask, UnmaskedRowsUntouched) {
  std::mt19937_64 rng(1);
  const TD h = testing::random_tensor({40, 4}, rng);
  const TD emb = testing::random_tensor({4}, rng);
  SslConfig c;
  c.mask_span = 2;
  G g(false);
  const auto r = mask_features(g.input(h), g.input(emb), c, 5);
  const std::set<std::size_t> m(r.positions.begin(), r.positions.end());
  const TD& out = r.masked.value();
  for (std::size_t t = 0; t < 40; ++t)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out.at(t, j), m.count(t) ? emb[j] : h.at(t, j));
}

TEST(Mask, ReplaceRowsGradient) {
  std::mt19937_64 rng(2);
  const std::vector<std::size_t> pos{1, 2, 5};
  EXPECT_LT(testing::check_inputs([&](G&, const std::vector<V>& in) { return replace_rows(in[0], in[1], pos); },
                                  {testing::random_tensor({7, 3}, rng), testing::random_tensor({3}, rng)}),
            1e-4);
}

TEST(Quantize, ExactCodeAndTieBreak) {
  TD book({3, 2});
  book.at(0, 0) = 1;
  book.at(1, 0) = -1;
  book.at(2, 1) = 5;
  TD h({3, 2});
  h.at(0, 1) = 5;  // == code 2
  h.at(1, 0) = -1;  // == code 1
  // row 2 at the origin: codes 0 and 1 are equidistant
  EXPECT_EQ(nearest_codes(h, book), (std::vector<int>{2, 1, 0}));
}

TEST(Quantize, UsageIsADistribution) {
  std::mt19937_64 rng(3);
  G g(false);
  const auto q = quantize(g.input(testing::random_tensor({12, 4}, rng)), g.input(testing::random_tensor({6, 4}, rng)));
  double total = 0;
  for (double p : q.usage.value().data()) {
    EXPECT_GE(p, 0.0);
    total += p;
  }
  EXPECT_NEAR(total, 1.0, 1e-6);
  EXPECT_EQ(q.ids.size(), 12u);
}

TEST(Quantize, StraightThroughPassesGradientToInput) {
  std::mt19937_64 rng(4);
  const TD book = testing::random_tensor({5, 3}, rng);
  G g(false);
  auto h = g.input(testing::random_tensor({4, 3}, rng));
  const auto ids = nearest_codes(h.value(), book);
  auto st = straight_through(h, book, ids);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(st.value().at(t, j), book.at(ids[t], j));
  g.backward(ops::sum(st));
  for (double v : g.grad(h).data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Quantize, SoftAssignmentGradient) {
  std::mt19937_64 rng(5);
  EXPECT_LT(testing::check_inputs(
                [](G&, const std::vector<V>& in) { return ops::softmax_lastdim(neg_sq_dist(in[0], in[1])); },
                {testing::random_tensor({4, 3}, rng), testing::random_tensor({5, 3}, rng)}),
            1e-4);
}

TEST(Contrastive, SymmetricPairGivesLn2) {
  TD ctx({2, 2}), tgt({2, 2});
  ctx.at(0, 0) = 1;
  tgt.at(0, 0) = 1;
  tgt.at(0, 1) = 1;
  tgt.at(1, 0) = 1;
  tgt.at(1, 1) = -1;  // both at 45 degrees from the context
  G g(false);
  const auto l = contrastive_loss(g.input(ctx), g.input(tgt), {0}, {{1}}, 0.1);
  EXPECT_NEAR(l.value()[0], std::log(2.0), 1e-12);
}

TEST(Contrastive, DecreasesAsDistractorsSeparate) {
  double prev = 1e9;
  for (double sep : {0.0, 0.5, 1.0, 2.0, 4.0, 8.0}) {
    // Target aligned with the context; distractor rotates away from it.
    TD ctx({2, 2}), tgt({2, 2});
    ctx.at(0, 0) = 1;
    tgt.at(0, 0) = 1;
    tgt.at(1, 0) = std::cos(sep * 0.2);
    tgt.at(1, 1) = std::sin(sep * 0.2);
    G g(false);
    const double l = contrastive_loss(g.input(ctx), g.input(tgt), {0}, {{1}}, 0.1).value()[0];
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-3);
}

TEST(Contrastive, DistractorSampling) {
  const std::vector<std::size_t> pos{3, 4, 9};
  const auto d = sample_distractors(pos, 8, 1);
  ASSERT_EQ(d.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(d[i].size(), 8u);  // with replacement when short
    for (auto t : d[i]) {
      EXPECT_NE(t, pos[i]);
      EXPECT_TRUE(t == 3 || t == 4 || t == 9);
    }
  }
  EXPECT_EQ(sample_distractors(pos, 8, 1), d);
  EXPECT_THROW(sample_distractors({3}, 2, 1), ContractError);
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const std::vector<std::size_t> pos{0, 2, 3, 5};
  const auto dis = sample_distractors(pos, 2, 3);
  EXPECT_LT(testing::check_inputs(
                [&](G&, const std::vector<V>& in) { return contrastive_loss(in[0], in[1], pos, dis, 0.1); },
                {testing::random_tensor({6, 4}, rng), testing::random_tensor({6, 4}, rng)}),
            1e-4);
}

TEST(Mlm, UniformLogitsGiveLnV) {
  G g(false);
  const auto l = mlm_loss(g.input(TD({5, 64}, 0.3)), {0, 7, 63, 12, 12});
  EXPECT_NEAR(l.value()[0], std::log(64.0), 1e-6);
}

TEST(Mlm, PerfectLogitsApproachZero) {
  TD logits({3, 8});
  const std::vector<int> ids{1, 5, 2};
  for (std::size_t i = 0; i < 3; ++i) logits.at(i, static_cast<std::size_t>(ids[i])) = 50;
  G g(false);
  EXPECT_LT(mlm_loss(g.input(logits), ids).value()[0], 1e-12);
  EXPECT_THROW(mlm_loss(g.input(logits), {1, 9, 2}), ContractError);
}

TEST(Mlm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  EXPECT_LT(testing::check_inputs([](G&, const std::vector<V>& in) { return mlm_loss(in[0], {3, 0, 2}); },
                                  {testing::random_tensor({3, 5}, rng, -2, 2)}),
            1e-4);
}

TEST(Diversity, UniformAndOneHot) {
  G g(false);
  EXPECT_NEAR(diversity_loss(g.input(TD({1, 64}, 1.0 / 64))).value()[0], 0.0, 1e-12);
  TD one({1, 64});
  one[5] = 1;
  EXPECT_NEAR(diversity_loss(g.input(one)).value()[0], 1.0, 1e-12);
}

TEST(Diversity, BoundedForRandomDistributions) {
  std::mt19937_64 rng(8);
  std::gamma_distribution<double> gam(0.3, 1.0);
  for (int i = 0; i < 200; ++i) {
    TD p({1, 16});
    double z = 0;
    for (auto& v : p.data()) z += (v = gam(rng));
    for (auto& v : p.data()) v /= z;
    G g(false);
    const double l = diversity_loss(g.input(p)).value()[0];
    EXPECT_GE(l, -1e-12);
    EXPECT_LE(l, 1.0 + 1e-12);
  }
}

TEST(Diversity, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  // Through a softmax so the perturbed input stays a distribution.
  EXPECT_LT(testing::check_inputs(
                [](G&, const std::vector<V>& in) { return diversity_loss(ops::softmax_lastdim(in[0])); },
                {testing::random_tensor({1, 6}, rng)}),
            1e-4);
}

TEST(JustLoss, WorkedExample) {
  const SslConfig c;
  EXPECT_NEAR(just_total_loss(2.0, 1.0, 1.0, 0.5, c), 2.0205, 1e-12);
  SslConfig zero = c;
  zero.gamma = 0;
  EXPECT_EQ(just_total_loss(3.25, 9.0, 8.0, 0.7, zero), 3.25);
}

TEST(JustLoss, RandomTuplesMatchTheWeightedSum) {
  const SslConfig c;
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int i = 0; i < 20; ++i) {
    const double r = u(rng), lc = u(rng), lm = u(rng), ld = u(rng) / 10;
    const double expect = r + 0.01 * (lc + lm + 0.1 * ld);
    EXPECT_NEAR(just_total_loss(r, lc, lm, ld, c), expect, 1e-12);
    G g(false);
    auto s = [&](double v) { return g.input(TD({1}, v)); };
    EXPECT_NEAR(just_total_loss(s(r), s(lc), s(lm), s(ld), c).value()[0], expect, 1e-12);
  }
}

TEST(JustLoss, LinearInEachComponent) {
  const SslConfig c;
  const double base[4] = {1.5, 0.7, 2.2, 0.4};
  const double coef[4] = {1.0, 0.01, 0.01, 0.001};
  for (int k = 0; k < 4; ++k) {
    double a[4], b[4];
    std::copy(base, base + 4, a);
    std::copy(base, base + 4, b);
    a[k] += 1.0;
    b[k] += 3.0;
    const double f0 = just_total_loss(base[0], base[1], base[2], base[3], c);
    EXPECT_NEAR(just_total_loss(a[0], a[1], a[2], a[3], c) - f0, coef[k], 1e-12);
    EXPECT_NEAR(just_total_loss(b[0], b[1], b[2], b[3], c) - f0, 3 * coef[k], 1e-12);
  }
}

TEST(SslConfig, Validation) {
  SslConfig c;
  EXPECT_NO_THROW(c.validate());
  c.mask_ratio = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.codebook_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.gamma = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace car

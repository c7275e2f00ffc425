#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "hiq/backbone.hpp"
#include "hiq/error.hpp"
#include "hiq/fusion.hpp"

using namespace hiq;
using hiq::testing::random_tensor;

namespace {

std::size_t count_ops(const Tensor& root, const std::string& op) {
  std::size_t n = 0;
  for (const auto& r : trace_graph(root)) n += r.op == op;
  return n;
}

FusionStack stack_for(Rng& rng, const std::vector<Shape>& shapes, std::size_t d, std::size_t heads) {
  return FusionStack::init(rng, shapes, d, heads);
}

}  // namespace

TEST(TokensFromMap, TokenCounts) {
  Rng rng(1);
  auto proj = ConvProjection::init(rng, 3);
  EXPECT_EQ(tokens_from_map(Tensor::zeros({3, 1, 1}), proj, Tensor{}).dim(0), 1u);
  auto t = tokens_from_map(Tensor::zeros({3, 8, 8}), proj, Tensor::zeros({64, 3}));
  EXPECT_EQ(t.dim(0), 64u);
  EXPECT_EQ(t.dim(1), 3u);
}

TEST(TokensFromMap, ZeroPosGivesProjectedValues) {
  Rng rng(2);
  std::mt19937_64 g(2);
  auto proj = ConvProjection::init(rng, 2);
  auto map = random_tensor(g, {2, 3, 3});
  auto with_pos = tokens_from_map(map, proj, Tensor::zeros({9, 2}));
  auto expected = map_to_tokens(proj(map));
  for (std::size_t i = 0; i < expected.numel(); ++i) EXPECT_EQ(with_pos[i], expected[i]);
}

TEST(TokensFromMap, PosShapeMismatchRejected) {
  auto proj = ConvProjection::identity(2);
  EXPECT_THROW(tokens_from_map(Tensor::zeros({2, 3, 3}), proj, Tensor::zeros({8, 2})), DimensionError);
}

TEST(CrossAttention, SingleKeyReturnsValuePlusResidual) {
  std::mt19937_64 g(3);
  auto q = random_tensor(g, {4, 2}, -5, 5);
  auto k = random_tensor(g, {1, 2});
  auto v = Tensor::from({1, 2}, {0.3, -0.7});
  auto residual = random_tensor(g, {4, 2});
  auto out = cross_attention(q, k, v, residual, LinearLayer::identity(2), 1);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_NEAR(out[t * 2], residual[t * 2] + 0.3, 1e-12);
    EXPECT_NEAR(out[t * 2 + 1], residual[t * 2 + 1] - 0.7, 1e-12);
  }
}

TEST(CrossAttention, IdenticalKeysGiveUniformWeights) {
  std::mt19937_64 g(4);
  auto q = random_tensor(g, {3, 4});
  auto k = Tensor::from({5, 4}, std::vector<double>(20, 0.4));
  for (std::size_t heads : {1u, 2u, 4u}) {
    auto w = attention_weights(q, k, heads);
    for (double x : w) EXPECT_NEAR(x, 0.2, 1e-15);
  }
}

TEST(CrossAttention, TwoTokenHandExample) {
  // One head, d = 2: scores (1, 0)/√2, so weight a = e^{1/√2}/(e^{1/√2} + 1).
  auto q = Tensor::from({1, 2}, {1, 0});
  auto k = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto v = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto out = cross_attention(q, k, v, Tensor::zeros({1, 2}), LinearLayer::identity(2), 1);
  const double e = std::exp(1.0 / std::sqrt(2.0));
  const double a = e / (e + 1.0);
  EXPECT_NEAR(out[0], a * 1 + (1 - a) * 3, 1e-12);
  EXPECT_NEAR(out[1], a * 2 + (1 - a) * 4, 1e-12);
}

TEST(CrossAttention, RowsSumToOne) {
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = random_tensor(g, {6, 4}, -3, 3);
    auto k = random_tensor(g, {9, 4}, -3, 3);
    auto w = attention_weights(q, k, 2);
    ASSERT_EQ(w.size(), 2u * 6 * 9);
    for (std::size_t row = 0; row < 12; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) s += w[row * 9 + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(CrossAttention, HeadDivisibilityEnforced) {
  EXPECT_THROW(cross_attention(Tensor::zeros({1, 3}), Tensor::zeros({1, 3}), Tensor::zeros({1, 3}),
                               Tensor::zeros({1, 3}), LinearLayer::identity(3), 2),
               ConfigError);
  Rng rng(6);
  EXPECT_THROW(FTBlockParams::init(rng, 6, 4, 2, 2), ConfigError);
}

TEST(CrossAttention, PermutingKeyValueTokensLeavesOutputUnchanged) {
  std::mt19937_64 g(7);
  Rng rng(7);
  auto mix = LinearLayer::init(rng, 4, 4);
  auto q = random_tensor(g, {5, 4});
  auto tok = random_tensor(g, {6, 4});
  auto pos = random_tensor(g, {6, 4});
  auto vtok = random_tensor(g, {6, 4});
  auto residual = random_tensor(g, {5, 4});
  auto base = cross_attention(q, add(tok, pos), add(vtok, pos), residual, mix, 2);

  const std::size_t perm[] = {3, 0, 5, 1, 4, 2};
  auto permute = [&](const Tensor& t) {
    std::vector<Tensor> rows;
    for (auto p : perm) rows.push_back(slice(t, p, 1));
    return concat(rows);
  };
  auto moved = cross_attention(q, add(permute(tok), permute(pos)), add(permute(vtok), permute(pos)), residual, mix, 2);
  for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(moved[i], base[i], 1e-12);
}

TEST(FtBlock, InterimGridIsHighResolution) {
  Rng rng(8);
  auto p = FTBlockParams::init(rng, 4, 2, 16, 16);
  auto out = ft_block(Tensor::zeros({4, 8, 8}), Tensor::zeros({4, 16, 16}), p);
  EXPECT_EQ(out.shape(), (Shape{4, 16, 16}));
}

TEST(FtBlock, SelfFusionIsFiniteAndShapePreserving) {
  std::mt19937_64 g(9);
  FTBlockParams p;
  p.norm_q = LayerNormParams::init(3);
  p.norm_kv = LayerNormParams::init(3);
  p.proj_q = p.proj_k = p.proj_v = ConvProjection::identity(3);
  p.pos = Tensor::zeros({16, 3});
  p.mix = LinearLayer::identity(3);
  p.heads = 1;
  p.height = p.width = 4;
  auto map = random_tensor(g, {3, 4, 4});
  auto out = ft_block(map, map, p);
  EXPECT_EQ(out.shape(), map.shape());
  for (double v : out.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(FtBlock, ShapeSweep) {
  std::mt19937_64 g(10);
  std::uniform_int_distribution<std::size_t> side(1, 9);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t H = side(g), W = side(g);
    const std::size_t h = std::uniform_int_distribution<std::size_t>(1, H)(g);
    const std::size_t w = std::uniform_int_distribution<std::size_t>(1, W)(g);
    Rng rng(100 + trial);
    auto p = FTBlockParams::init(rng, 4, 2, H, W);
    auto out = ft_block(random_tensor(g, {4, h, w}), random_tensor(g, {4, H, W}), p);
    EXPECT_EQ(out.shape(), (Shape{4, H, W})) << h << "x" << w << " onto " << H << "x" << W;
  }
}

TEST(FtBlock, FiniteOverRandomInstances) {
  std::mt19937_64 g(11);
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(200 + trial);
    auto p = FTBlockParams::init(rng, 4, 2, 4, 4);
    auto out = ft_block(random_tensor(g, {4, 2, 2}, -10, 10), random_tensor(g, {4, 4, 4}, -10, 10), p);
    for (double v : out.data()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(FtBlock, LowLargerThanHighRejected) {
  Rng rng(12);
  auto p = FTBlockParams::init(rng, 4, 2, 2, 2);
  EXPECT_THROW(ft_block(Tensor::zeros({4, 4, 4}), Tensor::zeros({4, 2, 2}), p), DimensionError);
  EXPECT_THROW(ft_block(Tensor::zeros({4, 1, 1}), Tensor::zeros({4, 0, 0}), p), DimensionError);
}

TEST(FtBlock, GradientGate) {
  Rng rng(13);
  const auto p = FTBlockParams::init(rng, 4, 2, 3, 3);
  auto worst = hiq::testing::gradient_gate(
      [&](const std::vector<Tensor>& in) { return hiq::testing::weighted_sum(ft_block(in[0], in[1], p)); },
      [](std::mt19937_64& g) {
        return std::vector<Tensor>{random_tensor(g, {4, 2, 2}), random_tensor(g, {4, 3, 3})};
      });
  EXPECT_LT(worst.max_rel_error, 1e-5);
}

TEST(ProgressiveFuse, TwoTapsOneBlock) {
  Rng rng(14);
  auto s = stack_for(rng, {{3, 8, 8}, {5, 4, 4}}, 4, 2);
  EXPECT_EQ(s.blocks.size(), 1u);
  auto out = progressive_fuse({Tensor::zeros({3, 8, 8}), Tensor::zeros({5, 4, 4})}, s);
  EXPECT_EQ(out.shape(), (Shape{4, 8, 8}));
  EXPECT_EQ(count_ops(out, "multi_head_attention"), 1u);
}

TEST(ProgressiveFuse, ThreeTapsChainTwoBlocks) {
  Rng rng(15);
  std::mt19937_64 g(15);
  auto s = stack_for(rng, {{3, 8, 8}, {4, 4, 4}, {5, 2, 2}}, 4, 2);
  std::vector<Tensor> taps{random_tensor(g, {3, 8, 8}), random_tensor(g, {4, 4, 4}), random_tensor(g, {5, 2, 2})};
  auto out = progressive_fuse(taps, s);
  EXPECT_EQ(count_ops(out, "multi_head_attention"), 2u);
  // The second block consumes the first block's output.
  auto first = ft_block(project_channels(taps[2], s.tap_proj[2]), project_channels(taps[1], s.tap_proj[1]), s.blocks[0]);
  auto second = ft_block(first, project_channels(taps[0], s.tap_proj[0]), s.blocks[1]);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], second[i]);
}

TEST(ProgressiveFuse, FewerThanTwoTapsRejected) {
  Rng rng(16);
  EXPECT_THROW(stack_for(rng, {{3, 4, 4}}, 4, 2), ConfigError);
  auto s = stack_for(rng, {{3, 8, 8}, {5, 4, 4}}, 4, 2);
  EXPECT_THROW(progressive_fuse({Tensor::zeros({3, 8, 8})}, s), ConfigError);
}

TEST(ProgressiveFuse, GradientReachesEveryTap) {
  Rng rng(17);
  std::mt19937_64 g(17);
  auto s = stack_for(rng, {{3, 8, 8}, {4, 4, 4}, {5, 2, 2}}, 4, 2);
  std::vector<Tensor> taps{random_tensor(g, {3, 8, 8}), random_tensor(g, {4, 4, 4}), random_tensor(g, {5, 2, 2})};
  for (auto& t : taps) t.set_requires_grad(true);
  hiq::testing::weighted_sum(progressive_fuse(taps, s)).backward();
  auto nonzero = [](const Tensor& t) {
    if (!t.has_grad()) return false;
    for (double v : t.grad())
      if (v != 0.0) return true;
    return false;
  };
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(nonzero(taps[i])) << "tap " << i;
    EXPECT_TRUE(nonzero(s.tap_proj[i].weight)) << "tap projection " << i;
  }
}

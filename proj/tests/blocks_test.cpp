#include <gtest/gtest.h>

#include "smeyolo/eucb.hpp"
#include "smeyolo/msfa.hpp"

namespace sme {
namespace {

// ----------------------------------------------------------------- MSFA

TEST(Msfa, PreservesShape) {
  const auto p = make_msfa<float>(16, 1);
  const auto x = random_tensor<float>({2, 16, 32, 32}, 2, "x");
  EXPECT_EQ(msfa_forward(x, p).dims(), x.dims());
  const auto p1 = make_msfa<float>(3, 1);
  for (auto hw : {std::pair<std::size_t, std::size_t>{1, 1}, {1, 7}, {5, 2}}) {
    const auto t = random_tensor<float>({1, 3, hw.first, hw.second}, 3, "t");
    EXPECT_EQ(msfa_forward(t, p1).dims(), t.dims());
  }
}

TEST(Msfa, BranchLayout) {
  const auto p = make_msfa<float>(8, 1);
  ASSERT_EQ(p.branches.size(), 3u);
  EXPECT_EQ(p.branch_a().row.kernel.dims(), (Dims{8, 1, 1, 11}));
  EXPECT_EQ(p.branch_a().col.kernel.dims(), (Dims{8, 1, 11, 1}));
  EXPECT_EQ(p.branch_a().row.padding, (Padding{0, 5}));
  EXPECT_EQ(p.branch_a().col.padding, (Padding{5, 0}));
  EXPECT_EQ(p.branch_b().row.kernel.dims(), p.branch_a().row.kernel.dims());
  EXPECT_FALSE(p.branch_b().row.kernel.bit_equal(p.branch_a().row.kernel));
  EXPECT_EQ(p.branch_aux().row.kernel.dims(), (Dims{8, 1, 1, 9}));
  EXPECT_EQ(p.branch_aux().col.padding, (Padding{4, 0}));
  EXPECT_EQ(p.mix.kernel.dims(), (Dims{8, 32, 1, 1}));
}

TEST(Msfa, ZeroMixGivesHalfInput) {
  auto p = make_msfa<float>(4, 1);
  p.mix.kernel.fill(0);
  p.mix.bias->fill(0);
  const auto x = random_tensor<float>({1, 4, 9, 9}, 5, "x");
  const auto y = msfa_forward(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], 0.5f * x[i]);
}

TEST(Msfa, GateBoundsOutput) {
  const auto p = make_msfa<double>(4, 3);
  const auto x = random_tensor<double>({2, 4, 12, 10}, 4, "x", -5, 5);
  MsfaCache<double> cache;
  const auto y = msfa_forward(x, p, &cache);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_GT(cache.gate[i], 0.0);
    EXPECT_LT(cache.gate[i], 1.0);
    EXPECT_LE(std::abs(y[i]), std::abs(x[i]));
  }
}

TEST(Msfa, RejectsChannelMismatch) {
  const auto p = make_msfa<float>(4, 1);
  EXPECT_THROW(msfa_forward(Tensor<float>(1, 5, 8, 8), p), DimensionError);
}

TEST(Msfa, SwappingDualBranchesMatchesMixPermutation) {
  const std::size_t C = 4;
  auto p = make_msfa<float>(C, 9);
  const auto x = random_tensor<float>({1, C, 14, 14}, 10, "x");
  auto q = p;
  std::swap(q.branches[0], q.branches[1]);
  // Mix input blocks are [x, a, b, aux]; swap the a and b column blocks.
  for (std::size_t oc = 0; oc < C; ++oc)
    for (std::size_t c = 0; c < C; ++c)
      std::swap(q.mix.kernel.at(oc, C + c, 0, 0), q.mix.kernel.at(oc, 2 * C + c, 0, 0));
  EXPECT_TRUE(msfa_forward(x, p).bit_equal(msfa_forward(x, q)));
  // Without the permutation the output changes.
  auto r = p;
  std::swap(r.branches[0], r.branches[1]);
  EXPECT_FALSE(msfa_forward(x, p).bit_equal(msfa_forward(x, r)));
}

TEST(Msfa, GradientCheck) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto p = make_msfa<double>(8, 100 + s);
    const auto x = random_tensor<double>({1, 8, 16, 16}, 200 + s, "x");
    const auto rep = grad_check(msfa_differentiable(p), x);
    EXPECT_LE(rep.max_rel_err, 1e-6) << "instance " << s << " at " << rep.location;
  }
}

TEST(MsfaFlops, Counts) {
  // One 1x11 depthwise tap set at C=1, 1x1 costs 11; the pair doubles it,
  // plus a 2-wide mix and the gate.
  EXPECT_EQ(conv_macs(1, 1, 1, 1, 1, 11), 11u);
  EXPECT_EQ(msfa_flops(1, 1, 1, {11}), 11u + 11u + 2u + 1u);
  const std::uint64_t C = 64, h = 80, w = 80;
  const auto base = msfa_flops(C, h, w);
  const auto wider = msfa_flops(C, h, w, {11, 11, 9, 21});
  EXPECT_LT(base, wider);
  EXPECT_EQ(wider - base, C * h * w * (21 + 21) + C * C * h * w);
  EXPECT_EQ(msfa_flops(C, 2 * h, 2 * w), 4 * base);
  // Explicit expansion of the default configuration.
  EXPECT_EQ(base, C * h * w * (22 + 22 + 18) + 4 * C * C * h * w + C * h * w);
}

TEST(MsfaFlops, AddedBranchAlwaysCostsMore) {
  for (std::uint64_t C : {1, 3, 16, 64, 128})
    for (std::uint64_t h : {1, 7, 40})
      for (std::uint64_t w : {1, 5, 80})
        for (std::size_t k : {3, 5, 21})
          EXPECT_LT(msfa_flops(C, h, w), msfa_flops(C, h, w, {11, 11, 9, k}));
}

TEST(Msfa, BranchDivergence) {
  auto p = make_msfa<float>(4, 1);
  const auto probe = random_tensor<float>({1, 4, 16, 16}, 99, "probe");
  EXPECT_GT(branch_divergence(p, probe), 0.0);
  p.branches[1] = p.branches[0];
  EXPECT_EQ(branch_divergence(p, probe), 0.0);
}

// ----------------------------------------------------------------- EUCB

TEST(Eucb, Shape) {
  const auto p = make_eucb<float>(32, 16, 1);
  const auto x = random_tensor<float>({1, 32, 20, 20}, 2, "x");
  EXPECT_EQ(eucb_forward(x, p).dims(), (Dims{1, 16, 40, 40}));
  EXPECT_THROW(eucb_forward(Tensor<float>(1, 31, 4, 4), p), DimensionError);
}

TEST(Eucb, ConstantPreservedByIdentityStages) {
  const std::size_t C = 5;
  auto p = make_eucb<float>(C, 1, 1);
  p.dw.kernel.fill(0);
  for (std::size_t c = 0; c < C; ++c) p.dw.kernel.at(c, 0, 1, 1) = 1;
  p.bn.mode = BnMode::eval;
  p.bn.epsilon = 0;
  p.proj.kernel.fill(1.0f / C);
  p.proj.bias->fill(0);
  Tensor<float> x(1, C, 3, 4, 0.75f);
  const auto y = eucb_forward(x, p);
  ASSERT_EQ(y.dims(), (Dims{1, 1, 6, 8}));
  for (float v : y.values()) EXPECT_NEAR(v, 0.75f, 1e-6f);
}

TEST(Eucb, TrainModeNeedsStatistics) {
  const auto p = make_eucb<double>(2, 2, 1);
  // 1x1 input becomes 2x2 after upsampling, which is enough.
  EXPECT_NO_THROW(eucb_forward(random_tensor<double>({1, 2, 1, 1}, 1, "x"), p));
}

TEST(Eucb, EvalModeIsDeterministic) {
  auto p = make_eucb<float>(6, 3, 4);
  p.bn.mode = BnMode::eval;
  const auto x = random_tensor<float>({2, 6, 7, 5}, 3, "x");
  EXPECT_TRUE(eucb_forward(x, p).bit_equal(eucb_forward(x, p)));
}

TEST(Eucb, GradientCheckTrainModeBn) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto p = make_eucb<double>(6, 4, 300 + s, s % 2 ? UpsampleMode::bilinear : UpsampleMode::nearest);
    p.bn.gamma = random_tensor<double>({6}, s, "g", 0.5, 1.5);
    p.bn.beta = random_tensor<double>({6}, s, "b", -0.5, 0.5);
    const auto x = random_tensor<double>({1, 6, 8, 8}, 400 + s, "x");
    const auto rep = grad_check(eucb_differentiable(p), x);
    EXPECT_LE(rep.max_rel_err, 1e-5) << "instance " << s << " at " << rep.location;
  }
}

TEST(PlainUpsample, DelegatesBitForBit) {
  const auto x = random_tensor<float>({1, 3, 5, 6}, 8, "x");
  for (auto mode : {UpsampleMode::nearest, UpsampleMode::bilinear})
    EXPECT_TRUE(plain_upsample_baseline(x, mode).bit_equal(upsample2x(x, mode)));
  const auto board = Tensor<float>::from_values({1, 1, 2, 2}, {0, 1, 1, 0});
  const auto y = plain_upsample_baseline(board, UpsampleMode::nearest);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(0, 0, r, c), ((r / 2) + (c / 2)) % 2 == 1 ? 1.0f : 0.0f);
  Tensor<float> k(1, 2, 3, 3, -2.5f);
  const auto up = plain_upsample_baseline(k, UpsampleMode::bilinear);
  for (float v : up.values()) EXPECT_EQ(v, -2.5f);
}

}  // namespace
}  // namespace sme

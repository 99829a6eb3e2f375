#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"
#include "smeyolo/grad_check.hpp"
#include "smeyolo/ops.hpp"
#include "smeyolo/rng.hpp"

namespace sme {
namespace {

template <typename T>
ConvParams<T> random_conv(std::size_t in_c, std::size_t out_c, std::size_t kh, std::size_t kw, Padding pad,
                          std::size_t groups, bool bias, std::uint64_t seed) {
  ConvParams<T> p;
  p.kernel = random_tensor<T>({out_c, in_c / groups, kh, kw}, seed, "k");
  if (bias) p.bias = random_tensor<T>({out_c}, seed, "b");
  p.groups = groups;
  p.padding = pad;
  return p;
}

TEST(Conv2d, DepthwiseOnesCountsOverlap) {
  Tensor<float> x(1, 1, 3, 3, 1.0f);
  auto p = ConvParams<float>::depthwise_of(1, 3, 3, {1, 1}, false);
  p.kernel.fill(1.0f);
  const auto y = conv2d(x, p);
  ASSERT_EQ(y.dims(), (Dims{1, 1, 3, 3}));
  EXPECT_EQ(y.at(0, 0, 1, 1), 9.0f);
  EXPECT_EQ(y.at(0, 0, 0, 0), 4.0f);
  EXPECT_EQ(y.at(0, 0, 2, 2), 4.0f);
  EXPECT_EQ(y.at(0, 0, 0, 1), 6.0f);
}

TEST(Conv2d, IdentityOneByOne) {
  const auto x = random_tensor<float>({2, 1, 5, 7}, 3, "x");
  auto p = ConvParams<float>::dense(1, 1, 1, 1, {0, 0}, false);
  p.kernel[0] = 1.0f;
  EXPECT_TRUE(conv2d(x, p).bit_equal(x));
}

TEST(Conv2d, MatchesNaiveLoopOneByElevenRow) {
  const auto x = random_tensor<float>({2, 4, 8, 8}, 11, "x");
  const auto p = random_conv<float>(4, 4, 1, 11, {0, 5}, 4, true, 12);
  const auto fast = conv2d(x, p);
  const auto ref = oracle::naive_conv2d(x, p);
  ASSERT_EQ(fast.dims(), ref.dims());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(fast[i], ref[i], 1e-5) << i;
}

// Test matrix: {1x1, 1x9, 9x1, 1x11, 11x1, 3x3} x {padding 0, same padding},
// dense and depthwise, plus the stride-2 stem shape.
TEST(Conv2d, MatchesNaiveLoopOnShapeMatrix) {
  const std::vector<std::pair<std::size_t, std::size_t>> kernels{{1, 1}, {1, 9}, {9, 1}, {1, 11}, {11, 1}, {3, 3}};
  std::uint64_t seed = 100;
  for (auto [kh, kw] : kernels) {
    for (bool same : {false, true}) {
      for (std::size_t groups : {std::size_t{1}, std::size_t{3}}) {
        const Padding pad = same ? Padding{kh / 2, kw / 2} : Padding{0, 0};
        const auto x = random_tensor<double>({2, 3, 12, 13}, ++seed, "x");
        const auto p = random_conv<double>(3, 3, kh, kw, pad, groups, true, ++seed);
        const auto fast = conv2d(x, p);
        const auto ref = oracle::naive_conv2d(x, p);
        ASSERT_EQ(fast.dims(), ref.dims());
        for (std::size_t i = 0; i < ref.size(); ++i)
          ASSERT_NEAR(fast[i], ref[i], 1e-12) << kh << "x" << kw << " same=" << same << " g=" << groups;
      }
    }
  }
  const auto x = random_tensor<double>({1, 2, 15, 16}, 7, "x");
  const auto p = random_conv<double>(2, 4, 3, 3, {1, 1}, 1, true, 8);
  const auto fast = conv2d_stride2(x, p);
  const auto ref = oracle::naive_conv2d(x, p, 2);
  ASSERT_EQ(fast.dims(), (Dims{1, 4, 8, 8}));
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(fast[i], ref[i], 1e-12);
}

TEST(Conv2d, LinearInInput) {
  const auto x = random_tensor<float>({1, 4, 10, 10}, 1, "x");
  const auto z = random_tensor<float>({1, 4, 10, 10}, 2, "z");
  const auto p = random_conv<float>(4, 6, 3, 3, {1, 1}, 1, false, 3);
  const float a = 0.7f, b = -1.3f;
  Tensor<float> comb(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) comb[i] = a * x[i] + b * z[i];
  const auto lhs = conv2d(comb, p);
  const auto cx = conv2d(x, p), cz = conv2d(z, p);
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    const float rhs = a * cx[i] + b * cz[i];
    EXPECT_LE(std::abs(lhs[i] - rhs), 1e-5f * std::max(1.0f, std::abs(rhs)));
  }
}

TEST(Conv2d, RejectsChannelMismatchAndNonFinite) {
  Tensor<float> x(1, 3, 4, 4);
  const auto p = random_conv<float>(4, 4, 3, 3, {1, 1}, 1, false, 1);
  EXPECT_THROW(conv2d(x, p), DimensionError);
  Tensor<float> big(1, 4, 2, 2);
  const auto k5 = random_conv<float>(4, 4, 5, 5, {0, 0}, 1, false, 1);
  EXPECT_THROW(conv2d(big, k5), DimensionError);
  Tensor<float> bad(1, 4, 4, 4);
  bad[5] = std::numeric_limits<float>::quiet_NaN();
  try {
    conv2d(bad, p);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("conv2d input"), std::string::npos);
  }
}

TEST(Conv2dBackward, ZeroGradGivesZeros) {
  const auto x = random_tensor<double>({1, 2, 5, 5}, 1, "x");
  const auto p = random_conv<double>(2, 3, 3, 3, {1, 1}, 1, true, 2);
  const auto g = conv2d_backward(x, p, Tensor<double>(1, 3, 5, 5));
  for (double v : g.grad_x.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.grad_kernel.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.grad_bias->values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dBackward, ScalarProductRule) {
  auto x = Tensor<double>::from_values({1, 1, 1, 1}, {2.5});
  auto p = ConvParams<double>::dense(1, 1, 1, 1, {0, 0}, false);
  p.kernel[0] = -3.0;
  const auto g = conv2d_backward(x, p, Tensor<double>::from_values({1, 1, 1, 1}, {0.5}));
  EXPECT_DOUBLE_EQ(g.grad_x[0], -3.0 * 0.5);
  EXPECT_DOUBLE_EQ(g.grad_kernel[0], 2.5 * 0.5);
}

TEST(Conv2dBackward, RejectsWrongGradShape) {
  const auto x = random_tensor<double>({1, 2, 5, 5}, 1, "x");
  const auto p = random_conv<double>(2, 3, 3, 3, {1, 1}, 1, true, 2);
  EXPECT_THROW(conv2d_backward(x, p, Tensor<double>(1, 3, 4, 5)), DimensionError);
}

Differentiable<double> conv_block(ConvParams<double>& p, std::size_t stride) {
  Differentiable<double> d;
  d.forward = [&p, stride](const Tensor<double>& x) { return stride == 1 ? conv2d(x, p) : conv2d_stride2(x, p); };
  d.backward = [&p, stride](const Tensor<double>& x, const Tensor<double>& g) {
    return conv2d_backward_into(x, p, g, stride);
  };
  d.params = {{"kernel", &p.kernel}};
  if (p.bias) d.params.push_back({"bias", &*p.bias});
  return d;
}

TEST(Conv2dBackward, FiniteDifferences) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const std::size_t groups = s % 2 ? 3 : 1;
    const std::size_t kh = 1 + 2 * (s % 3), kw = 1 + 2 * ((s + 1) % 4);
    auto p = random_conv<double>(3, 3, kh, kw, {kh / 2, kw / 2}, groups, true, 500 + s);
    const auto x = random_tensor<double>({2, 3, 7, 6}, 600 + s, "x");
    const auto rep = grad_check(conv_block(p, s % 5 == 0 ? 2 : 1), x);
    EXPECT_LE(rep.max_rel_err, 1e-6) << "instance " << s << " at " << rep.location;
  }
}

TEST(Upsample2x, NearestDuplicates) {
  const auto x = Tensor<float>::from_values({1, 1, 1, 2}, {0, 2});
  const auto y = upsample2x(x, UpsampleMode::nearest);
  ASSERT_EQ(y.dims(), (Dims{1, 1, 2, 4}));
  const std::vector<float> row{0, 0, 2, 2};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(y.at(0, 0, 0, i), row[i]);
    EXPECT_EQ(y.at(0, 0, 1, i), row[i]);
  }
}

TEST(Upsample2x, BilinearHalfPixel) {
  const auto x = Tensor<float>::from_values({1, 1, 1, 2}, {0, 2});
  const auto y = upsample2x(x, UpsampleMode::bilinear);
  const std::vector<float> row{0.0f, 0.5f, 1.5f, 2.0f};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y.at(0, 0, 0, i), row[i]);
}

TEST(Upsample2x, BilinearMatchesPointwiseOracle) {
  const auto x = random_tensor<double>({2, 3, 5, 4}, 9, "x");
  const auto fast = upsample2x(x, UpsampleMode::bilinear);
  const auto ref = oracle::naive_bilinear2x(x);
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(fast[i], ref[i], 1e-12);
}

TEST(Upsample2x, ConstantsPreserved) {
  Tensor<float> x(2, 3, 4, 5, 1.75f);
  for (auto mode : {UpsampleMode::nearest, UpsampleMode::bilinear}) {
    const auto y = upsample2x(x, mode);
    for (float v : y.values()) EXPECT_EQ(v, 1.75f);
  }
}

TEST(Upsample2x, BackwardFiniteDifferences) {
  for (auto mode : {UpsampleMode::nearest, UpsampleMode::bilinear}) {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto x = random_tensor<double>({1, 2, 3 + s % 3, 4 + s % 2}, s, "x");
      Differentiable<double> d;
      d.forward = [mode](const Tensor<double>& in) { return upsample2x(in, mode); };
      d.backward = [mode](const Tensor<double>& in, const Tensor<double>& g) {
        return upsample2x_backward(g, in.dims(), mode);
      };
      EXPECT_LE(grad_check(d, x).max_rel_err, 1e-6);
    }
  }
}

TEST(BatchNorm, EvalIdentity) {
  const auto x = random_tensor<float>({2, 3, 4, 4}, 5, "x");
  auto s = BatchNormState<float>::identity(3);
  s.mode = BnMode::eval;
  s.epsilon = 0;
  EXPECT_TRUE(batchnorm(x, s).bit_equal(x));
}

TEST(BatchNorm, TrainNormalizesAndUpdatesRunningStats) {
  auto x = Tensor<double>::from_values({2, 1, 1, 1}, {1.0, 3.0});
  auto s = BatchNormState<double>::identity(1);
  const auto y = batchnorm(x, s);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], -expect, 1e-15);
  EXPECT_NEAR(y[1], expect, 1e-15);
  // momentum 0.1, unbiased variance 2
  EXPECT_NEAR(s.running_mean[0], 0.2, 1e-15);
  EXPECT_NEAR(s.running_var[0], 0.9 + 0.1 * 2.0, 1e-15);
}

TEST(BatchNorm, TrainModeNeedsMoreThanOneValue) {
  Tensor<double> x(1, 2, 1, 1);
  auto s = BatchNormState<double>::identity(2);
  EXPECT_THROW(batchnorm(x, s), DimensionError);
  s.mode = BnMode::eval;
  EXPECT_NO_THROW(batchnorm(x, s));
}

TEST(BatchNorm, BackwardFiniteDifferences) {
  for (auto mode : {BnMode::train, BnMode::eval}) {
    for (std::uint64_t s = 0; s < 20; ++s) {
      auto st = BatchNormState<double>::identity(3);
      st.mode = mode;
      st.gamma = random_tensor<double>({3}, s, "gamma", 0.5, 1.5);
      st.beta = random_tensor<double>({3}, s, "beta");
      st.running_mean = random_tensor<double>({3}, s, "rm");
      st.running_var = random_tensor<double>({3}, s, "rv", 0.5, 2.0);
      const auto x = random_tensor<double>({2, 3, 4, 3}, 50 + s, "x", -2, 2);
      Differentiable<double> d;
      d.forward = [&st](const Tensor<double>& in) { return batchnorm_forward(in, st); };
      d.backward = [&st](const Tensor<double>& in, const Tensor<double>& g) {
        BatchNormCache<double> c;
        batchnorm_forward(in, st, &c);
        auto r = batchnorm_backward(g, st, c);
        accumulate_grad(st.gamma, r.grad_gamma);
        accumulate_grad(st.beta, r.grad_beta);
        return r.grad_x;
      };
      d.params = {{"gamma", &st.gamma}, {"beta", &st.beta}};
      const auto rep = grad_check(d, x);
      EXPECT_LE(rep.max_rel_err, mode == BnMode::train ? 1e-5 : 1e-6) << rep.location;
    }
  }
}

TEST(Pointwise, Basics) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_EQ(sigmoid(-800.0), 0.0);
  EXPECT_EQ(sigmoid(800.0), 1.0);
  const auto x = Tensor<float>::from_values({1, 1, 1, 3}, {-3, 0, 2});
  const auto r = activation(x, Activation::relu);
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[2], 2.0f);
  const auto s = activation(x, Activation::sigmoid);
  EXPECT_EQ(s[1], 0.5f);
}

TEST(Pointwise, ConcatPreservesOrder) {
  std::vector<Tensor<float>> parts;
  for (int i = 0; i < 4; ++i) parts.emplace_back(Dims{2, 4, 3, 3}, static_cast<float>(i));
  std::vector<const Tensor<float>*> ptrs;
  for (auto& p : parts) ptrs.push_back(&p);
  const auto y = concat_channels(ptrs);
  ASSERT_EQ(y.dims(), (Dims{2, 16, 3, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(y.at(n, c, 1, 2), static_cast<float>(c / 4));
  const auto back = split_channels(y, {4, 4, 4, 4});
  for (int i = 0; i < 4; ++i) EXPECT_TRUE(back[static_cast<std::size_t>(i)].bit_equal(parts[static_cast<std::size_t>(i)]));
  Tensor<float> wrong(2, 4, 3, 4);
  EXPECT_THROW(concat_channels({std::cref(parts[0]), std::cref(wrong)}), DimensionError);
}

TEST(Pointwise, EltwiseShapeMismatch) {
  EXPECT_THROW(eltwise(Tensor<float>(1, 1, 2, 2), Tensor<float>(1, 1, 2, 3), Eltwise::mul), DimensionError);
}

TEST(Pointwise, BackwardFiniteDifferences) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto x = random_tensor<double>({1, 2, 4, 4}, s, "x", -3, 3);
    for (auto kind : {Activation::relu, Activation::sigmoid}) {
      Differentiable<double> d;
      d.forward = [kind](const Tensor<double>& in) { return activation(in, kind); };
      d.backward = [kind](const Tensor<double>& in, const Tensor<double>& g) {
        return activation_backward(in, activation(in, kind), g, kind);
      };
      EXPECT_LE(grad_check(d, x).max_rel_err, 1e-6);
    }
    // eltwise mul with a fixed second operand: grad_a = grad_out * b
    const auto b = random_tensor<double>({1, 2, 4, 4}, 100 + s, "b");
    for (auto kind : {Eltwise::mul, Eltwise::add}) {
      Differentiable<double> d;
      d.forward = [&b, kind](const Tensor<double>& a) { return eltwise(a, b, kind); };
      d.backward = [&b, kind](const Tensor<double>& a, const Tensor<double>& g) {
        return eltwise_backward(a, b, g, kind).first;
      };
      EXPECT_LE(grad_check(d, x).max_rel_err, 1e-6);
    }
  }
}

TEST(GradCheck, LinearBlockIsExact) {
  Differentiable<double> d;
  d.forward = [](const Tensor<double>& x) {
    Tensor<double> y = x;
    for (auto& v : y.values()) v *= 3;
    return y;
  };
  d.backward = [](const Tensor<double>&, const Tensor<double>& g) {
    Tensor<double> gx = g;
    for (auto& v : gx.values()) v *= 3;
    return gx;
  };
  const auto rep = grad_check(d, random_tensor<double>({1, 2, 3, 3}, 1, "x"));
  EXPECT_LE(rep.max_rel_err, 1e-9);
  EXPECT_EQ(rep.probes, 18u);
}

TEST(GradCheck, DetectsWrongBackward) {
  Differentiable<double> d;
  d.forward = [](const Tensor<double>& x) { return x; };
  d.backward = [](const Tensor<double>&, const Tensor<double>& g) {
    Tensor<double> gx = g;
    gx[0] *= 1.01;
    return gx;
  };
  const auto rep = grad_check(d, random_tensor<double>({1, 1, 2, 2}, 1, "x"));
  EXPECT_GT(rep.max_rel_err, 1e-3);
  EXPECT_EQ(rep.location, "input[0]");
}

TEST(GradCheck, NonFiniteProbeIsAnError) {
  Differentiable<double> d;
  d.forward = [](const Tensor<double>& x) {
    Tensor<double> y = x;
    if (x[0] > 1.0) y[0] = std::numeric_limits<double>::infinity();
    return y;
  };
  d.backward = [](const Tensor<double>&, const Tensor<double>& g) { return g; };
  auto x = Tensor<double>::from_values({1, 1, 1, 1}, {1.0});
  EXPECT_THROW(grad_check(d, x), NumericError);
}

TEST(Snapshot, RoundTripIsBitExact) {
  const auto t = random_tensor<float>({2, 3, 4, 5}, 77, "x");
  std::stringstream ss;
  write_snapshot(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.substr(0, 4), "SMET");
  ASSERT_EQ(bytes.size(), 4 + 4 + 4 + 4 * 8 + t.size() * 4);
  const auto back = read_snapshot<float>(ss);
  EXPECT_TRUE(back.bit_equal(t));
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_snapshot<float>(bad), std::runtime_error);
}

TEST(Determinism, RepeatedConvIsBitIdentical) {
  const auto x = random_tensor<float>({2, 8, 16, 16}, 1, "x");
  const auto p = random_conv<float>(8, 8, 1, 11, {0, 5}, 8, true, 2);
  EXPECT_TRUE(conv2d(x, p).bit_equal(conv2d(x, p)));
  const auto g = random_tensor<float>({2, 8, 16, 16}, 3, "g");
  const auto a = conv2d_backward(x, p, g), b = conv2d_backward(x, p, g);
  EXPECT_TRUE(a.grad_kernel.bit_equal(b.grad_kernel));
  EXPECT_TRUE(a.grad_x.bit_equal(b.grad_x));
}

}  // namespace
}  // namespace sme

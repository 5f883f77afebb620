#include <gtest/gtest.h>

#include <random>

#include "qclnet/tensor_ops.hpp"
#include "test_util.hpp"

using namespace qclnet;

namespace {

// Direct nested-loop cross-correlation.
Tensor direct_conv(const Tensor& x, const Tensor& k, std::size_t s, std::size_t p) {
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2), O = k.extent(0), kh = k.extent(2);
  const std::size_t Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kh) / s + 1;
  Tensor out({O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t b = 0; b < kh; ++b) {
              const long y = long(i * s + a) - long(p), xx = long(j * s + b) - long(p);
              if (y >= 0 && xx >= 0 && y < long(H) && xx < long(W))
                out.at(o, i, j) += k.at(o, c, a, b) * x.at(c, std::size_t(y), std::size_t(xx));
            }
  return out;
}

}  // namespace

TEST(Conv2d, PointwiseScaleAndIdentity) {
  const Tensor ones({1, 3, 3}, 1.0);
  EXPECT_EQ(conv2d(ones, {Tensor({1, 1, 1, 1}, 2.0), Tensor({1}), {1, 1}, {0, 0}}), Tensor({1, 3, 3}, 2.0));
  std::mt19937_64 rng(1);
  const Tensor x = qt::randn(rng, {1, 4, 5});
  EXPECT_EQ(conv2d(x, {Tensor({1, 1, 1, 1}, 1.0), Tensor({1}), {1, 1}, {0, 0}}), x);
}

TEST(Conv2d, RampNeighbourhoodSum) {
  const Tensor y = conv2d(qt::ramp({1, 4, 4}), {Tensor({1, 1, 3, 3}, 1.0), Tensor(), {1, 1}, {1, 1}});
  EXPECT_EQ(y.at(0, 1, 1), 45.0);
  EXPECT_EQ(y.at(0, 1, 1), direct_conv(qt::ramp({1, 4, 4}), Tensor({1, 1, 3, 3}, 1.0), 1, 1).at(0, 1, 1));
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  try {
    conv2d(Tensor({2, 3, 3}), {Tensor({1, 3, 1, 1}), Tensor(), {1, 1}, {0, 0}});
    FAIL() << "no exception";
  } catch (const ShapeError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("[2,3,3]"), std::string::npos) << m;
    EXPECT_NE(m.find("[1,3,1,1]"), std::string::npos) << m;
  }
}

TEST(Conv2d, MatchesDirectSumAndStrideSubsampling) {
  std::mt19937_64 rng(2);
  for (int n = 0; n < 20; ++n) {
    const Tensor x = qt::randn(rng, {3, 7, 6}), k = qt::randn(rng, {2, 3, 3, 3});
    const Tensor s1 = conv2d(x, {k, Tensor(), {1, 1}, {1, 1}});
    EXPECT_LT(max_rel_diff(s1, direct_conv(x, k, 1, 1)), 1e-12);
    const Tensor s2 = conv2d(x, {k, Tensor(), {2, 2}, {1, 1}});
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t i = 0; i < s2.extent(1); ++i)
        for (std::size_t j = 0; j < s2.extent(2); ++j) EXPECT_DOUBLE_EQ(s2.at(o, i, j), s1.at(o, 2 * i, 2 * j));
  }
}

TEST(Conv2d, Linearity) {
  std::mt19937_64 rng(3);
  const Tensor x = qt::randn(rng, {2, 5, 5}), y = qt::randn(rng, {2, 5, 5}), k = qt::randn(rng, {3, 2, 3, 3});
  const Conv2dParams p{k, Tensor(), {1, 1}, {1, 1}};
  EXPECT_LT(max_rel_diff(conv2d(1.5 * x + (-0.5) * y, p), 1.5 * conv2d(x, p) + (-0.5) * conv2d(y, p)), 1e-10);
}

TEST(Conv4d, DeltaKernelAndTapCount) {
  std::mt19937_64 rng(4);
  Tensor delta({1, 1, 3, 3, 3, 3});
  delta.at(0, 0, 1, 1, 1, 1) = 1.0;
  const Tensor x = qt::randn(rng, {1, 4, 4, 4, 4});
  EXPECT_EQ(conv4d(x, delta, 1, 1, 1, 1), x);
  const Tensor out = conv4d(Tensor({1, 3, 3, 3, 3}, 1.0), Tensor({1, 1, 3, 3, 3, 3}, 1.0));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], 81.0);
}

TEST(Relu, Examples) {
  EXPECT_EQ(relu(Tensor({3}, {-1.0, 0.0, 2.0})), Tensor({3}, {0.0, 0.0, 2.0}));
  EXPECT_EQ(relu(Tensor({4}, -3.0)), Tensor({4}, 0.0));
  EXPECT_EQ(relu(Tensor({4}, 3.0)), Tensor({4}, 3.0));
}

TEST(GroupNorm, Examples) {
  EXPECT_EQ(group_norm(Tensor({4, 2, 2}, 7.0), 2, Tensor({4}, 1.0), Tensor({4})), Tensor({4, 2, 2}, 0.0));
  const Tensor y = group_norm(Tensor({1, 1, 2}, {1.0, 3.0}), 1, Tensor({1}, 1.0), Tensor({1}), 0.0);
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
  std::mt19937_64 rng(5);
  EXPECT_EQ(group_norm(qt::randn(rng, {4, 3, 3}), 2, Tensor({4}), Tensor({4}, 5.0)), Tensor({4, 3, 3}, 5.0));
  EXPECT_THROW(group_norm(Tensor({3, 2, 2}), 2, Tensor({3}), Tensor({3})), ConfigError);
}

TEST(GroupNorm, PerGroupMomentsWithEps) {
  std::mt19937_64 rng(6);
  const Tensor y = group_norm(qt::randn(rng, {6, 8, 8}, 5.0, -3.0), 3, Tensor({6}, 1.0), Tensor({6}), 1e-5);
  const std::size_t n = 2 * 64;
  for (std::size_t g = 0; g < 3; ++g) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < n; ++i) m += y[g * n + i];
    m /= n;
    for (std::size_t i = 0; i < n; ++i) v += (y[g * n + i] - m) * (y[g * n + i] - m);
    v /= n;
    EXPECT_NEAR(m, 0.0, 1e-10);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(GlobalAvgPool, Examples) {
  EXPECT_EQ(global_avg_pool(Tensor({2, 3, 3}, 4.0)), Tensor({2}, 4.0));
  EXPECT_EQ(global_avg_pool(Tensor({1, 2, 2}, {0.0, 2.0, 4.0, 6.0})), Tensor({1}, 3.0));
  EXPECT_EQ(global_avg_pool(Tensor({1, 1, 1}, 9.5)), Tensor({1}, 9.5));
}

TEST(Upsample2x, ConstantsAndMonotone) {
  EXPECT_EQ(upsample2x(Tensor({1, 1, 1}, 7.0)), Tensor({1, 2, 2}, 7.0));
  const Tensor c = upsample2x(Tensor({2, 3, 4}, -1.25));
  EXPECT_EQ(c.shape(), (Shape{2, 6, 8}));
  EXPECT_LT(max_abs_diff(c, Tensor({2, 6, 8}, -1.25)), 1e-15);
  const Tensor r = upsample2x(qt::ramp({1, 1, 5}));
  for (std::size_t j = 1; j < 10; ++j) EXPECT_GE(r[j], r[j - 1]);
  // Half-pixel sampling: output 1 of a [0,1] row sits at source 0.25.
  const Tensor h = upsample2x(Tensor({1, 1, 2}, {0.0, 1.0}));
  EXPECT_DOUBLE_EQ(h[1], 0.25);
  EXPECT_DOUBLE_EQ(h[0], 0.0);
}

TEST(Softmax, Examples) {
  const Tensor e = softmax(Tensor({4}, 3.0), 0);
  for (double v : e.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  const Tensor big = softmax(Tensor({2}, {1000.0, 0.0}), 0);
  EXPECT_TRUE(big.all_finite());
  EXPECT_DOUBLE_EQ(big[0], 1.0);
  EXPECT_DOUBLE_EQ(big[1], 0.0);
  EXPECT_EQ(softmax(Tensor({1}, {-42.0}), 0)[0], 1.0);
}

TEST(Softmax, ProbabilityAlongAxis) {
  std::mt19937_64 rng(7);
  const Tensor y = softmax(qt::randn(rng, {3, 5, 2}, 20.0), 1);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0;
      for (std::size_t b = 0; b < 5; ++b) {
        EXPECT_GE(y.at(a, b, c), 0.0);
        s += y.at(a, b, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

#include <gtest/gtest.h>

#include <random>

#include "qclnet/autograd.hpp"
#include "test_util.hpp"

using namespace qclnet;

TEST(Autograd, SumGivesOnes) {
  Tape t;
  Var x = t.leaf(Tensor({2, 3}, 1.7), true);
  t.backward(ad::sum(x));
  EXPECT_EQ(x.grad(), Tensor({2, 3}, 1.0));
}

TEST(Autograd, ReluSubgradient) {
  Tape t;
  Var x = t.leaf(Tensor({2}, {-1.0, 2.0}), true);
  t.backward(ad::sum(ad::relu(x)));
  EXPECT_EQ(x.grad(), Tensor({2}, {0.0, 1.0}));
}

TEST(Autograd, FanOutAccumulates) {
  Tape t;
  Var x = t.leaf(Tensor({3}, {1.0, -2.0, 4.0}), true);
  t.backward(ad::sum(ad::add(x, x)));
  EXPECT_EQ(x.grad(), Tensor({3}, 2.0));
}

TEST(Autograd, NonScalarLossIsContractError) {
  Tape t;
  Var x = t.leaf(Tensor({3}, 1.0), true);
  EXPECT_THROW(t.backward(ad::relu(x)), ContractError);
}

TEST(Autograd, SecondBackwardNeedsReset) {
  Tape t;
  Var x = t.leaf(Tensor({2}, 1.0), true);
  Var l = ad::sum(x);
  t.backward(l);
  EXPECT_THROW(t.backward(l), ContractError);
  t.reset();
  Var y = t.leaf(Tensor({2}, 1.0), true);
  t.backward(ad::sum(y));
  EXPECT_EQ(y.grad(), Tensor({2}, 1.0));
}

TEST(Autograd, GradShapeMatchesValue) {
  Tape t;
  Var x = t.leaf(Tensor({2, 2, 3}, 0.5), true);
  Var y = ad::reshape(x, {4, 3});
  t.backward(ad::sum(y));
  EXPECT_EQ(x.grad().shape(), x.value().shape());
}

TEST(FiniteDiff, Quadratic) {
  std::mt19937_64 rng(1);
  const Tensor x = qt::randn(rng, {12});
  EXPECT_LT(finite_diff_check([](Tape&, const Var& v) { return ad::half_sum_squares(v); }, x), 1e-7);
}

TEST(FiniteDiff, ConstantFunctionHasZeroGradient) {
  const Tensor x({5}, 1.0);
  double analytic = 1.0;
  {
    Tape t;
    Var v = t.leaf(x, true);
    Var c = t.leaf(Tensor::scalar(3.0));
    Var y = ad::add(c, ad::scale(ad::sum(v), 0.0));
    t.backward(y);
    analytic = max_abs(v.grad());
  }
  EXPECT_EQ(analytic, 0.0);
  EXPECT_LE(finite_diff_check([](Tape& t, const Var& v) {
              return ad::add(t.leaf(Tensor::scalar(3.0)), ad::scale(ad::sum(v), 0.0));
            }, x),
            1e-12);
}

TEST(FiniteDiff, Conv2dAllArguments) {
  std::mt19937_64 rng(2);
  const Tensor x = qt::randn(rng, {2, 4, 4}), k = qt::randn(rng, {2, 2, 3, 3}), b = qt::randn(rng, {2});
  const Tensor w = qt::randn(rng, {2, 4, 4});
  auto f = [&](Tape& t, const Var& xx, const Var& kk, const Var& bb) {
    return ad::sum(ad::mul(ad::conv2d(xx, kk, bb, {1, 1}, {1, 1}), t.leaf(w)));
  };
  EXPECT_LT(finite_diff_check([&](Tape& t, const Var& v) { return f(t, v, t.leaf(k), t.leaf(b)); }, x), 1e-6);
  EXPECT_LT(finite_diff_check([&](Tape& t, const Var& v) { return f(t, t.leaf(x), v, t.leaf(b)); }, k), 1e-6);
  EXPECT_LT(finite_diff_check([&](Tape& t, const Var& v) { return f(t, t.leaf(x), t.leaf(k), v); }, b), 1e-6);
}

TEST(FiniteDiff, CrossEntropy) {
  std::mt19937_64 rng(3);
  Tensor mask({3, 3});
  mask[0] = mask[4] = mask[5] = 1.0;
  EXPECT_LT(finite_diff_check([&](Tape&, const Var& z) { return ad::softmax_cross_entropy(z, mask); },
                              qt::randn(rng, {2, 3, 3})),
            1e-6);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  std::vector<Parameter> ps{{"p", Tensor({3}, {1.0, -2.0, 3.0}), Tensor({3}, 0.0)}};
  AdamState st;
  adam_step(ps, AdamConfig{}, st);
  EXPECT_EQ(ps[0].value, Tensor({3}, {1.0, -2.0, 3.0}));
}

TEST(Adam, FirstStepMovesByLr) {
  std::vector<Parameter> ps{{"p", Tensor::scalar(1.0), Tensor::scalar(1.0)}};
  AdamState st;
  adam_step(ps, AdamConfig{}, st);
  EXPECT_NEAR(ps[0].value[0], 1.0 - 1e-3, 1e-9);
}

TEST(Adam, QuadraticBowl) {
  std::vector<Parameter> ps{{"p", Tensor::scalar(1.0), Tensor::scalar(0.0)}};
  AdamConfig cfg;
  cfg.lr = 1e-2;
  AdamState st;
  for (int i = 0; i < 500; ++i) {
    ps[0].grad[0] = 2.0 * (ps[0].value[0] - 3.0);
    adam_step(ps, cfg, st);
  }
  EXPECT_LT(std::abs(ps[0].value[0] - 3.0), 0.05);
}

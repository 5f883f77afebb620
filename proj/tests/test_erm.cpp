#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qclnet/erm.hpp"
#include "test_util.hpp"

using namespace qclnet;

namespace {

DecoderParams zero_decoder(std::size_t D, std::size_t skip_ch, std::size_t skips, std::size_t proj, std::size_t refine) {
  DecoderParams p;
  std::size_t in = D;
  for (std::size_t i = 0; i < skips; ++i) {
    p.skip_projections.push_back({Tensor({proj, skip_ch, 1, 1}), Tensor({proj}), {1, 1}, {0, 0}});
    p.refine_convs.push_back({Tensor({refine, in + proj, 3, 3}), Tensor({refine}), {1, 1}, {1, 1}});
    in = refine;
  }
  p.head = {Tensor({2, in, 1, 1}), Tensor({2}), {1, 1}, {0, 0}};
  return p;
}

DecoderParams random_decoder(std::mt19937_64& rng, std::size_t D, std::size_t skip_ch, std::size_t skips) {
  DecoderParams p = zero_decoder(D, skip_ch, skips, 3, 4);
  for (auto* c : {&p.head}) c->kernel = qt::randn(rng, c->kernel.shape());
  for (auto& c : p.skip_projections) c.kernel = qt::randn(rng, c.kernel.shape());
  for (auto& c : p.refine_convs) c.kernel = qt::randn(rng, c.kernel.shape(), 0.3);
  return p;
}

}  // namespace

TEST(QuatToReal, IdenticalPlanesGiveQuarterWeights) {
  std::mt19937_64 rng(1);
  const Tensor plane = qt::randn(rng, {3, 4, 4});
  const QuatTensor q{plane, plane, plane, plane};
  const Tensor w = quat_to_real_weights(q);
  for (double v : w.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  EXPECT_LT(max_abs_diff(quat_to_real(q), plane), 1e-14);
}

TEST(QuatToReal, DominantPlane) {
  std::mt19937_64 rng(2);
  QuatTensor q = {qt::randn(rng, {2, 3, 3}), qt::randn(rng, {2, 3, 3}), qt::randn(rng, {2, 3, 3}), qt::randn(rng, {2, 3, 3})};
  for (double& v : q.plane(2).data()) v += 1000.0;
  EXPECT_LT(max_abs_diff(quat_to_real(q), q.plane(2)), 1e-9);
}

TEST(QuatToReal, LogTwoGapGivesOneFifthTwoFifths) {
  const double ln2 = std::log(2.0);
  const QuatTensor q{Tensor({2, 2, 2}, 0.0), Tensor({2, 2, 2}, ln2), Tensor({2, 2, 2}, 0.0), Tensor({2, 2, 2}, 0.0)};
  const Tensor w = quat_to_real_weights(q);
  for (std::size_t d = 0; d < 2; ++d) {
    EXPECT_NEAR(w.at(d, 0), 0.2, 1e-15);
    EXPECT_NEAR(w.at(d, 1), 0.4, 1e-15);
    EXPECT_NEAR(w.at(d, 2), 0.2, 1e-15);
    EXPECT_NEAR(w.at(d, 3), 0.2, 1e-15);
  }
}

TEST(QuatToReal, ConvexAndShiftInvariantWeights) {
  std::mt19937_64 rng(3);
  QuatTensor q = {qt::randn(rng, {3, 4, 4}), qt::randn(rng, {3, 4, 4}), qt::randn(rng, {3, 4, 4}), qt::randn(rng, {3, 4, 4})};
  const Tensor out = quat_to_real(q), w = quat_to_real_weights(q);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double lo = q.plane(0)[k], hi = lo;
    for (std::size_t p = 1; p < 4; ++p) {
      lo = std::min(lo, q.plane(p)[k]);
      hi = std::max(hi, q.plane(p)[k]);
    }
    EXPECT_GE(out[k], lo - 1e-12);
    EXPECT_LE(out[k], hi + 1e-12);
  }
  for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(w.at(d, 0) + w.at(d, 1) + w.at(d, 2) + w.at(d, 3), 1.0, 1e-12);
  QuatTensor shifted = q;
  for (std::size_t p = 0; p < 4; ++p)
    for (double& v : shifted.plane(p).data()) v += 5.0;
  EXPECT_LT(max_abs_diff(quat_to_real_weights(shifted), w), 1e-12);
}

TEST(Decode, ZeroNetworkIsUniformHalf) {
  const DecoderParams p = zero_decoder(4, 2, 2, 3, 5);
  const Tensor out = decode(Tensor({4, 2, 2}), {Tensor({2, 4, 4}), Tensor({2, 8, 8})}, p);
  EXPECT_EQ(out, Tensor({2, 8, 8}, 0.5));
}

TEST(Decode, ShapeChainAndDistribution) {
  std::mt19937_64 rng(4);
  const DecoderParams p = random_decoder(rng, 4, 2, 2);
  const Tensor out = decode(qt::randn(rng, {4, 3, 3}), {qt::randn(rng, {2, 6, 6}), qt::randn(rng, {2, 12, 12})}, p);
  ASSERT_EQ(out.shape(), (Shape{2, 12, 12}));
  for (std::size_t k = 0; k < 144; ++k) {
    EXPECT_GE(out[k], 0.0);
    EXPECT_NEAR(out[k] + out[144 + k], 1.0, 1e-12);
  }
}

TEST(Decode, SkipMismatchNamesStage) {
  std::mt19937_64 rng(5);
  const DecoderParams p = random_decoder(rng, 4, 2, 2);
  try {
    decode(Tensor({4, 3, 3}), {Tensor({2, 6, 6}), Tensor({2, 10, 10})}, p);
    FAIL() << "no exception";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 1"), std::string::npos) << e.what();
  }
}

TEST(Decode, HeadMustHaveTwoChannels) {
  DecoderParams p = zero_decoder(2, 1, 0, 1, 1);
  p.head = {Tensor({3, 2, 1, 1}), Tensor({3}), {1, 1}, {0, 0}};
  EXPECT_THROW(decode(Tensor({2, 2, 2}), {}, p), ConfigError);
}

TEST(Binarize, Examples) {
  EXPECT_EQ(binarize(Tensor({2, 1, 1}, {0.4, 0.6})), Tensor({1, 1}, 1.0));
  EXPECT_EQ(binarize(Tensor({2, 1, 1}, {0.5, 0.5})), Tensor({1, 1}, 0.0));
  Tensor fg({2, 3, 3});
  for (std::size_t k = 0; k < 9; ++k) {
    fg[k] = 0.1;
    fg[9 + k] = 0.9;
  }
  EXPECT_EQ(binarize(fg), Tensor({3, 3}, 1.0));
}

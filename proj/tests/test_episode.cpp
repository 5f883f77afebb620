#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qclnet/model.hpp"
#include "test_util.hpp"

using namespace qclnet;

namespace {

Config small_config() {
  Config c;
  c.extents = {4, 2};
  c.layers = {2, 1};
  c.channels = 4;
  c.D = 4;
  c.groups = 2;
  c.qclm_depth = 1;
  c.skip_channels = 2;
  c.skip_proj = 2;
  c.refine = {3};
  return c;
}

MetricsAccumulator table(std::initializer_list<std::pair<int, ConfusionCounts>> rows) {
  MetricsAccumulator a;
  for (const auto& [k, c] : rows) a.add_counts(k, c);
  return a;
}

}  // namespace

TEST(Priors, SelfMatchFullyMaskedAndBruteForce) {
  std::mt19937_64 rng(1);
  const Tensor q = qt::randn(rng, {4, 3, 3});
  const Tensor self = prior_weights(q, {q})[0];
  for (double v : self.data()) EXPECT_NEAR(v, 1.0, 1e-12);
  EXPECT_EQ(prior_weights(q, {Tensor({4, 2, 2})})[0], Tensor({3, 3}, 0.0));
  const Tensor s0 = qt::randn(rng, {4, 2, 3}), s1 = qt::randn(rng, {4, 3, 2});
  const auto w = prior_weights(q, {s0, s1});
  ASSERT_EQ(w.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    const Tensor& s = k ? s1 : s0;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double best = 0.0;
        for (std::size_t a = 0; a < s.extent(1); ++a)
          for (std::size_t b = 0; b < s.extent(2); ++b) {
            double dot = 0, nq = 0, ns = 0;
            for (std::size_t c = 0; c < 4; ++c) {
              dot += q.at(c, i, j) * s.at(c, a, b);
              nq += q.at(c, i, j) * q.at(c, i, j);
              ns += s.at(c, a, b) * s.at(c, a, b);
            }
            best = std::max(best, dot / std::sqrt(nq * ns));
          }
        EXPECT_NEAR(w[k].at(i, j), best, 1e-12);
      }
  }
}

TEST(Fuse, ThresholdIsStrict) {
  const Tensor prior({1, 1}, 0.2);
  EXPECT_EQ(fuse_kshot({Tensor({1, 1}, 0.6)}, {prior}, 0.5)[0], 1.0);
  EXPECT_EQ(fuse_kshot({Tensor({1, 1}, 0.5)}, {prior}, 0.5)[0], 0.0);
}

TEST(Fuse, DominatingShotWins) {
  std::mt19937_64 rng(2);
  const Tensor a = qt::uniform(rng, {4, 4}), b = qt::uniform(rng, {4, 4});
  const Tensor fused = fuse_kshot({a, b}, {Tensor({4, 4}, 800.0), Tensor({4, 4}, 0.0)}, 0.5);
  EXPECT_EQ(fused, threshold(a, 0.5));
}

TEST(Fuse, ShiftInvariantAcrossShots) {
  std::mt19937_64 rng(3);
  const std::vector<Tensor> fg{qt::uniform(rng, {3, 3}), qt::uniform(rng, {3, 3}), qt::uniform(rng, {3, 3})};
  std::vector<Tensor> pr{qt::uniform(rng, {3, 3}), qt::uniform(rng, {3, 3}), qt::uniform(rng, {3, 3})};
  const Tensor base = fuse_kshot_soft(fg, pr);
  const Tensor shift = qt::uniform(rng, {3, 3}, -5, 5);
  for (auto& p : pr) p = p + shift;
  EXPECT_LT(max_abs_diff(fuse_kshot_soft(fg, pr), base), 1e-12);
  EXPECT_THROW(fuse_kshot_soft(fg, {pr[0]}), ShapeError);
}

TEST(MaskAvg, Examples) {
  EXPECT_EQ(mask_avg_baseline({Tensor({1, 1}, 0.2), Tensor({1, 1}, 0.8)}, 0.5)[0], 0.0);
  std::mt19937_64 rng(4);
  const Tensor s = qt::uniform(rng, {5, 5});
  EXPECT_EQ(mask_avg_baseline({s}, 0.5), fuse_kshot({s}, {qt::uniform(rng, {2, 2})}, 0.5));
  EXPECT_EQ(mask_avg_baseline({s, s, s}, 0.5), threshold(s, 0.5));
}

TEST(Metrics, WorkedTables) {
  EXPECT_EQ(miou(table({{0, {8, 2, 0, 0}}}), 1), 0.8);
  EXPECT_EQ(miou(table({{0, {1, 1, 0, 0}}, {1, {3, 0, 0, 0}}}), 2), 0.75);
  std::size_t excluded = 0;
  EXPECT_EQ(miou(table({{0, {3, 1, 0, 0}}, {1, {0, 0, 0, 7}}}), 2, &excluded), 0.75);
  EXPECT_EQ(excluded, 1u);
  EXPECT_EQ(fb_iou(table({{0, {0, 0, 0, 10}}})), 0.5);
  EXPECT_EQ(fb_iou(table({{0, {0, 3, 5, 0}}})), 0.0);
  EXPECT_THROW(fb_iou(MetricsAccumulator{}), ValidationError);
}

TEST(Metrics, PerfectPredictionAndMerge) {
  Tensor m({4, 4});
  m[5] = m[6] = 1.0;
  MetricsAccumulator a;
  a.add(m, m, 7);
  EXPECT_EQ(miou(a), 1.0);
  EXPECT_EQ(fb_iou(a), 1.0);
  MetricsAccumulator b = table({{7, {1, 2, 3, 4}}});
  MetricsAccumulator ab = a, ba = b;
  ab.merge(b);
  ba.merge(a);
  EXPECT_EQ(ab.pooled().tp, ba.pooled().tp);
  EXPECT_EQ(miou(ab), miou(ba));
  EXPECT_EQ(miou(ab), 3.0 / 8.0);
}

TEST(SynthEpisode, DeterministicAndShaped) {
  const Config c = small_config();
  const Episode a = synth_episode(5, 5, c.episode_spec()), b = synth_episode(5, 5, c.episode_spec());
  EXPECT_EQ(a.query.mask, b.query.mask);
  EXPECT_EQ(a.query.features.levels, b.query.features.levels);
  ASSERT_EQ(a.shots(), 5u);
  for (std::size_t k = 1; k < 5; ++k) EXPECT_NE(a.supports[k].features.levels, a.supports[0].features.levels);
  EXPECT_EQ(a.query.mask.shape(), (Shape{8, 8}));
  EXPECT_EQ(a.query.skips.size(), 1u);
  EXPECT_EQ(a.query.skips[0].shape(), (Shape{2, 8, 8}));
  EXPECT_NO_THROW(a.validate());
  for (std::uint64_t s = 0; s < 30; ++s) {
    const Episode e = synth_episode(s, 1, c.episode_spec());
    const double frac = sum(e.query.mask) / 64.0;
    EXPECT_GE(frac, 0.1);
    EXPECT_LE(frac, 0.5);
  }
}

TEST(SynthEpisode, PlantedSignatureRaisesObjectCorrelation) {
  const Config c = small_config();
  double margin = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Episode ep = synth_episode(s, 1, c.episode_spec());
    const Tensor& fq = ep.query.features.levels[0][0];
    const Tensor masked = mask_support(ep.supports[0].features, ep.supports[0].mask).levels[0][0];
    const Tensor corr = cosine_correlation(fq, masked);
    const Tensor qm = resize_nearest(ep.query.mask, 4, 4), sm = resize_nearest(ep.supports[0].mask, 4, 4);
    double obj = 0, bg = 0;
    std::size_t no = 0, nb = 0;
    for (std::size_t u = 0; u < 16; ++u)
      for (std::size_t x = 0; x < 16; ++x) {
        if (sm[x] == 0.0) continue;
        if (qm[u] > 0) obj += corr[u * 16 + x], ++no;
        else bg += corr[u * 16 + x], ++nb;
      }
    if (no && nb) margin += obj / no - bg / nb;
  }
  EXPECT_GT(margin / 100.0, 0.0);
}

TEST(ForwardEpisode, SingleShotIdenticalShotsAndDeterminism) {
  const Config c = small_config();
  const Model m = Model::initialized(c, 3);
  Episode ep = synth_episode(2, 1, c.episode_spec());
  const EpisodeOutput one = forward_episode(ep, m);
  EXPECT_EQ(one.mask, binarize(one.soft[0]));
  EXPECT_EQ(forward_episode(ep, m).soft, one.soft);
  ep.supports = {ep.supports[0], ep.supports[0], ep.supports[0]};
  const EpisodeOutput three = forward_episode(ep, m);
  EXPECT_LT(max_abs_diff(three.fused_fg, foreground(one.soft[0])), 1e-15);
  for (const auto& pr : three.priors)
    for (double v : pr.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
}

TEST(Train, ZeroLearningRateKeepsLossConstant) {
  const Config c = small_config();
  Model m = Model::initialized(c, 1);
  const auto r = train(m, toy_episodes(c), 5, 0.0);
  ASSERT_EQ(r.loss.size(), 5u);
  for (double l : r.loss) EXPECT_EQ(l, r.loss[0]);
}

TEST(Train, ShortRunIsDeterministicAndDescends) {
  const Config c = small_config();
  Model a = Model::initialized(c, 1), b = Model::initialized(c, 1);
  const auto ra = train(a, toy_episodes(c), 40, 1e-2), rb = train(b, toy_episodes(c), 40, 1e-2);
  EXPECT_EQ(ra.loss, rb.loss);
  EXPECT_LT(ra.loss.back(), ra.loss.front());
}

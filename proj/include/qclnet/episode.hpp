#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "qclnet/correlation.hpp"
#include "qclnet/error.hpp"
#include "qclnet/tensor.hpp"
#include "qclnet/tensor_ops.hpp"

namespace qclnet {

/// Pyramid layout plus the low-level query skips consumed by the decoder.
/// Skip i (coarse to fine) has extent E_0 * 2^(i+1); masks have extent E_0 * 2^skip_count.
struct EpisodeSpec {
  PyramidSpec pyramid;
  std::size_t skip_count = 2;
  std::size_t skip_channels = 16;

  std::size_t image_extent() const { return pyramid.extents.at(0) << skip_count; }
  std::size_t skip_extent(std::size_t i) const { return pyramid.extents.at(0) << (i + 1); }
};

struct SupportShot {
  FeaturePyramid features;
  Tensor mask;  // [H,W] binary
};

struct QueryImage {
  FeaturePyramid features;
  std::vector<Tensor> skips;  // coarse to fine, [C,h,w]
  Tensor mask;                // ground truth [H,W] binary
};

struct Episode {
  std::vector<SupportShot> supports;
  QueryImage query;
  int class_id = 0;

  std::size_t shots() const { return supports.size(); }

  void validate() const {
    if (supports.empty()) throw ValidationError("Episode: at least one support shot is required");
    require_binary_mask(query.mask, "Episode query");
    query.features.validate();
    for (const auto& s : supports) {
      require_binary_mask(s.mask, "Episode support");
      if (s.mask.shape() != query.mask.shape())
        throw ShapeError("Episode: support mask " + shape_str(s.mask.shape()) + " differs from query mask " +
                         shape_str(query.mask.shape()));
      s.features.validate();
    }
  }
};

namespace detail {

// Axis-aligned rectangle covering 10-50% of an n x n frame whose nearest
// resize to every extent in `levels` keeps at least one foreground pixel.
inline Tensor random_rect_mask(std::mt19937_64& rng, std::size_t n, const std::vector<std::size_t>& levels) {
  std::uniform_real_distribution<double> area(0.1, 0.5), aspect(0.5, 2.0);
  const double total = static_cast<double>(n * n);
  for (;;) {
    const double a = area(rng) * total, r = aspect(rng);
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(a * r)));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(a / r)));
    if (h == 0 || w == 0 || h > n || w > n) continue;
    const double frac = static_cast<double>(h * w) / total;
    if (frac < 0.1 || frac > 0.5) continue;
    std::uniform_int_distribution<std::size_t> y0(0, n - h), x0(0, n - w);
    const std::size_t top = y0(rng), left = x0(rng);
    Tensor m({n, n});
    for (std::size_t i = top; i < top + h; ++i)
      for (std::size_t j = left; j < left + w; ++j) m.at(i, j) = 1.0;
    bool visible = true;
    for (auto e : levels) visible = visible && max_abs(resize_nearest(m, e, e)) > 0.0;
    if (visible) return m;
  }
}

inline constexpr double kSignatureAmplitude = 1.5;

// N(0,1) noise plus the planted signature wherever the resized mask is set.
inline Tensor planted_map(std::mt19937_64& rng, const std::vector<double>& sig, const Tensor& mask, std::size_t extent) {
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t C = sig.size();
  const Tensor m = resize_nearest(mask, extent, extent);
  Tensor f({C, extent, extent});
  for (double& v : f.data()) v = nd(rng);
  const std::size_t hw = extent * extent;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < hw; ++k) f[c * hw + k] += kSignatureAmplitude * m[k] * sig[c];
  return f;
}

}  // namespace detail

/// Deterministic synthetic episode. Query and supports share a rank-one object
/// signature per feature layer inside their (random rectangle) masks.
inline Episode synth_episode(std::uint64_t seed, std::size_t K, const EpisodeSpec& spec) {
  spec.pyramid.validate();
  if (K < 1) throw ValidationError("synth_episode: K must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const auto& ps = spec.pyramid;
  auto draw = [&](std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = nd(rng);
    return v;
  };
  std::vector<std::vector<std::vector<double>>> sigs(ps.extents.size());
  for (std::size_t p = 0; p < ps.extents.size(); ++p)
    for (std::size_t i = 0; i < ps.layer_counts[p]; ++i) sigs[p].push_back(draw(ps.channels));
  std::vector<std::vector<double>> skip_sigs;
  for (std::size_t i = 0; i < spec.skip_count; ++i) skip_sigs.push_back(draw(spec.skip_channels));

  const std::size_t n = spec.image_extent();
  auto pyramid_for = [&](const Tensor& mask) {
    FeaturePyramid fp;
    for (std::size_t p = 0; p < ps.extents.size(); ++p) {
      std::vector<Tensor> level;
      for (std::size_t i = 0; i < ps.layer_counts[p]; ++i)
        level.push_back(detail::planted_map(rng, sigs[p][i], mask, ps.extents[p]));
      fp.levels.push_back(std::move(level));
    }
    return fp;
  };

  Episode ep;
  ep.class_id = static_cast<int>(seed % 20);
  ep.query.mask = detail::random_rect_mask(rng, n, ps.extents);
  ep.query.features = pyramid_for(ep.query.mask);
  for (std::size_t i = 0; i < spec.skip_count; ++i)
    ep.query.skips.push_back(detail::planted_map(rng, skip_sigs[i], ep.query.mask, spec.skip_extent(i)));
  for (std::size_t k = 0; k < K; ++k) {
    SupportShot s;
    s.mask = detail::random_rect_mask(rng, n, ps.extents);
    s.features = pyramid_for(s.mask);
    ep.supports.push_back(std::move(s));
  }
  return ep;
}

/// Per query pixel, the best ReLU-cosine match over all support pixels, one
/// [Hq,Wq] map per shot. Supports are expected to be masked already.
inline std::vector<Tensor> prior_weights(const Tensor& query_last, const std::vector<Tensor>& supports_last) {
  std::vector<Tensor> out;
  for (const auto& s : supports_last) {
    const Tensor c = cosine_correlation(query_last, s);
    const std::size_t Hq = c.extent(0), Wq = c.extent(1), S = c.extent(2) * c.extent(3);
    Tensor w({Hq, Wq});
    for (std::size_t q = 0; q < Hq * Wq; ++q) w[q] = *std::max_element(c.ptr() + q * S, c.ptr() + (q + 1) * S);
    out.push_back(std::move(w));
  }
  return out;
}

/// Channel 1 of a [2,H,W] soft mask.
inline Tensor foreground(const Tensor& soft) {
  if (soft.rank() != 3 || soft.extent(0) != 2) throw ShapeError("foreground: expected [2,H,W], got " + shape_str(soft.shape()));
  const std::size_t hw = soft.extent(1) * soft.extent(2);
  return Tensor({soft.extent(1), soft.extent(2)}, std::vector<double>(soft.ptr() + hw, soft.ptr() + 2 * hw));
}

/// Prior-weighted foreground probability: sum_i softmax_i(w_i) * M_i per pixel.
/// Priors are bilinearly resized to the prediction extent first.
inline Tensor fuse_kshot_soft(const std::vector<Tensor>& per_shot_fg, const std::vector<Tensor>& priors) {
  if (per_shot_fg.empty() || per_shot_fg.size() != priors.size())
    throw ShapeError("fuse_kshot: " + std::to_string(per_shot_fg.size()) + " predictions but " +
                     std::to_string(priors.size()) + " prior maps");
  const std::size_t K = per_shot_fg.size();
  const Shape& s = per_shot_fg[0].shape();
  if (s.size() != 2) throw ShapeError("fuse_kshot: predictions must be [H,W]");
  std::vector<Tensor> pr;
  for (std::size_t i = 0; i < K; ++i) {
    if (per_shot_fg[i].shape() != s) throw ShapeError("fuse_kshot: prediction extents differ");
    const Tensor& w = priors[i];
    if (w.rank() != 2) throw ShapeError("fuse_kshot: priors must be [h,w]");
    pr.push_back(w.shape() == s ? w : resize_bilinear(w.reshaped({1, w.extent(0), w.extent(1)}), s[0], s[1]).reshaped(s));
  }
  Tensor fused(s);
  std::vector<double> e(K);
  for (std::size_t k = 0; k < fused.size(); ++k) {
    double mx = pr[0][k];
    for (std::size_t i = 1; i < K; ++i) mx = std::max(mx, pr[i][k]);
    double z = 0.0;
    for (std::size_t i = 0; i < K; ++i) z += (e[i] = std::exp(pr[i][k] - mx));
    double v = 0.0;
    for (std::size_t i = 0; i < K; ++i) v += (e[i] / z) * per_shot_fg[i][k];
    fused[k] = v;
  }
  return fused;
}

/// 1 where value > tau (strict), else 0.
inline Tensor threshold(const Tensor& t, double tau) {
  Tensor out(t.shape());
  for (std::size_t k = 0; k < t.size(); ++k) out[k] = t[k] > tau ? 1.0 : 0.0;
  return out;
}

inline Tensor fuse_kshot(const std::vector<Tensor>& per_shot_fg, const std::vector<Tensor>& priors, double tau) {
  return threshold(fuse_kshot_soft(per_shot_fg, priors), tau);
}

/// Unweighted mean of the shots' foreground probabilities, thresholded.
inline Tensor mask_avg_baseline(const std::vector<Tensor>& per_shot_fg, double tau) {
  if (per_shot_fg.empty()) throw ShapeError("mask_avg_baseline: no predictions");
  Tensor mean(per_shot_fg[0].shape());
  for (const auto& m : per_shot_fg) mean += m;
  mean *= 1.0 / static_cast<double>(per_shot_fg.size());
  return threshold(mean, tau);
}

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

/// Foreground confusion counts per class plus pooled counts over all classes.
/// Merging accumulators is a plain sum, so episodes can be scored in any order.
class MetricsAccumulator {
 public:
  void add(const Tensor& pred, const Tensor& truth, int class_id) {
    if (pred.shape() != truth.shape())
      throw ShapeError("metrics: prediction " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
    ConfusionCounts c;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const bool p = pred[k] > 0.5, t = truth[k] > 0.5;
      if (p && t) ++c.tp;
      else if (p) ++c.fp;
      else if (t) ++c.fn;
      else ++c.tn;
    }
    add_counts(class_id, c);
  }

  void add_counts(int class_id, const ConfusionCounts& c) {
    per_class_[class_id] += c;
    pooled_ += c;
  }

  void merge(const MetricsAccumulator& o) {
    for (const auto& [k, v] : o.per_class_) per_class_[k] += v;
    pooled_ += o.pooled_;
  }

  const std::map<int, ConfusionCounts>& per_class() const { return per_class_; }
  const ConfusionCounts& pooled() const { return pooled_; }

 private:
  std::map<int, ConfusionCounts> per_class_;
  ConfusionCounts pooled_;
};

inline double iou(std::uint64_t inter, std::uint64_t uni) {
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Mean foreground IoU over class ids [0, classes). Classes with TP+FP+FN = 0
/// are left out of the mean and counted in *excluded.
inline double miou(const MetricsAccumulator& acc, std::size_t classes, std::size_t* excluded = nullptr) {
  double s = 0.0;
  std::size_t used = 0, skipped = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    const auto it = acc.per_class().find(static_cast<int>(k));
    if (it == acc.per_class().end() || it->second.tp + it->second.fp + it->second.fn == 0) {
      ++skipped;
      continue;
    }
    s += iou(it->second.tp, it->second.tp + it->second.fp + it->second.fn);
    ++used;
  }
  if (excluded) *excluded = skipped;
  return used ? s / static_cast<double>(used) : 0.0;
}

/// Mean foreground IoU over every class seen by the accumulator.
inline double miou(const MetricsAccumulator& acc, std::size_t* excluded = nullptr) {
  double s = 0.0;
  std::size_t used = 0, skipped = 0;
  for (const auto& [k, c] : acc.per_class()) {
    if (c.tp + c.fp + c.fn == 0) {
      ++skipped;
      continue;
    }
    s += iou(c.tp, c.tp + c.fp + c.fn);
    ++used;
  }
  if (excluded) *excluded = skipped;
  return used ? s / static_cast<double>(used) : 0.0;
}

/// Mean of pooled foreground and background IoU; an empty union counts as 0.
inline double fb_iou(const MetricsAccumulator& acc) {
  const auto& c = acc.pooled();
  if (c.tp + c.fp + c.fn + c.tn == 0) throw ValidationError("fb_iou: no evaluated pixels");
  const double fg = iou(c.tp, c.tp + c.fp + c.fn);
  const double bg = iou(c.tn, c.tn + c.fp + c.fn);
  return 0.5 * (fg + bg);
}

}  // namespace qclnet

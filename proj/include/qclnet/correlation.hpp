#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qclnet/error.hpp"
#include "qclnet/parallel.hpp"
#include "qclnet/tensor.hpp"

namespace qclnet {

/// Level extents (finest first), feature maps per level, channels per map.
struct PyramidSpec {
  std::vector<std::size_t> extents;
  std::vector<std::size_t> layer_counts;
  std::size_t channels = 16;

  void validate() const {
    if (extents.empty()) throw ConfigError("pyramid: at least one level is required");
    if (extents.size() != layer_counts.size())
      throw ConfigError("pyramid: " + std::to_string(extents.size()) + " extents but " +
                        std::to_string(layer_counts.size()) + " layer counts");
    for (std::size_t p = 0; p < extents.size(); ++p) {
      if (extents[p] == 0 || layer_counts[p] == 0) throw ConfigError("pyramid: extents and layer counts must be positive");
      if (p > 0 && extents[p] != (extents[p - 1] + 1) / 2)
        throw ConfigError("pyramid: level " + std::to_string(p) + " extent " + std::to_string(extents[p]) +
                          " is not half of " + std::to_string(extents[p - 1]));
    }
    if (channels == 0) throw ConfigError("pyramid: channels must be positive");
  }
};

/// levels[p][i] is feature map i of level p, shaped [C, E_p, E_p].
struct FeaturePyramid {
  std::vector<std::vector<Tensor>> levels;

  std::size_t level_count() const { return levels.size(); }

  void validate() const {
    for (std::size_t p = 0; p < levels.size(); ++p) {
      if (levels[p].empty()) throw ShapeError("FeaturePyramid: level " + std::to_string(p) + " is empty");
      const Shape& s0 = levels[p][0].shape();
      if (s0.size() != 3) throw ShapeError("FeaturePyramid: maps must be [C,H,W], got " + shape_str(s0));
      for (const auto& m : levels[p])
        if (m.extent(1) != s0[1] || m.extent(2) != s0[2])
          throw ShapeError("FeaturePyramid: level " + std::to_string(p) + " mixes extents " + shape_str(s0) + " and " +
                           shape_str(m.shape()));
      if (p > 0 && !(levels[p][0].extent(1) < levels[p - 1][0].extent(1)))
        throw ShapeError("FeaturePyramid: level extents must strictly decrease");
    }
  }
};

inline void require_binary_mask(const Tensor& mask, const char* what) {
  if (mask.rank() != 2) throw ShapeError(std::string(what) + ": mask must be [H,W], got " + shape_str(mask.shape()));
  for (double v : mask.data())
    if (v != 0.0 && v != 1.0) throw ValidationError(std::string(what) + ": mask values must be 0 or 1");
}

/// Nearest-neighbour resize of an [H,W] map using pixel centres.
inline Tensor resize_nearest(const Tensor& m, std::size_t out_h, std::size_t out_w) {
  const std::size_t H = m.extent(0), W = m.extent(1);
  Tensor out({out_h, out_w});
  for (std::size_t i = 0; i < out_h; ++i) {
    const auto si = std::min(H - 1, static_cast<std::size_t>((static_cast<double>(i) + 0.5) * H / out_h));
    for (std::size_t j = 0; j < out_w; ++j) {
      const auto sj = std::min(W - 1, static_cast<std::size_t>((static_cast<double>(j) + 0.5) * W / out_w));
      out.at(i, j) = m.at(si, sj);
    }
  }
  return out;
}

/// Zeroes support features outside the (resized) binary mask.
inline FeaturePyramid mask_support(const FeaturePyramid& features, const Tensor& mask) {
  require_binary_mask(mask, "mask_support");
  FeaturePyramid out = features;
  for (auto& level : out.levels)
    for (auto& map : level) {
      const std::size_t C = map.extent(0), H = map.extent(1), W = map.extent(2);
      const Tensor m = resize_nearest(mask, H, W);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < H * W; ++k) map[c * H * W + k] *= m[k];
    }
  return out;
}

namespace detail {
inline constexpr double kZeroNorm = 1e-12;

// Per-pixel unit vectors laid out [HW, C]; zero rows where the norm vanishes.
inline std::vector<double> unit_pixels(const Tensor& f) {
  const std::size_t C = f.extent(0), HW = f.extent(1) * f.extent(2);
  std::vector<double> u(HW * C, 0.0);
  for (std::size_t k = 0; k < HW; ++k) {
    double n2 = 0.0;
    for (std::size_t c = 0; c < C; ++c) n2 += f[c * HW + k] * f[c * HW + k];
    const double n = std::sqrt(n2);
    if (n < kZeroNorm) continue;
    for (std::size_t c = 0; c < C; ++c) u[k * C + c] = f[c * HW + k] / n;
  }
  return u;
}
}  // namespace detail

/// ReLU of the cosine similarity between every query pixel and every support
/// pixel: [C,Hq,Wq] x [C,Hs,Ws] -> [Hq,Wq,Hs,Ws]. Zero vectors give 0.
inline Tensor cosine_correlation(const Tensor& fq, const Tensor& fs) {
  if (fq.rank() != 3 || fs.rank() != 3 || fq.extent(0) != fs.extent(0))
    throw ShapeError("cosine_correlation: channel mismatch between " + shape_str(fq.shape()) + " and " +
                     shape_str(fs.shape()));
  const std::size_t C = fq.extent(0);
  const std::size_t Q = fq.extent(1) * fq.extent(2), S = fs.extent(1) * fs.extent(2);
  const auto uq = detail::unit_pixels(fq), us = detail::unit_pixels(fs);
  Tensor out({fq.extent(1), fq.extent(2), fs.extent(1), fs.extent(2)});
  parallel_for(
      Q,
      [&](std::size_t q) {
        const double* a = uq.data() + q * C;
        for (std::size_t s = 0; s < S; ++s) {
          const double* b = us.data() + s * C;
          double dot = 0.0;
          for (std::size_t c = 0; c < C; ++c) dot += a[c] * b[c];
          out[q * S + s] = dot > 0.0 ? dot : 0.0;
        }
      },
      S * C);
  return out;
}

/// Per level p: stack of the |N_p| layer correlations, [N_p, Hq, Wq, Hs, Ws].
inline std::vector<Tensor> build_hypercorrelation(const FeaturePyramid& q, const FeaturePyramid& s_masked) {
  if (q.level_count() != s_masked.level_count())
    throw ShapeError("build_hypercorrelation: pyramids have " + std::to_string(q.level_count()) + " and " +
                     std::to_string(s_masked.level_count()) + " levels");
  std::vector<Tensor> out;
  for (std::size_t p = 0; p < q.level_count(); ++p) {
    const auto& ql = q.levels[p];
    const auto& sl = s_masked.levels[p];
    if (ql.size() != sl.size())
      throw ShapeError("build_hypercorrelation: level " + std::to_string(p) + " has " + std::to_string(ql.size()) +
                       " query maps but " + std::to_string(sl.size()) + " support maps");
    Tensor first = cosine_correlation(ql[0], sl[0]);
    Shape shape{ql.size()};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    Tensor stacked(shape);
    std::copy(first.data().begin(), first.data().end(), stacked.ptr());
    for (std::size_t i = 1; i < ql.size(); ++i) {
      if (ql[i].shape() != ql[0].shape() || sl[i].shape() != sl[0].shape())
        throw ShapeError("build_hypercorrelation: level " + std::to_string(p) + " layer shapes are inconsistent");
      Tensor c = cosine_correlation(ql[i], sl[i]);
      std::copy(c.data().begin(), c.data().end(), stacked.ptr() + i * c.size());
    }
    out.push_back(std::move(stacked));
  }
  return out;
}

/// Deterministic N(0,1) features standing in for a frozen backbone.
inline FeaturePyramid synthetic_pyramid(std::uint64_t seed, const PyramidSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  FeaturePyramid fp;
  for (std::size_t p = 0; p < spec.extents.size(); ++p) {
    std::vector<Tensor> level;
    for (std::size_t i = 0; i < spec.layer_counts[p]; ++i) {
      Tensor m({spec.channels, spec.extents[p], spec.extents[p]});
      for (double& v : m.data()) v = nd(rng);
      level.push_back(std::move(m));
    }
    fp.levels.push_back(std::move(level));
  }
  return fp;
}

}  // namespace qclnet

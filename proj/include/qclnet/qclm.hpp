#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qclnet/autograd.hpp"
#include "qclnet/cam.hpp"
#include "qclnet/error.hpp"
#include "qclnet/parallel.hpp"
#include "qclnet/quaternion.hpp"
#include "qclnet/tensor.hpp"
#include "qclnet/tensor_ops.hpp"

namespace qclnet {

/// Four congruent [C,H,W] planes read elementwise as quaternions r + xi + yj + zk.
class QuatTensor {
 public:
  QuatTensor() = default;
  QuatTensor(Tensor r, Tensor x, Tensor y, Tensor z) : planes_{std::move(r), std::move(x), std::move(y), std::move(z)} {
    for (std::size_t p = 1; p < 4; ++p)
      if (planes_[p].shape() != planes_[0].shape())
        throw ShapeError("QuatTensor: plane shapes " + shape_str(planes_[0].shape()) + " and " +
                         shape_str(planes_[p].shape()) + " differ");
  }
  explicit QuatTensor(const Shape& s) : planes_{Tensor(s), Tensor(s), Tensor(s), Tensor(s)} {}

  /// Splits a [4,C,H,W] stack into planes.
  static QuatTensor from_stacked(const Tensor& s) {
    if (s.rank() != 4 || s.extent(0) != 4) throw ShapeError("QuatTensor: expected [4,C,H,W], got " + shape_str(s.shape()));
    const Shape ps{s.extent(1), s.extent(2), s.extent(3)};
    const std::size_t n = shape_numel(ps);
    QuatTensor q(ps);
    for (std::size_t p = 0; p < 4; ++p) std::copy_n(s.ptr() + p * n, n, q.planes_[p].ptr());
    return q;
  }

  Tensor stacked() const {
    const Shape& ps = shape();
    Tensor s({4, ps[0], ps[1], ps[2]});
    const std::size_t n = planes_[0].size();
    for (std::size_t p = 0; p < 4; ++p) std::copy_n(planes_[p].ptr(), n, s.ptr() + p * n);
    return s;
  }

  const Shape& shape() const { return planes_[0].shape(); }
  std::size_t channels() const { return planes_[0].extent(0); }

  Tensor& plane(std::size_t p) { return planes_.at(p); }
  const Tensor& plane(std::size_t p) const { return planes_.at(p); }
  const Tensor& r() const { return planes_[0]; }
  const Tensor& x() const { return planes_[1]; }
  const Tensor& y() const { return planes_[2]; }
  const Tensor& z() const { return planes_[3]; }

  Quaternion at(std::size_t c, std::size_t i, std::size_t j) const {
    return {planes_[0].at(c, i, j), planes_[1].at(c, i, j), planes_[2].at(c, i, j), planes_[3].at(c, i, j)};
  }

  friend bool operator==(const QuatTensor&, const QuatTensor&) = default;

 private:
  std::array<Tensor, 4> planes_;
};

inline QuatTensor operator+(const QuatTensor& a, const QuatTensor& b) {
  return {a.r() + b.r(), a.x() + b.x(), a.y() + b.y(), a.z() + b.z()};
}

/// Quaternion weights W = Wr + Wx i + Wy j + Wz k (each [out,in,kH,kW]) and a
/// per-output-channel quaternion bias (each plane [out], empty for none).
struct QuatConvParams {
  std::array<Tensor, 4> weight;
  std::array<Tensor, 4> bias;

  std::size_t out_channels() const { return weight[0].extent(0); }
  std::size_t in_channels() const { return weight[0].extent(1); }
  bool has_bias() const { return !bias[0].empty(); }

  std::size_t weight_count() const { return 4 * weight[0].size(); }
  std::size_t bias_count() const { return has_bias() ? 4 * bias[0].size() : 0; }

  Tensor stacked_weight() const {
    const Shape& s = weight[0].shape();
    Tensor w({4, s[0], s[1], s[2], s[3]});
    for (std::size_t p = 0; p < 4; ++p) std::copy_n(weight[p].ptr(), weight[p].size(), w.ptr() + p * weight[p].size());
    return w;
  }
  Tensor stacked_bias() const {
    if (!has_bias()) return Tensor({4, out_channels()});
    Tensor b({4, out_channels()});
    for (std::size_t p = 0; p < 4; ++p) std::copy_n(bias[p].ptr(), bias[p].size(), b.ptr() + p * bias[p].size());
    return b;
  }

  static QuatConvParams from_stacked(const Tensor& w, const Tensor& b) {
    QuatConvParams q;
    const Shape ws{w.extent(1), w.extent(2), w.extent(3), w.extent(4)};
    const std::size_t n = shape_numel(ws);
    for (std::size_t p = 0; p < 4; ++p) {
      q.weight[p] = Tensor(ws, std::vector<double>(w.ptr() + p * n, w.ptr() + (p + 1) * n));
      q.bias[p] = Tensor({w.extent(1)}, std::vector<double>(b.ptr() + p * w.extent(1), b.ptr() + (p + 1) * w.extent(1)));
    }
    return q;
  }

  void validate() const {
    for (std::size_t p = 1; p < 4; ++p)
      if (weight[p].shape() != weight[0].shape())
        throw ShapeError("QuatConvParams: weight planes " + shape_str(weight[0].shape()) + " and " +
                         shape_str(weight[p].shape()) + " differ");
    if (weight[0].rank() != 4) throw ShapeError("QuatConvParams: weights must be [out,in,kH,kW]");
    if (has_bias())
      for (const auto& b : bias)
        if (b.shape() != Shape{out_channels()}) throw ShapeError("QuatConvParams: bias must be [out]");
  }
};

/// Component mixing used by a quaternion-layout convolution.
enum class QuatKernel {
  hamilton,  // full Hamilton product, weights shared across components
  group,     // independent per-component convolution (no cross terms)
};

namespace detail {

struct HamiltonTerm {
  std::size_t weight;  // which of Wr, Wx, Wy, Wz
  double sign;
};

// kHamiltonTable[out][in]: contribution of input component `in` to output
// component `out`, i.e. the 4x4 block matrix acting on (q_r, q_x, q_y, q_z).
inline constexpr HamiltonTerm kHamiltonTable[4][4] = {
    {{0, +1}, {1, -1}, {2, -1}, {3, -1}},
    {{1, +1}, {0, +1}, {3, -1}, {2, +1}},
    {{2, +1}, {3, +1}, {0, +1}, {1, -1}},
    {{3, +1}, {2, -1}, {1, +1}, {0, +1}},
};

struct QuatConvDims {
  std::size_t C, H, W, O, Ho, Wo;
  ConvGeom g;
};

inline QuatConvDims quat_conv_dims(const Tensor& x, const Tensor& w, std::pair<std::size_t, std::size_t> stride,
                                   std::pair<std::size_t, std::size_t> padding) {
  if (x.rank() != 4 || x.extent(0) != 4) throw ShapeError("quat_conv2d: input must be [4,C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 5 || w.extent(0) != 4)
    throw ShapeError("quat_conv2d: weights must be [4,out,in,kH,kW], got " + shape_str(w.shape()));
  if (w.extent(2) != x.extent(1))
    throw ShapeError("quat_conv2d: input " + shape_str(x.shape()) + " does not match weights " + shape_str(w.shape()));
  if (w.extent(3) % 2 == 0 || w.extent(4) % 2 == 0) throw ShapeError("quat_conv2d: kernel extents must be odd");
  if (stride.first < 1 || stride.second < 1) throw ConfigError("quat_conv2d: stride must be >= 1");
  QuatConvDims d{};
  d.C = x.extent(1);
  d.H = x.extent(2);
  d.W = x.extent(3);
  d.O = w.extent(1);
  d.g = {w.extent(3), w.extent(4), stride.first, stride.second, padding.first, padding.second};
  d.Ho = conv_out_extent(d.H, d.g.kh, d.g.sh, d.g.ph);
  d.Wo = conv_out_extent(d.W, d.g.kw, d.g.sw, d.g.pw);
  return d;
}

// Stacked forward: x [4,C,H,W], w [4,O,C,kh,kw], b [4,O] -> [4,O,Ho,Wo].
inline Tensor quat_conv_stacked(const Tensor& x, const Tensor& w, const Tensor& b, std::pair<std::size_t, std::size_t> stride,
                                std::pair<std::size_t, std::size_t> padding, QuatKernel kind) {
  const auto d = quat_conv_dims(x, w, stride, padding);
  Tensor out({4, d.O, d.Ho, d.Wo});
  const std::size_t wn = d.O * d.C * d.g.kh * d.g.kw;
  const std::size_t in_n = d.C * d.H * d.W, out_n = d.O * d.Ho * d.Wo;
  parallel_for(
      4 * d.O,
      [&](std::size_t idx) {
        const std::size_t p = idx / d.O, o = idx % d.O;
        double* op = out.ptr() + p * out_n;
        if (!b.empty()) std::fill_n(op + o * d.Ho * d.Wo, d.Ho * d.Wo, b[p * d.O + o]);
        const auto ov = contiguous_view(op, d.O, d.Ho, d.Wo);
        for (std::size_t q = 0; q < 4; ++q) {
          if (kind == QuatKernel::group && q != p) continue;
          const HamiltonTerm t = kind == QuatKernel::group ? HamiltonTerm{p, 1.0} : kHamiltonTable[p][q];
          conv_forward(contiguous_view(x.ptr() + q * in_n, d.C, d.H, d.W), w.ptr() + t.weight * wn, d.O, d.g, ov, o,
                       o + 1, t.sign);
        }
      },
      d.C * d.Ho * d.Wo * d.g.kh * d.g.kw * 4);
  return out;
}

struct QuatConvGrads {
  Tensor input, weight, bias;
};

inline QuatConvGrads quat_conv_stacked_backward(const Tensor& gout, const Tensor& x, const Tensor& w,
                                                std::pair<std::size_t, std::size_t> stride,
                                                std::pair<std::size_t, std::size_t> padding, QuatKernel kind) {
  const auto d = quat_conv_dims(x, w, stride, padding);
  QuatConvGrads r{Tensor(x.shape()), Tensor(w.shape()), Tensor({4, d.O})};
  const std::size_t wn = d.O * d.C * d.g.kh * d.g.kw;
  const std::size_t in_n = d.C * d.H * d.W, out_n = d.O * d.Ho * d.Wo;
  auto uses = [kind](std::size_t p, std::size_t q) { return kind == QuatKernel::hamilton || p == q; };
  auto term = [kind](std::size_t p, std::size_t q) {
    return kind == QuatKernel::group ? HamiltonTerm{p, 1.0} : kHamiltonTable[p][q];
  };
  const std::size_t work = d.O * d.Ho * d.Wo * d.g.kh * d.g.kw * 4;
  // Input gradient: component q, channel c gathers from every output component.
  parallel_for(
      4 * d.C,
      [&](std::size_t idx) {
        const std::size_t q = idx / d.C, c = idx % d.C;
        const auto gin = contiguous_view(r.input.ptr() + q * in_n, d.C, d.H, d.W);
        for (std::size_t p = 0; p < 4; ++p) {
          if (!uses(p, q)) continue;
          const auto t = term(p, q);
          conv_backward_input(contiguous_view(gout.ptr() + p * out_n, d.O, d.Ho, d.Wo), w.ptr() + t.weight * wn, d.C,
                              d.g, gin, c, c + 1, t.sign);
        }
      },
      work);
  // Weight gradient: plane m, output channel o gathers from every (p, q) using it.
  parallel_for(
      4 * d.O,
      [&](std::size_t idx) {
        const std::size_t m = idx / d.O, o = idx % d.O;
        for (std::size_t p = 0; p < 4; ++p)
          for (std::size_t q = 0; q < 4; ++q) {
            if (!uses(p, q)) continue;
            const auto t = term(p, q);
            if (t.weight != m) continue;
            conv_backward_kernel(contiguous_view(gout.ptr() + p * out_n, d.O, d.Ho, d.Wo),
                                 contiguous_view(x.ptr() + q * in_n, d.C, d.H, d.W), r.weight.ptr() + m * wn, d.g, o,
                                 o + 1, t.sign);
          }
      },
      work);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t o = 0; o < d.O; ++o) {
      double s = 0.0;
      const double* gp = gout.ptr() + p * out_n + o * d.Ho * d.Wo;
      for (std::size_t k = 0; k < d.Ho * d.Wo; ++k) s += gp[k];
      r.bias[p * d.O + o] = s;
    }
  return r;
}

}  // namespace detail

/// Quaternion-valued 2D convolution: every output component is the Hamilton
/// product expansion of W (x) q, each term a real conv2d, plus the bias plane.
inline QuatTensor quat_conv2d(const QuatTensor& q, const QuatConvParams& params,
                              std::pair<std::size_t, std::size_t> stride = {1, 1},
                              std::pair<std::size_t, std::size_t> padding = {0, 0}) {
  params.validate();
  return QuatTensor::from_stacked(detail::quat_conv_stacked(q.stacked(), params.stacked_weight(), params.stacked_bias(),
                                                            stride, padding, QuatKernel::hamilton));
}

/// Component-independent convolution: out_d = W_d * q_d, no cross terms.
inline QuatTensor group_conv2d_ablation(const QuatTensor& q, const QuatConvParams& params,
                                        std::pair<std::size_t, std::size_t> stride = {1, 1},
                                        std::pair<std::size_t, std::size_t> padding = {0, 0}) {
  params.validate();
  return QuatTensor::from_stacked(detail::quat_conv_stacked(q.stacked(), params.stacked_weight(), params.stacked_bias(),
                                                            stride, padding, QuatKernel::group));
}

/// gamma: one real scale per channel group; beta: one quaternion per group,
/// stored [4, groups] (component-major).
struct QuatNormParams {
  Tensor gamma;
  Tensor beta;
  std::size_t groups = kDefaultGroups;
  double eps = kDefaultEps;

  static QuatNormParams identity(std::size_t groups = kDefaultGroups, double eps = kDefaultEps) {
    return {Tensor({groups}, 1.0), Tensor({4, groups}), groups, eps};
  }
};

struct QuatNormStats {
  std::vector<double> mean;  // [groups * 4], group-major
  std::vector<double> rstd;  // [groups]
};

namespace detail {

inline void quat_norm_check(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t G) {
  if (x.rank() < 2 || x.extent(0) != 4) throw ShapeError("quat_norm: input must be [4,C,...], got " + shape_str(x.shape()));
  const std::size_t C = x.extent(1);
  if (G == 0 || C % G != 0)
    throw ConfigError("quat_norm: channel count " + std::to_string(C) + " is not divisible by groups " + std::to_string(G));
  if (gamma.shape() != Shape{G} || beta.shape() != Shape{4, G})
    throw ShapeError("quat_norm: gamma must be [" + std::to_string(G) + "] and beta [4," + std::to_string(G) + "]");
}

// x [4,C,...]: per group a quaternion mean and one real variance shared by all
// four components (the mean of the component variances).
inline Tensor quat_norm_stacked(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t G, double eps,
                                QuatNormStats* stats) {
  quat_norm_check(x, gamma, beta, G);
  const std::size_t C = x.extent(1), inner = x.size() / (4 * C), plane = C * inner;
  const std::size_t n = (C / G) * inner;
  Tensor out(x.shape());
  QuatNormStats st{std::vector<double>(G * 4), std::vector<double>(G)};
  for (std::size_t g = 0; g < G; ++g) {
    double var = 0.0;
    for (std::size_t p = 0; p < 4; ++p) {
      const double* xp = x.ptr() + p * plane + g * n;
      double mean = 0.0;
      for (std::size_t k = 0; k < n; ++k) mean += xp[k];
      mean /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t k = 0; k < n; ++k) v += (xp[k] - mean) * (xp[k] - mean);
      var += v / static_cast<double>(n);
      st.mean[g * 4 + p] = mean;
    }
    var /= 4.0;
    const double rstd = 1.0 / std::sqrt(var + eps);
    st.rstd[g] = rstd;
    for (std::size_t p = 0; p < 4; ++p) {
      const double* xp = x.ptr() + p * plane + g * n;
      double* yp = out.ptr() + p * plane + g * n;
      const double mean = st.mean[g * 4 + p], b = beta[p * G + g];
      for (std::size_t k = 0; k < n; ++k) yp[k] = (xp[k] - mean) * rstd * gamma[g] + b;
    }
  }
  if (stats) *stats = std::move(st);
  return out;
}

struct QuatNormGrads {
  Tensor input, gamma, beta;
};

inline QuatNormGrads quat_norm_stacked_backward(const Tensor& gout, const Tensor& x, const Tensor& gamma, std::size_t G,
                                                const QuatNormStats& st) {
  const std::size_t C = x.extent(1), inner = x.size() / (4 * C), plane = C * inner;
  const std::size_t n = (C / G) * inner;
  QuatNormGrads r{Tensor(x.shape()), Tensor({G}), Tensor({4, G})};
  for (std::size_t g = 0; g < G; ++g) {
    const double rstd = st.rstd[g], gm = gamma[g];
    double dot_all = 0.0;  // sum over all components of dxhat * xhat
    std::array<double, 4> mean_dxh{};
    double ggamma = 0.0;
    for (std::size_t p = 0; p < 4; ++p) {
      const double* xp = x.ptr() + p * plane + g * n;
      const double* gp = gout.ptr() + p * plane + g * n;
      const double mean = st.mean[g * 4 + p];
      double sdy = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double xh = (xp[k] - mean) * rstd;
        sdy += gp[k];
        ggamma += gp[k] * xh;
        dot_all += gp[k] * gm * xh;
      }
      r.beta[p * G + g] = sdy;
      mean_dxh[p] = sdy * gm / static_cast<double>(n);
    }
    r.gamma[g] = ggamma;
    const double m2 = dot_all / (4.0 * static_cast<double>(n));
    for (std::size_t p = 0; p < 4; ++p) {
      const double* xp = x.ptr() + p * plane + g * n;
      const double* gp = gout.ptr() + p * plane + g * n;
      double* dx = r.input.ptr() + p * plane + g * n;
      const double mean = st.mean[g * 4 + p];
      for (std::size_t k = 0; k < n; ++k) {
        const double xh = (xp[k] - mean) * rstd;
        dx[k] = rstd * (gp[k] * gm - mean_dxh[p] - xh * m2);
      }
    }
  }
  return r;
}

}  // namespace detail

/// Quaternion normalization: ((q - mu_q) / sqrt(sigma^2 + eps)) * gamma + beta,
/// where mu_q is the per-group quaternion mean and sigma^2 the average of the
/// four component variances (biased).
inline QuatTensor quat_norm(const QuatTensor& q, const QuatNormParams& params) {
  return QuatTensor::from_stacked(
      detail::quat_norm_stacked(q.stacked(), params.gamma, params.beta, params.groups, params.eps, nullptr));
}

using Matrix4 = std::array<std::array<double, 4>, 4>;

/// Sample covariance (1/(n-1)) of the (r, x, y, z) component vectors.
inline Matrix4 augmented_covariance(std::span<const Quaternion> sample) {
  if (sample.size() < 2) throw ValidationError("augmented_covariance: need at least 2 samples");
  std::array<double, 4> mean{};
  auto comps = [](const Quaternion& q) { return std::array<double, 4>{q.r(), q.x(), q.y(), q.z()}; };
  for (const auto& q : sample) {
    const auto c = comps(q);
    for (std::size_t a = 0; a < 4; ++a) mean[a] += c[a];
  }
  for (double& m : mean) m /= static_cast<double>(sample.size());
  Matrix4 cov{};
  for (const auto& q : sample) {
    const auto c = comps(q);
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b) cov[a][b] += (c[a] - mean[a]) * (c[b] - mean[b]);
  }
  for (auto& row : cov)
    for (double& v : row) v /= static_cast<double>(sample.size() - 1);
  return cov;
}

inline QuatTensor quat_relu(const QuatTensor& q) { return {relu(q.r()), relu(q.x()), relu(q.y()), relu(q.z())}; }

/// quat_conv2d (stride 1, same padding) -> quat_norm -> split ReLU.
inline QuatTensor qcl_block(const QuatTensor& q, const QuatConvParams& conv, const QuatNormParams& norm) {
  const std::size_t ph = conv.weight[0].extent(2) / 2, pw = conv.weight[0].extent(3) / 2;
  return quat_relu(quat_norm(quat_conv2d(q, conv, {1, 1}, {ph, pw}), norm));
}

namespace detail {
// Target extent check for a coarse-to-fine merge: up(deep) must cover fine
// exactly or with one trailing row/column to crop.
inline void check_merge_extents(std::size_t deep_h, std::size_t deep_w, std::size_t fine_h, std::size_t fine_w) {
  auto ok = [](std::size_t d, std::size_t f) { return 2 * d == f || 2 * d == f + 1; };
  if (!ok(deep_h, fine_h) || !ok(deep_w, fine_w))
    throw ShapeError("quat_aggregation: deep extent " + std::to_string(deep_h) + "x" + std::to_string(deep_w) +
                     " cannot be upsampled onto fine extent " + std::to_string(fine_h) + "x" + std::to_string(fine_w));
}
}  // namespace detail

/// Coarse-to-fine merge: qcl_block(fine + up2x(deep)), cropping the upsampled
/// map when the fine extent is odd.
inline QuatTensor quat_aggregation(const QuatTensor& deep, const QuatTensor& fine, const QuatConvParams& conv,
                                   const QuatNormParams& norm) {
  const auto& ds = deep.shape();
  const auto& fs = fine.shape();
  if (ds[0] != fs[0]) throw ShapeError("quat_aggregation: channel mismatch " + shape_str(ds) + " vs " + shape_str(fs));
  detail::check_merge_extents(ds[1], ds[2], fs[1], fs[2]);
  QuatTensor up;
  for (std::size_t p = 0; p < 4; ++p) up.plane(p) = crop(upsample2x(deep.plane(p)), fs[1], fs[2]);
  return qcl_block(fine + up, conv, norm);
}

/// Routes the 2x2 support slices of an aggregated correlation to the quaternion
/// components in raster order: (0,0)->r, (0,1)->x, (1,0)->y, (1,1)->z.
inline QuatTensor encapsulate(const AggregatedCorrelation& agg) {
  const Tensor& t = agg.data;
  if (t.rank() != 5 || t.extent(2) != 2 || t.extent(3) != 2)
    throw ShapeError("encapsulate: support extent must be 2x2, got " + shape_str(t.shape()));
  const std::size_t H = t.extent(0), W = t.extent(1), D = t.extent(4);
  QuatTensor q(Shape{D, H, W});
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) q.plane(p).at(d, i, j) = t.at(i, j, p / 2, p % 2, d);
  return q;
}

/// Inverse of encapsulate.
inline AggregatedCorrelation decapsulate(const QuatTensor& q) {
  const std::size_t D = q.shape()[0], H = q.shape()[1], W = q.shape()[2];
  Tensor t({H, W, 2, 2, D});
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) t.at(i, j, p / 2, p % 2, d) = q.plane(p).at(d, i, j);
  return {std::move(t)};
}

/// Polar quaternion initialization: magnitude ~ U(-s, s) with
/// s = 1/sqrt(2 (in + out) kH kW), a uniformly random unit imaginary axis and a
/// phase ~ U(-pi, pi). Returns stacked weights [4, out, in, kH, kW].
inline Tensor quaternion_init(std::mt19937_64& rng, std::size_t out, std::size_t in, std::size_t kh, std::size_t kw) {
  const double s = 1.0 / std::sqrt(2.0 * static_cast<double>((in + out) * kh * kw));
  std::uniform_real_distribution<double> mag(-s, s), phase(-std::numbers::pi, std::numbers::pi);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor w({4, out, in, kh, kw});
  const std::size_t n = out * in * kh * kw;
  for (std::size_t k = 0; k < n; ++k) {
    double ax = nd(rng), ay = nd(rng), az = nd(rng);
    double an = std::sqrt(ax * ax + ay * ay + az * az);
    if (an < 1e-12) {
      ax = 1.0;
      ay = az = 0.0;
      an = 1.0;
    }
    const double m = mag(rng), th = phase(rng);
    w[k] = m * std::cos(th);
    w[n + k] = m * std::sin(th) * ax / an;
    w[2 * n + k] = m * std::sin(th) * ay / an;
    w[3 * n + k] = m * std::sin(th) * az / an;
  }
  return w;
}

/// Real weight scalars of a quaternion layer with `out`/`in` quaternion channels.
inline std::size_t quaternion_weight_count(std::size_t out, std::size_t in, std::size_t k) { return 4 * out * in * k * k; }
/// Real layer with the same real channel capacity (4 out, 4 in).
inline std::size_t real_replacement_weight_count(std::size_t out, std::size_t in, std::size_t k) {
  return (4 * out) * (4 * in) * k * k;
}

namespace ad {

/// [D,Hq,Wq,2,2] channel-first aggregation -> stacked quaternion [4,D,Hq,Wq].
inline Var encapsulate(const Var& agg) {
  Tape& t = *agg.tape();
  const Tensor& a = agg.value();
  if (a.rank() != 5 || a.extent(3) != 2 || a.extent(4) != 2)
    throw ShapeError("encapsulate: support extent must be 2x2, got " + shape_str(a.shape()));
  const std::size_t D = a.extent(0), HW = a.extent(1) * a.extent(2);
  Tensor q({4, D, a.extent(1), a.extent(2)});
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t k = 0; k < HW; ++k)
      for (std::size_t p = 0; p < 4; ++p) q[(p * D + d) * HW + k] = a[(d * HW + k) * 4 + p];
  return t.record(std::move(q), {agg}, [agg, D, HW](Tape& tp, const Tensor& g) {
    Tensor ga(agg.value().shape());
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t k = 0; k < HW; ++k)
        for (std::size_t p = 0; p < 4; ++p) ga[(d * HW + k) * 4 + p] = g[(p * D + d) * HW + k];
    tp.accumulate(agg, ga);
  });
}

/// Quaternion-layout convolution over stacked [4,C,H,W]; bias may be a null Var.
inline Var quat_conv2d(const Var& x, const Var& w, const Var& b, std::pair<std::size_t, std::size_t> stride,
                       std::pair<std::size_t, std::size_t> padding, QuatKernel kind = QuatKernel::hamilton) {
  Tape& t = *x.tape();
  const bool has_bias = b.tape() != nullptr;
  Tensor out = detail::quat_conv_stacked(x.value(), w.value(), has_bias ? b.value() : Tensor(), stride, padding, kind);
  std::vector<Var> ops{x, w};
  if (has_bias) ops.push_back(b);
  return t.record(std::move(out), ops, [x, w, b, has_bias, stride, padding, kind](Tape& tp, const Tensor& g) {
    auto r = detail::quat_conv_stacked_backward(g, x.value(), w.value(), stride, padding, kind);
    tp.accumulate(x, r.input);
    tp.accumulate(w, r.weight);
    if (has_bias) tp.accumulate(b, r.bias);
  });
}

inline Var quat_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, double eps = kDefaultEps) {
  Tape& t = *x.tape();
  auto st = std::make_shared<QuatNormStats>();
  Tensor out = detail::quat_norm_stacked(x.value(), gamma.value(), beta.value(), groups, eps, st.get());
  return t.record(std::move(out), {x, gamma, beta}, [x, gamma, beta, groups, st](Tape& tp, const Tensor& g) {
    auto r = detail::quat_norm_stacked_backward(g, x.value(), gamma.value(), groups, *st);
    tp.accumulate(x, r.input);
    tp.accumulate(gamma, r.gamma);
    tp.accumulate(beta, r.beta);
  });
}

/// Plane-wise bilinear x2 upsample of a stacked quaternion, cropped to (h, w).
inline Var quat_upsample_to(const Var& x, std::size_t h, std::size_t w) {
  const Shape& s = x.value().shape();
  Var flat = reshape(x, {4 * s[1], s[2], s[3]});
  Var up = upsample2x(flat);
  if (up.value().extent(1) != h || up.value().extent(2) != w) up = crop(up, h, w);
  return reshape(up, {4, s[1], h, w});
}

}  // namespace ad

}  // namespace qclnet

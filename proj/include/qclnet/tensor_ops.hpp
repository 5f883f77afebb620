#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "qclnet/error.hpp"
#include "qclnet/parallel.hpp"
#include "qclnet/tensor.hpp"

namespace qclnet {

inline constexpr double kDefaultEps = 1e-5;

struct Conv2dParams {
  Tensor kernel;  // [out_ch, in_ch, kH, kW]
  Tensor bias;    // [out_ch], or empty for no bias
  std::pair<std::size_t, std::size_t> stride{1, 1};
  std::pair<std::size_t, std::size_t> padding{0, 0};

  std::size_t out_channels() const { return kernel.extent(0); }
  std::size_t in_channels() const { return kernel.extent(1); }

  void validate() const {
    if (kernel.rank() != 4) throw ShapeError("Conv2dParams: kernel must be rank 4, got " + shape_str(kernel.shape()));
    if (kernel.extent(2) % 2 == 0 || kernel.extent(3) % 2 == 0)
      throw ConfigError("Conv2dParams: kernel extents must be odd, got " + shape_str(kernel.shape()));
    if (stride.first < 1 || stride.second < 1) throw ConfigError("Conv2dParams: stride must be >= 1");
    if (!bias.empty() && bias.shape() != Shape{kernel.extent(0)})
      throw ShapeError("Conv2dParams: bias " + shape_str(bias.shape()) + " does not match out_ch " +
                       std::to_string(kernel.extent(0)));
  }
};

namespace detail {

// Strided view of C planes of H x W: element (c, i, j) lives at
// p[c * chan_stride + (i * W + j) * pix_stride]. Lets the same kernels run on
// contiguous images and on 2D slices of 4D correlation tensors.
template <class T>
struct PlaneView {
  T* p;
  std::size_t C, H, W;
  std::size_t chan_stride, pix_stride;

  T& operator()(std::size_t c, std::size_t i, std::size_t j) const {
    return p[c * chan_stride + (i * W + j) * pix_stride];
  }
};

template <class T>
PlaneView<T> contiguous_view(T* p, std::size_t C, std::size_t H, std::size_t W) {
  return {p, C, H, W, H * W, 1};
}

struct ConvGeom {
  std::size_t kh, kw, sh, sw, ph, pw;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (in + 2 * p < k) throw ShapeError("conv: kernel extent " + std::to_string(k) + " exceeds padded input " +
                                       std::to_string(in + 2 * p));
  return (in + 2 * p - k) / s + 1;
}

// Output positions t in [lo, hi) whose source t*s + a - p lies inside [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t a,
                                                       std::size_t s, std::size_t p) {
  const long la = static_cast<long>(a), lp = static_cast<long>(p), ls = static_cast<long>(s);
  long lo = 0;
  if (lp > la) lo = (lp - la + ls - 1) / ls;
  const long top = static_cast<long>(in) - 1 + lp - la;
  if (top < 0) return {0, 0};
  long hi = top / ls + 1;
  hi = std::min<long>(hi, static_cast<long>(out));
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// out[o] += sum_c K[o, c] * in[c] for o in [o_lo, o_hi). K is [O, C, kh, kw].
inline void conv_forward(PlaneView<const double> in, const double* K, std::size_t O, const ConvGeom& g,
                         PlaneView<double> out, std::size_t o_lo, std::size_t o_hi, double sign = 1.0) {
  (void)O;
  const std::size_t C = in.C;
  for (std::size_t o = o_lo; o < o_hi; ++o)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t a = 0; a < g.kh; ++a) {
        const auto [ilo, ihi] = valid_range(out.H, in.H, a, g.sh, g.ph);
        for (std::size_t b = 0; b < g.kw; ++b) {
          const double w = sign * K[((o * C + c) * g.kh + a) * g.kw + b];
          if (w == 0.0) continue;
          const auto [jlo, jhi] = valid_range(out.W, in.W, b, g.sw, g.pw);
          for (std::size_t i = ilo; i < ihi; ++i) {
            const std::size_t si = i * g.sh + a - g.ph;
            for (std::size_t j = jlo; j < jhi; ++j) out(o, i, j) += w * in(c, si, j * g.sw + b - g.pw);
          }
        }
      }
}

// gin[c] += sum_o K[o, c]^T gout[o] for c in [c_lo, c_hi).
inline void conv_backward_input(PlaneView<const double> gout, const double* K, std::size_t C, const ConvGeom& g,
                                PlaneView<double> gin, std::size_t c_lo, std::size_t c_hi, double sign = 1.0) {
  const std::size_t O = gout.C;
  for (std::size_t c = c_lo; c < c_hi; ++c)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t a = 0; a < g.kh; ++a) {
        const auto [ilo, ihi] = valid_range(gout.H, gin.H, a, g.sh, g.ph);
        for (std::size_t b = 0; b < g.kw; ++b) {
          const double w = sign * K[((o * C + c) * g.kh + a) * g.kw + b];
          if (w == 0.0) continue;
          const auto [jlo, jhi] = valid_range(gout.W, gin.W, b, g.sw, g.pw);
          for (std::size_t i = ilo; i < ihi; ++i) {
            const std::size_t si = i * g.sh + a - g.ph;
            for (std::size_t j = jlo; j < jhi; ++j) gin(c, si, j * g.sw + b - g.pw) += w * gout(o, i, j);
          }
        }
      }
}

// gK[o, c] += gout[o] (x) in[c] for o in [o_lo, o_hi).
inline void conv_backward_kernel(PlaneView<const double> gout, PlaneView<const double> in, double* gK,
                                 const ConvGeom& g, std::size_t o_lo, std::size_t o_hi, double sign = 1.0) {
  const std::size_t C = in.C;
  for (std::size_t o = o_lo; o < o_hi; ++o)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t a = 0; a < g.kh; ++a) {
        const auto [ilo, ihi] = valid_range(gout.H, in.H, a, g.sh, g.ph);
        for (std::size_t b = 0; b < g.kw; ++b) {
          const auto [jlo, jhi] = valid_range(gout.W, in.W, b, g.sw, g.pw);
          double acc = 0.0;
          for (std::size_t i = ilo; i < ihi; ++i) {
            const std::size_t si = i * g.sh + a - g.ph;
            for (std::size_t j = jlo; j < jhi; ++j) acc += gout(o, i, j) * in(c, si, j * g.sw + b - g.pw);
          }
          gK[((o * C + c) * g.kh + a) * g.kw + b] += sign * acc;
        }
      }
}

inline ConvGeom geom_of(const Conv2dParams& p) {
  return {p.kernel.extent(2), p.kernel.extent(3), p.stride.first, p.stride.second, p.padding.first,
          p.padding.second};
}

}  // namespace detail

/// 2D cross-correlation (no kernel flip) of a [C,H,W] input plus bias.
inline Tensor conv2d(const Tensor& input, const Conv2dParams& params) {
  params.validate();
  if (input.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (input.extent(0) != params.in_channels())
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " does not match kernel " +
                     shape_str(params.kernel.shape()));
  const auto g = detail::geom_of(params);
  const std::size_t C = input.extent(0), H = input.extent(1), W = input.extent(2);
  const std::size_t O = params.out_channels();
  const std::size_t Ho = detail::conv_out_extent(H, g.kh, g.sh, g.ph);
  const std::size_t Wo = detail::conv_out_extent(W, g.kw, g.sw, g.pw);
  Tensor out({O, Ho, Wo});
  if (!params.bias.empty())
    for (std::size_t o = 0; o < O; ++o) std::fill_n(out.ptr() + o * Ho * Wo, Ho * Wo, params.bias[o]);
  const auto in = detail::contiguous_view(input.ptr(), C, H, W);
  const auto ov = detail::contiguous_view(out.ptr(), O, Ho, Wo);
  parallel_for(
      O, [&](std::size_t o) { detail::conv_forward(in, params.kernel.ptr(), O, g, ov, o, o + 1); },
      C * Ho * Wo * g.kh * g.kw);
  return out;
}

struct Conv2dGrads {
  Tensor input, kernel, bias;
};

/// Reverse-mode adjoint of conv2d for an upstream gradient shaped like its output.
inline Conv2dGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const Conv2dParams& params) {
  const auto g = detail::geom_of(params);
  const std::size_t C = input.extent(0), H = input.extent(1), W = input.extent(2);
  const std::size_t O = grad_out.extent(0), Ho = grad_out.extent(1), Wo = grad_out.extent(2);
  Conv2dGrads r{Tensor(input.shape()), Tensor(params.kernel.shape()), Tensor({O})};
  const auto gv = detail::contiguous_view(grad_out.ptr(), O, Ho, Wo);
  const auto in = detail::contiguous_view(input.ptr(), C, H, W);
  const auto giv = detail::contiguous_view(r.input.ptr(), C, H, W);
  const std::size_t work = O * Ho * Wo * g.kh * g.kw;
  parallel_for(
      C, [&](std::size_t c) { detail::conv_backward_input(gv, params.kernel.ptr(), C, g, giv, c, c + 1); }, work);
  parallel_for(
      O, [&](std::size_t o) { detail::conv_backward_kernel(gv, in, r.kernel.ptr(), g, o, o + 1); }, work);
  for (std::size_t o = 0; o < O; ++o) {
    double s = 0.0;
    for (std::size_t k = 0; k < Ho * Wo; ++k) s += grad_out[o * Ho * Wo + k];
    r.bias[o] = s;
  }
  return r;
}

/// Unfactored 4D convolution over (query, support) coordinates. Naive loops;
/// used as a reference for the separable form.
///
/// input [C,Hq,Wq,Hs,Ws], kernel [O,C,kq,kq,ks,ks].
inline Tensor conv4d(const Tensor& input, const Tensor& kernel, std::size_t stride_q = 1, std::size_t stride_s = 1,
                     std::size_t pad_q = 0, std::size_t pad_s = 0) {
  if (input.rank() != 5 || kernel.rank() != 6)
    throw ShapeError("conv4d: expected input rank 5 and kernel rank 6, got " + shape_str(input.shape()) + " and " +
                     shape_str(kernel.shape()));
  if (kernel.extent(1) != input.extent(0))
    throw ShapeError("conv4d: input " + shape_str(input.shape()) + " does not match kernel " +
                     shape_str(kernel.shape()));
  for (std::size_t a = 2; a < 6; ++a)
    if (kernel.extent(a) % 2 == 0) throw ShapeError("conv4d: kernel extents must be odd, got " + shape_str(kernel.shape()));
  const std::size_t C = input.extent(0), Hq = input.extent(1), Wq = input.extent(2), Hs = input.extent(3),
                    Ws = input.extent(4);
  const std::size_t O = kernel.extent(0), k0 = kernel.extent(2), k1 = kernel.extent(3), k2 = kernel.extent(4),
                    k3 = kernel.extent(5);
  const std::size_t Hqo = detail::conv_out_extent(Hq, k0, stride_q, pad_q);
  const std::size_t Wqo = detail::conv_out_extent(Wq, k1, stride_q, pad_q);
  const std::size_t Hso = detail::conv_out_extent(Hs, k2, stride_s, pad_s);
  const std::size_t Wso = detail::conv_out_extent(Ws, k3, stride_s, pad_s);
  Tensor out({O, Hqo, Wqo, Hso, Wso});
  auto src = [](std::size_t t, std::size_t a, std::size_t s, std::size_t p, std::size_t n, long& v) {
    v = static_cast<long>(t * s + a) - static_cast<long>(p);
    return v >= 0 && v < static_cast<long>(n);
  };
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Hqo; ++i)
      for (std::size_t j = 0; j < Wqo; ++j)
        for (std::size_t m = 0; m < Hso; ++m)
          for (std::size_t n = 0; n < Wso; ++n) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t a = 0; a < k0; ++a)
                for (std::size_t b = 0; b < k1; ++b)
                  for (std::size_t d = 0; d < k2; ++d)
                    for (std::size_t e = 0; e < k3; ++e) {
                      long ii, jj, mm, nn;
                      if (!src(i, a, stride_q, pad_q, Hq, ii) || !src(j, b, stride_q, pad_q, Wq, jj) ||
                          !src(m, d, stride_s, pad_s, Hs, mm) || !src(n, e, stride_s, pad_s, Ws, nn))
                        continue;
                      acc += kernel.at(o, c, a, b, d, e) * input.at(c, ii, jj, mm, nn);
                    }
            out.at(o, i, j, m, n) = acc;
          }
  return out;
}

inline Tensor relu(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data()) v = std::max(0.0, v);
  return out;
}

struct GroupNormStats {
  std::vector<double> mean, rstd;  // per group
};

/// Group normalization of a [C, ...] tensor with biased per-group variance.
inline Tensor group_norm(const Tensor& t, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                         double eps = kDefaultEps, GroupNormStats* stats = nullptr) {
  if (t.rank() < 1) throw ShapeError("group_norm: input must have a channel axis");
  const std::size_t C = t.extent(0);
  if (groups == 0 || C % groups != 0)
    throw ConfigError("group_norm: channel count " + std::to_string(C) + " is not divisible by groups " +
                      std::to_string(groups));
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw ShapeError("group_norm: gamma/beta must be [" + std::to_string(C) + "]");
  const std::size_t inner = t.size() / C;
  const std::size_t cpg = C / groups;
  const std::size_t n = cpg * inner;
  Tensor out(t.shape());
  GroupNormStats st{std::vector<double>(groups), std::vector<double>(groups)};
  for (std::size_t g = 0; g < groups; ++g) {
    const double* x = t.ptr() + g * n;
    double mean = 0.0;
    for (std::size_t k = 0; k < n; ++k) mean += x[k];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t k = 0; k < n; ++k) var += (x[k] - mean) * (x[k] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    st.mean[g] = mean;
    st.rstd[g] = rstd;
    for (std::size_t c = g * cpg; c < (g + 1) * cpg; ++c) {
      const double* xc = t.ptr() + c * inner;
      double* yc = out.ptr() + c * inner;
      for (std::size_t k = 0; k < inner; ++k) yc[k] = (xc[k] - mean) * rstd * gamma[c] + beta[c];
    }
  }
  if (stats) *stats = std::move(st);
  return out;
}

struct GroupNormGrads {
  Tensor input, gamma, beta;
};

inline GroupNormGrads group_norm_backward(const Tensor& grad_out, const Tensor& t, std::size_t groups,
                                          const Tensor& gamma, const GroupNormStats& st) {
  const std::size_t C = t.extent(0);
  const std::size_t inner = t.size() / C;
  const std::size_t cpg = C / groups;
  const std::size_t n = cpg * inner;
  GroupNormGrads r{Tensor(t.shape()), Tensor({C}), Tensor({C})};
  for (std::size_t g = 0; g < groups; ++g) {
    const double mean = st.mean[g], rstd = st.rstd[g];
    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
    for (std::size_t c = g * cpg; c < (g + 1) * cpg; ++c) {
      double gg = 0.0, gb = 0.0;
      for (std::size_t k = 0; k < inner; ++k) {
        const std::size_t idx = c * inner + k;
        const double xh = (t[idx] - mean) * rstd;
        const double dy = grad_out[idx];
        gg += dy * xh;
        gb += dy;
        sum_dxh += dy * gamma[c];
        sum_dxh_xh += dy * gamma[c] * xh;
      }
      r.gamma[c] = gg;
      r.beta[c] = gb;
    }
    const double m1 = sum_dxh / static_cast<double>(n), m2 = sum_dxh_xh / static_cast<double>(n);
    for (std::size_t c = g * cpg; c < (g + 1) * cpg; ++c)
      for (std::size_t k = 0; k < inner; ++k) {
        const std::size_t idx = c * inner + k;
        const double xh = (t[idx] - mean) * rstd;
        r.input[idx] = rstd * (grad_out[idx] * gamma[c] - m1 - xh * m2);
      }
  }
  return r;
}

/// [C,H,W] -> [C], per-channel spatial mean.
inline Tensor global_avg_pool(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("global_avg_pool: expected [C,H,W], got " + shape_str(t.shape()));
  const std::size_t C = t.extent(0), hw = t.extent(1) * t.extent(2);
  Tensor out({C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += t[c * hw + k];
    out[c] = s / static_cast<double>(hw);
  }
  return out;
}

namespace detail {

struct Lerp {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel source coordinates (corner alignment off), clamped at the low edge.
inline std::vector<Lerp> lerp_table(std::size_t in, std::size_t out) {
  std::vector<Lerp> tab(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    tab[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return tab;
}

}  // namespace detail

/// Bilinear resize of a [C,H,W] tensor with half-pixel sampling.
inline Tensor resize_bilinear(const Tensor& t, std::size_t out_h, std::size_t out_w) {
  if (t.rank() != 3) throw ShapeError("resize_bilinear: expected [C,H,W], got " + shape_str(t.shape()));
  const std::size_t C = t.extent(0), H = t.extent(1), W = t.extent(2);
  const auto ty = detail::lerp_table(H, out_h), tx = detail::lerp_table(W, out_w);
  Tensor out({C, out_h, out_w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& ly = ty[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& lx = tx[j];
        const double top = (1 - lx.w1) * t.at(c, ly.i0, lx.i0) + lx.w1 * t.at(c, ly.i0, lx.i1);
        const double bot = (1 - lx.w1) * t.at(c, ly.i1, lx.i0) + lx.w1 * t.at(c, ly.i1, lx.i1);
        out.at(c, i, j) = (1 - ly.w1) * top + ly.w1 * bot;
      }
    }
  return out;
}

/// Adjoint of resize_bilinear: scatters an output-shaped gradient back to [C,H,W].
inline Tensor resize_bilinear_backward(const Tensor& grad_out, std::size_t in_h, std::size_t in_w) {
  const std::size_t C = grad_out.extent(0), oh = grad_out.extent(1), ow = grad_out.extent(2);
  const auto ty = detail::lerp_table(in_h, oh), tx = detail::lerp_table(in_w, ow);
  Tensor g({C, in_h, in_w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < oh; ++i) {
      const auto& ly = ty[i];
      for (std::size_t j = 0; j < ow; ++j) {
        const auto& lx = tx[j];
        const double v = grad_out.at(c, i, j);
        g.at(c, ly.i0, lx.i0) += (1 - ly.w1) * (1 - lx.w1) * v;
        g.at(c, ly.i0, lx.i1) += (1 - ly.w1) * lx.w1 * v;
        g.at(c, ly.i1, lx.i0) += ly.w1 * (1 - lx.w1) * v;
        g.at(c, ly.i1, lx.i1) += ly.w1 * lx.w1 * v;
      }
    }
  return g;
}

inline Tensor upsample2x(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("upsample2x: expected [C,H,W], got " + shape_str(t.shape()));
  return resize_bilinear(t, 2 * t.extent(1), 2 * t.extent(2));
}

namespace detail {
// Splits shape around `axis` into (outer, n, inner) extents.
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  n = s[axis];
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
}
}  // namespace detail

/// Max-stabilized softmax along `axis`.
inline Tensor softmax(const Tensor& v, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_split(v.shape(), axis, outer, n, inner);
  Tensor out(v.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = v[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, v[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(v[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= s;
    }
  return out;
}

/// Given y = softmax(x, axis) and dL/dy, returns dL/dx.
inline Tensor softmax_backward(const Tensor& y, const Tensor& grad_out, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_split(y.shape(), axis, outer, n, inner);
  Tensor g(y.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double dot = 0.0;
      for (std::size_t k = 0; k < n; ++k) dot += y[base + k * inner] * grad_out[base + k * inner];
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = base + k * inner;
        g[idx] = y[idx] * (grad_out[idx] - dot);
      }
    }
  return g;
}

/// Concatenates [Ci,H,W] tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  const std::size_t H = parts[0].extent(1), W = parts[0].extent(2);
  std::size_t C = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.extent(1) != H || p.extent(2) != W)
      throw ShapeError("concat_channels: " + shape_str(p.shape()) + " does not match spatial extent " +
                       std::to_string(H) + "x" + std::to_string(W));
    C += p.extent(0);
  }
  Tensor out({C, H, W});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.ptr() + off);
    off += p.size();
  }
  return out;
}

/// Keeps the leading out_h x out_w window of a [C,H,W] tensor.
inline Tensor crop(const Tensor& t, std::size_t out_h, std::size_t out_w) {
  const std::size_t C = t.extent(0), H = t.extent(1), W = t.extent(2);
  if (out_h > H || out_w > W) throw ShapeError("crop: target larger than " + shape_str(t.shape()));
  Tensor out({C, out_h, out_w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < out_h; ++i)
      std::copy_n(t.ptr() + (c * H + i) * W, out_w, out.ptr() + (c * out_h + i) * out_w);
  return out;
}

}  // namespace qclnet

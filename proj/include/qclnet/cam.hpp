#pragma once

#include <algorithm>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "qclnet/autograd.hpp"
#include "qclnet/error.hpp"
#include "qclnet/parallel.hpp"
#include "qclnet/tensor.hpp"
#include "qclnet/tensor_ops.hpp"

namespace qclnet {

/// 4D kernel factored into a query-subspace and a support-subspace 2D kernel.
struct SeparableKernel4d {
  Tensor k_query;    // [out, in, kq, kq]
  Tensor k_support;  // [out, out, ks, ks]
  std::size_t stride_q = 1, stride_s = 1;
  std::size_t pad_q = 0, pad_s = 0;

  void validate() const {
    if (k_query.rank() != 4 || k_support.rank() != 4)
      throw ShapeError("SeparableKernel4d: kernels must be rank 4, got " + shape_str(k_query.shape()) + " and " +
                       shape_str(k_support.shape()));
    const std::size_t out = k_query.extent(0);
    if (k_support.extent(0) != out || k_support.extent(1) != out)
      throw ShapeError("SeparableKernel4d: support kernel " + shape_str(k_support.shape()) + " must be [" +
                       std::to_string(out) + "," + std::to_string(out) + ",ks,ks]");
    for (std::size_t a = 2; a < 4; ++a)
      if (k_query.extent(a) % 2 == 0 || k_support.extent(a) % 2 == 0)
        throw ShapeError("SeparableKernel4d: kernel extents must be odd");
    if (stride_q < 1 || stride_s < 1) throw ConfigError("SeparableKernel4d: strides must be >= 1");
  }
};

namespace detail {

struct Sep4dDims {
  std::size_t C, O, Hq, Wq, Hs, Ws, Hqo, Wqo, Hso, Wso;
  ConvGeom gq, gs;
};

inline Sep4dDims sep4d_dims(const Shape& in, const Shape& kq, const Shape& ks, std::size_t sq, std::size_t ss,
                            std::size_t pq, std::size_t ps) {
  if (in.size() != 5) throw ShapeError("separable_conv4d: input must be [C,Hq,Wq,Hs,Ws], got " + shape_str(in));
  if (kq[1] != in[0])
    throw ShapeError("separable_conv4d: input " + shape_str(in) + " does not match query kernel " + shape_str(kq));
  Sep4dDims d{};
  d.C = in[0];
  d.O = kq[0];
  d.Hq = in[1];
  d.Wq = in[2];
  d.Hs = in[3];
  d.Ws = in[4];
  d.gq = {kq[2], kq[3], sq, sq, pq, pq};
  d.gs = {ks[2], ks[3], ss, ss, ps, ps};
  d.Hqo = conv_out_extent(d.Hq, d.gq.kh, sq, pq);
  d.Wqo = conv_out_extent(d.Wq, d.gq.kw, sq, pq);
  d.Hso = conv_out_extent(d.Hs, d.gs.kh, ss, ps);
  d.Wso = conv_out_extent(d.Ws, d.gs.kw, ss, ps);
  return d;
}

// View of the query plane at fixed support index s inside [C, Hq, Wq, S].
template <class T>
PlaneView<T> query_view(T* p, std::size_t C, std::size_t H, std::size_t W, std::size_t S, std::size_t s) {
  return {p + s, C, H, W, H * W * S, S};
}
// View of the support plane at fixed query index q inside [C, Q, Hs, Ws].
template <class T>
PlaneView<T> support_view(T* p, std::size_t C, std::size_t Q, std::size_t H, std::size_t W, std::size_t q) {
  return {p + q * H * W, C, H, W, Q * H * W, 1};
}

inline Tensor sep4d_query_pass(const Tensor& c, const Tensor& kq, const Sep4dDims& d) {
  const std::size_t S = d.Hs * d.Ws;
  Tensor mid({d.O, d.Hqo, d.Wqo, d.Hs, d.Ws});
  parallel_for(
      S,
      [&](std::size_t s) {
        conv_forward(query_view(c.ptr(), d.C, d.Hq, d.Wq, S, s), kq.ptr(), d.O, d.gq,
                     query_view(mid.ptr(), d.O, d.Hqo, d.Wqo, S, s), 0, d.O);
      },
      d.O * d.C * d.Hqo * d.Wqo * d.gq.kh * d.gq.kw);
  return mid;
}

inline Tensor sep4d_support_pass(const Tensor& mid, const Tensor& ks, const Sep4dDims& d) {
  const std::size_t Q = d.Hqo * d.Wqo;
  Tensor out({d.O, d.Hqo, d.Wqo, d.Hso, d.Wso});
  parallel_for(
      Q,
      [&](std::size_t q) {
        conv_forward(support_view(mid.ptr(), d.O, Q, d.Hs, d.Ws, q), ks.ptr(), d.O, d.gs,
                     support_view(out.ptr(), d.O, Q, d.Hso, d.Wso, q), 0, d.O);
      },
      d.O * d.O * d.Hso * d.Wso * d.gs.kh * d.gs.kw);
  return out;
}

}  // namespace detail

/// Inner 2D convolution over query coordinates for every support position,
/// then outer 2D convolution over support coordinates for every query position.
///
/// c is [C,Hq,Wq,Hs,Ws]; result is [out,Hq',Wq',Hs',Ws'].
inline Tensor separable_conv4d(const Tensor& c, const SeparableKernel4d& k) {
  k.validate();
  const auto d = detail::sep4d_dims(c.shape(), k.k_query.shape(), k.k_support.shape(), k.stride_q, k.stride_s,
                                    k.pad_q, k.pad_s);
  return detail::sep4d_support_pass(detail::sep4d_query_pass(c, k.k_query, d), k.k_support, d);
}

struct SeparableConv4dGrads {
  Tensor input, k_query, k_support;
};

inline SeparableConv4dGrads separable_conv4d_backward(const Tensor& grad_out, const Tensor& c,
                                                      const SeparableKernel4d& k, const Tensor& mid) {
  const auto d = detail::sep4d_dims(c.shape(), k.k_query.shape(), k.k_support.shape(), k.stride_q, k.stride_s,
                                    k.pad_q, k.pad_s);
  using detail::support_view;
  const std::size_t Q = d.Hqo * d.Wqo, S = d.Hs * d.Ws, So = d.Hso * d.Wso;
  SeparableConv4dGrads r{Tensor(c.shape()), Tensor(k.k_query.shape()), Tensor(k.k_support.shape())};
  Tensor gmid(mid.shape());
  const double* g = grad_out.ptr();
  const std::size_t work_s = d.O * d.O * So * d.gs.kh * d.gs.kw;
  parallel_for(
      Q,
      [&](std::size_t q) {
        detail::conv_backward_input(support_view(g, d.O, Q, d.Hso, d.Wso, q), k.k_support.ptr(), d.O, d.gs,
                                    support_view(gmid.ptr(), d.O, Q, d.Hs, d.Ws, q), 0, d.O);
      },
      work_s);
  parallel_for(
      d.O,
      [&](std::size_t o) {
        for (std::size_t q = 0; q < Q; ++q)
          detail::conv_backward_kernel(support_view(g, d.O, Q, d.Hso, d.Wso, q),
                                       support_view(mid.ptr(), d.O, Q, d.Hs, d.Ws, q), r.k_support.ptr(), d.gs, o,
                                       o + 1);
      },
      work_s * Q / std::max<std::size_t>(1, d.O));
  const std::size_t work_q = d.O * d.C * d.Hqo * d.Wqo * d.gq.kh * d.gq.kw;
  parallel_for(
      S,
      [&](std::size_t s) {
        detail::conv_backward_input(detail::query_view(std::as_const(gmid).ptr(), d.O, d.Hqo, d.Wqo, S, s), k.k_query.ptr(), d.C,
                                    d.gq, detail::query_view(r.input.ptr(), d.C, d.Hq, d.Wq, S, s), 0, d.C);
      },
      work_q);
  parallel_for(
      d.O,
      [&](std::size_t o) {
        for (std::size_t s = 0; s < S; ++s)
          detail::conv_backward_kernel(detail::query_view(std::as_const(gmid).ptr(), d.O, d.Hqo, d.Wqo, S, s),
                                       detail::query_view(c.ptr(), d.C, d.Hq, d.Wq, S, s), r.k_query.ptr(), d.gq, o,
                                       o + 1);
      },
      work_q * S / std::max<std::size_t>(1, d.O));
  return r;
}

/// Shape of one CAM layer: channel projection and support stride.
struct CamLayerGeom {
  std::size_t in_channels, out_channels;
  std::size_t support_stride;
  std::size_t support_in, support_out;
};

inline constexpr std::size_t kCamKernel = 3;

/// An entry layer projecting |N_p| -> D at stride 1, then stride-2 halvings
/// (kernel 3, pad 1, so E -> ceil(E/2)) until the support extent is 2.
inline std::vector<CamLayerGeom> cam_schedule(std::size_t layer_count, std::size_t D, std::size_t support_extent) {
  if (support_extent < 2)
    throw ConfigError("cam: support extent " + std::to_string(support_extent) + " cannot be reduced to 2x2");
  if (layer_count == 0 || D == 0) throw ConfigError("cam: channel counts must be positive");
  std::vector<CamLayerGeom> layers{{layer_count, D, 1, support_extent, support_extent}};
  std::size_t e = support_extent;
  while (e > 2) {
    const std::size_t next = (e + 1) / 2;
    layers.push_back({D, D, 2, e, next});
    e = next;
  }
  return layers;
}

struct CamLayer {
  SeparableKernel4d kernel;
  Tensor gamma, beta;  // group-norm affine, [D]
};

inline constexpr std::size_t kDefaultGroups = 4;

/// [D, Hq, Wq, 2, 2] channel-first aggregation result.
inline Tensor aggregate_channel_first(const Tensor& c, const std::vector<CamLayer>& layers,
                                      std::size_t groups = kDefaultGroups) {
  Tensor x = c;
  for (const auto& l : layers) x = relu(group_norm(separable_conv4d(x, l.kernel), groups, l.gamma, l.beta));
  if (x.rank() != 5 || x.extent(3) != 2 || x.extent(4) != 2)
    throw ConfigError("cam: layer schedule ends at support extent " + shape_str(x.shape()) + ", expected 2x2");
  return x;
}

/// Aggregated correlation laid out [Hq, Wq, 2, 2, D].
struct AggregatedCorrelation {
  Tensor data;

  std::size_t channels() const { return data.extent(4); }

  static AggregatedCorrelation from_channel_first(const Tensor& t) {
    const std::size_t D = t.extent(0), H = t.extent(1), W = t.extent(2);
    if (t.rank() != 5 || t.extent(3) != 2 || t.extent(4) != 2)
      throw ShapeError("AggregatedCorrelation: expected [D,Hq,Wq,2,2], got " + shape_str(t.shape()));
    Tensor out({H, W, 2, 2, D});
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) out.at(i, j, a, b, d) = t.at(d, i, j, a, b);
    return {std::move(out)};
  }
};

/// Separable conv4d -> group norm -> ReLU per layer until the support subspace
/// is 2x2. Query extent is unchanged; the output width is target_D.
inline AggregatedCorrelation aggregate(const Tensor& c, const std::vector<CamLayer>& layers, std::size_t target_D,
                                       std::size_t groups = kDefaultGroups) {
  auto agg = AggregatedCorrelation::from_channel_first(aggregate_channel_first(c, layers, groups));
  if (agg.channels() != target_D)
    throw ConfigError("cam: final channel width " + std::to_string(agg.channels()) + " differs from D=" +
                      std::to_string(target_D));
  return agg;
}

/// TopK baseline aggregator: per query pixel and channel, the k largest
/// support values in descending order (ties: smaller support index first).
/// c is [Ch,Hq,Wq,Hs,Ws]; result is [Hq,Wq,Ch*k] with channel-major last axis.
inline Tensor topk_aggregate(const Tensor& c, std::size_t k) {
  if (c.rank() != 5) throw ShapeError("topk_aggregate: expected [Ch,Hq,Wq,Hs,Ws], got " + shape_str(c.shape()));
  const std::size_t Ch = c.extent(0), Hq = c.extent(1), Wq = c.extent(2), S = c.extent(3) * c.extent(4);
  if (k < 1 || k > S)
    throw ValidationError("topk_aggregate: k=" + std::to_string(k) + " outside [1, " + std::to_string(S) + "]");
  Tensor out({Hq, Wq, Ch * k});
  std::vector<std::size_t> idx(S);
  for (std::size_t ch = 0; ch < Ch; ++ch)
    for (std::size_t q = 0; q < Hq * Wq; ++q) {
      const double* v = c.ptr() + (ch * Hq * Wq + q) * S;
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(),
                        [v](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
      for (std::size_t r = 0; r < k; ++r) out[q * Ch * k + ch * k + r] = v[idx[r]];
    }
  return out;
}

namespace ad {

inline Var separable_conv4d(const Var& x, const Var& k_query, const Var& k_support, std::size_t stride_q,
                            std::size_t stride_s, std::size_t pad_q, std::size_t pad_s) {
  Tape& t = *x.tape();
  SeparableKernel4d k{k_query.value(), k_support.value(), stride_q, stride_s, pad_q, pad_s};
  k.validate();
  const auto d = detail::sep4d_dims(x.value().shape(), k.k_query.shape(), k.k_support.shape(), stride_q, stride_s,
                                    pad_q, pad_s);
  auto mid = std::make_shared<Tensor>(detail::sep4d_query_pass(x.value(), k.k_query, d));
  Tensor out = detail::sep4d_support_pass(*mid, k.k_support, d);
  return t.record(std::move(out), {x, k_query, k_support},
                  [x, k_query, k_support, stride_q, stride_s, pad_q, pad_s, mid](Tape& tp, const Tensor& g) {
                    SeparableKernel4d k{k_query.value(), k_support.value(), stride_q, stride_s, pad_q, pad_s};
                    auto r = separable_conv4d_backward(g, x.value(), k, *mid);
                    tp.accumulate(x, r.input);
                    tp.accumulate(k_query, r.k_query);
                    tp.accumulate(k_support, r.k_support);
                  });
}

}  // namespace ad

}  // namespace qclnet

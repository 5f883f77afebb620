#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "qclnet/autograd.hpp"
#include "qclnet/error.hpp"
#include "qclnet/qclm.hpp"
#include "qclnet/tensor.hpp"
#include "qclnet/tensor_ops.hpp"

namespace qclnet {

/// Soft-attention weights over the four components, one probability vector
/// per channel: softmax of the components' global average pools. [D, 4].
inline Tensor quat_to_real_weights(const QuatTensor& q) {
  const std::size_t D = q.channels();
  Tensor gap({D, 4});
  for (std::size_t p = 0; p < 4; ++p) {
    const Tensor g = global_avg_pool(q.plane(p));
    for (std::size_t d = 0; d < D; ++d) gap.at(d, p) = g[d];
  }
  return softmax(gap, 1);
}

/// Weighted sum of the four planes with per-channel attention weights: [D,H,W].
inline Tensor quat_to_real(const QuatTensor& q) {
  const Tensor w = quat_to_real_weights(q);
  const std::size_t D = q.channels(), hw = q.r().size() / D;
  Tensor out(q.shape());
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t d = 0; d < D; ++d) {
      const double wd = w.at(d, p);
      const double* src = q.plane(p).ptr() + d * hw;
      double* dst = out.ptr() + d * hw;
      for (std::size_t k = 0; k < hw; ++k) dst[k] += wd * src[k];
    }
  return out;
}

/// Decoder: one 1x1 projection and one 3x3 refinement per skip, then a 1x1 head.
struct DecoderParams {
  std::vector<Conv2dParams> skip_projections;
  std::vector<Conv2dParams> refine_convs;
  Conv2dParams head;

  void validate() const {
    if (skip_projections.size() != refine_convs.size())
      throw ConfigError("decoder: " + std::to_string(skip_projections.size()) + " projections but " +
                        std::to_string(refine_convs.size()) + " refine convs");
    if (head.kernel.rank() != 4 || head.out_channels() != 2)
      throw ConfigError("decoder: head must have exactly 2 output channels");
  }
};

namespace detail {
inline void check_skip(const Tensor& skip, std::size_t h, std::size_t w, std::size_t stage) {
  if (skip.rank() != 3 || skip.extent(1) != h || skip.extent(2) != w)
    throw ShapeError("decode: skip at merge stage " + std::to_string(stage) + " has shape " + shape_str(skip.shape()) +
                     ", expected spatial extent " + std::to_string(h) + "x" + std::to_string(w));
}
}  // namespace detail

/// Pre-softmax decoder output [2, h * 2^S, w * 2^S] for S skips (coarse to fine).
/// Each stage: upsample x2, concatenate the projected skip, 3x3 conv + ReLU.
inline Tensor decode_logits(const Tensor& fr, const std::vector<Tensor>& skips, const DecoderParams& params) {
  params.validate();
  if (skips.size() != params.skip_projections.size())
    throw ShapeError("decode: " + std::to_string(skips.size()) + " skips for " +
                     std::to_string(params.skip_projections.size()) + " merge stages");
  Tensor x = fr;
  for (std::size_t i = 0; i < skips.size(); ++i) {
    x = upsample2x(x);
    detail::check_skip(skips[i], x.extent(1), x.extent(2), i);
    x = relu(conv2d(concat_channels({x, conv2d(skips[i], params.skip_projections[i])}), params.refine_convs[i]));
  }
  return conv2d(x, params.head);
}

/// Soft mask [2,H,W]: channel 0 background, channel 1 foreground; sums to 1 per pixel.
inline Tensor decode(const Tensor& fr, const std::vector<Tensor>& skips, const DecoderParams& params) {
  return softmax(decode_logits(fr, skips, params), 0);
}

/// Foreground where channel 1 strictly exceeds channel 0; ties go to background.
inline Tensor binarize(const Tensor& soft) {
  if (soft.rank() != 3 || soft.extent(0) != 2) throw ShapeError("binarize: expected [2,H,W], got " + shape_str(soft.shape()));
  const std::size_t H = soft.extent(1), W = soft.extent(2), hw = H * W;
  Tensor out({H, W});
  for (std::size_t k = 0; k < hw; ++k) out[k] = soft[hw + k] > soft[k] ? 1.0 : 0.0;
  return out;
}

namespace ad {

/// Stacked [4,D,H,W] -> [D,H,W] with per-channel softmax attention over component GAPs.
inline Var quat_to_real(const Var& q) {
  Tape& t = *q.tape();
  const Tensor& x = q.value();
  if (x.rank() != 4 || x.extent(0) != 4) throw ShapeError("quat_to_real: expected [4,D,H,W], got " + shape_str(x.shape()));
  const std::size_t D = x.extent(1), hw = x.extent(2) * x.extent(3), plane = D * hw;
  Tensor gap({D, 4});
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t d = 0; d < D; ++d) {
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += x[p * plane + d * hw + k];
      gap.at(d, p) = s / static_cast<double>(hw);
    }
  auto w = std::make_shared<Tensor>(softmax(gap, 1));
  Tensor out({D, x.extent(2), x.extent(3)});
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t d = 0; d < D; ++d) {
      const double wd = w->at(d, p);
      for (std::size_t k = 0; k < hw; ++k) out[d * hw + k] += wd * x[p * plane + d * hw + k];
    }
  return t.record(std::move(out), {q}, [q, w, D, hw, plane](Tape& tp, const Tensor& g) {
    const Tensor& x = q.value();
    Tensor gw({D, 4});
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t d = 0; d < D; ++d) {
        double s = 0.0;
        for (std::size_t k = 0; k < hw; ++k) s += g[d * hw + k] * x[p * plane + d * hw + k];
        gw.at(d, p) = s;
      }
    const Tensor ggap = softmax_backward(*w, gw, 1);
    Tensor gx(x.shape());
    for (std::size_t p = 0; p < 4; ++p)
      for (std::size_t d = 0; d < D; ++d) {
        const double wd = w->at(d, p), gg = ggap.at(d, p) / static_cast<double>(hw);
        for (std::size_t k = 0; k < hw; ++k) gx[p * plane + d * hw + k] = wd * g[d * hw + k] + gg;
      }
    tp.accumulate(q, gx);
  });
}

/// Tape counterpart of DecoderParams.
struct DecoderVars {
  std::vector<std::pair<Var, Var>> projections;  // (kernel, bias)
  std::vector<std::pair<Var, Var>> refines;
  std::pair<Var, Var> head;
};

inline Var decode_logits(const Var& fr, const std::vector<Var>& skips, const DecoderVars& p) {
  if (skips.size() != p.projections.size())
    throw ShapeError("decode: " + std::to_string(skips.size()) + " skips for " + std::to_string(p.projections.size()) +
                     " merge stages");
  Var x = fr;
  for (std::size_t i = 0; i < skips.size(); ++i) {
    x = upsample2x(x);
    detail::check_skip(skips[i].value(), x.value().extent(1), x.value().extent(2), i);
    Var s = conv2d(skips[i], p.projections[i].first, p.projections[i].second, {1, 1}, {0, 0});
    const std::size_t k = p.refines[i].first.value().extent(2);
    x = relu(conv2d(concat_channels({x, s}), p.refines[i].first, p.refines[i].second, {1, 1}, {k / 2, k / 2}));
  }
  return conv2d(x, p.head.first, p.head.second, {1, 1}, {0, 0});
}

}  // namespace ad

}  // namespace qclnet

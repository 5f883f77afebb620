#pragma once

#include <cmath>
#include <deque>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qclnet/error.hpp"
#include "qclnet/tensor.hpp"
#include "qclnet/tensor_ops.hpp"

namespace qclnet {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
/// is alive and not reset.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of a forward computation. Operands of node i are always
/// nodes with smaller index, so one reverse sweep propagates all gradients.
class Tape {
 public:
  /// Receives the node's output gradient; accumulates into its operands.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
    if (requires_grad) nodes_.back().grad = Tensor::zeros_like(nodes_.back().value);
    return {this, nodes_.size() - 1};
  }

  /// Records an op output. `fn` is kept only when some operand needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> operands, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : operands) {
      if (v.tape() != this) throw ContractError("Tape::record: operand belongs to another tape");
      rg = rg || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), rg, std::move(fn));
  }
  Var record(Tensor value, const std::vector<Var>& operands, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : operands) {
      if (v.tape() != this) throw ContractError("Tape::record: operand belongs to another tape");
      rg = rg || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), rg, std::move(fn));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  const Tensor& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
    return n.grad;
  }

  /// Adds g into the gradient of `v` when v participates in differentiation.
  void accumulate(const Var& v, const Tensor& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    n.grad += g;
  }
  bool wants_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  /// Reverse sweep from a scalar loss. A tape supports one sweep; call reset()
  /// before recording again.
  void backward(const Var& loss) {
    if (consumed_) throw ContractError("backward: tape already consumed; reset() before a second pass");
    if (loss.tape() != this) throw ContractError("backward: loss was not recorded on this tape");
    if (!value(loss.id()).is_scalar())
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss.id()).shape()));
    consumed_ = true;
    Node& ln = nodes_[loss.id()];
    if (!ln.requires_grad) return;
    ln.grad.fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.requires_grad) n.backward(*this, n.grad);
    }
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    Tensor value;
    mutable Tensor grad;
    bool requires_grad;
    BackwardFn backward;
  };

  Var push(Tensor value, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : nullptr});
    if (rg) nodes_.back().grad = Tensor::zeros_like(nodes_.back().value);
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable references across push_back
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

inline void backward(Tape& tape, const Var& loss) { tape.backward(loss); }

/// Differentiable counterparts of the tensor ops. Each forwards to the plain
/// implementation and records its adjoint.
namespace ad {

inline Var add(const Var& a, const Var& b) {
  Tape& t = *a.tape();
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = *a.tape();
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -1.0 * g);
  });
}

inline Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  return t.record(s * a.value(), {a}, [a, s](Tape& tp, const Tensor& g) { tp.accumulate(a, s * g); });
}

/// Elementwise product of congruent tensors.
inline Var mul(const Var& a, const Var& b) {
  Tape& t = *a.tape();
  a.value().require_same_shape(b.value(), "ad::mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.wants_grad(a)) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
      tp.accumulate(a, ga);
    }
    if (tp.wants_grad(b)) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
      tp.accumulate(b, gb);
    }
  });
}

inline Var sum(const Var& a) {
  Tape& t = *a.tape();
  return t.record(Tensor::scalar(qclnet::sum(a.value())), {a}, [a](Tape& tp, const Tensor& g) {
    tp.accumulate(a, Tensor(a.value().shape(), g[0]));
  });
}

/// 0.5 * sum(a^2).
inline Var half_sum_squares(const Var& a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  return t.record(Tensor::scalar(0.5 * s), {a}, [a](Tape& tp, const Tensor& g) { tp.accumulate(a, g[0] * a.value()); });
}

inline Var reshape(const Var& a, Shape s) {
  Tape& t = *a.tape();
  return t.record(a.value().reshaped(std::move(s)), {a}, [a](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g.reshaped(a.value().shape()));
  });
}

inline Var relu(const Var& a) {
  Tape& t = *a.tape();
  return t.record(qclnet::relu(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (a.value()[i] <= 0.0) ga[i] = 0.0;
    tp.accumulate(a, ga);
  });
}

/// conv2d with kernel and (optional) bias as tape variables. Pass a default
/// Var (null tape) as bias for a bias-free convolution.
inline Var conv2d(const Var& x, const Var& kernel, const Var& bias, std::pair<std::size_t, std::size_t> stride,
                  std::pair<std::size_t, std::size_t> padding) {
  Tape& t = *x.tape();
  const bool has_bias = bias.tape() != nullptr;
  Conv2dParams p{kernel.value(), has_bias ? bias.value() : Tensor(), stride, padding};
  Tensor out = qclnet::conv2d(x.value(), p);
  std::vector<Var> ops{x, kernel};
  if (has_bias) ops.push_back(bias);
  return t.record(std::move(out), ops, [x, kernel, bias, has_bias, stride, padding](Tape& tp, const Tensor& g) {
    Conv2dParams p{kernel.value(), Tensor(), stride, padding};
    auto r = conv2d_backward(g, x.value(), p);
    tp.accumulate(x, r.input);
    tp.accumulate(kernel, r.kernel);
    if (has_bias) tp.accumulate(bias, r.bias);
  });
}

inline Var group_norm(const Var& x, std::size_t groups, const Var& gamma, const Var& beta, double eps = kDefaultEps) {
  Tape& t = *x.tape();
  auto stats = std::make_shared<GroupNormStats>();
  Tensor out = qclnet::group_norm(x.value(), groups, gamma.value(), beta.value(), eps, stats.get());
  return t.record(std::move(out), {x, gamma, beta}, [x, gamma, beta, groups, stats](Tape& tp, const Tensor& g) {
    auto r = group_norm_backward(g, x.value(), groups, gamma.value(), *stats);
    tp.accumulate(x, r.input);
    tp.accumulate(gamma, r.gamma);
    tp.accumulate(beta, r.beta);
  });
}

inline Var resize_bilinear(const Var& x, std::size_t h, std::size_t w) {
  Tape& t = *x.tape();
  return t.record(qclnet::resize_bilinear(x.value(), h, w), {x}, [x](Tape& tp, const Tensor& g) {
    tp.accumulate(x, resize_bilinear_backward(g, x.value().extent(1), x.value().extent(2)));
  });
}

inline Var upsample2x(const Var& x) { return resize_bilinear(x, 2 * x.value().extent(1), 2 * x.value().extent(2)); }

inline Var crop(const Var& x, std::size_t h, std::size_t w) {
  Tape& t = *x.tape();
  return t.record(qclnet::crop(x.value(), h, w), {x}, [x, h, w](Tape& tp, const Tensor& g) {
    const std::size_t C = x.value().extent(0), H = x.value().extent(1), W = x.value().extent(2);
    Tensor gx({C, H, W});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) gx.at(c, i, j) = g.at(c, i, j);
    tp.accumulate(x, gx);
  });
}

inline Var concat_channels(const std::vector<Var>& parts) {
  Tape& t = *parts.at(0).tape();
  std::vector<Tensor> vals;
  vals.reserve(parts.size());
  for (const auto& p : parts) vals.push_back(p.value());
  return t.record(qclnet::concat_channels(vals), parts, [parts](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.value().size();
      Tensor gp(p.value().shape(), std::vector<double>(g.ptr() + off, g.ptr() + off + n));
      tp.accumulate(p, gp);
      off += n;
    }
  });
}

inline Var softmax(const Var& x, std::size_t axis) {
  Tape& t = *x.tape();
  Tensor y = qclnet::softmax(x.value(), axis);
  auto saved = std::make_shared<Tensor>(y);
  return t.record(std::move(y), {x}, [x, axis, saved](Tape& tp, const Tensor& g) {
    tp.accumulate(x, softmax_backward(*saved, g, axis));
  });
}

/// Mean per-pixel cross-entropy of [2,H,W] logits against a binary [H,W]
/// mask (channel 0 background, channel 1 foreground). Softmax is fused in.
inline Var softmax_cross_entropy(const Var& logits, const Tensor& mask) {
  Tape& t = *logits.tape();
  const Tensor& z = logits.value();
  if (z.rank() != 3 || z.extent(0) != 2 || mask.shape() != Shape{z.extent(1), z.extent(2)})
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(z.shape()) + " vs mask " + shape_str(mask.shape()));
  Tensor p = qclnet::softmax(z, 0);
  const std::size_t hw = mask.size();
  double loss = 0.0;
  for (std::size_t k = 0; k < hw; ++k) {
    const std::size_t cls = mask[k] > 0.5 ? 1 : 0;
    const double a = z[k], b = z[hw + k];
    const double mx = std::max(a, b);
    const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
    loss += lse - (cls ? b : a);
  }
  loss /= static_cast<double>(hw);
  auto probs = std::make_shared<Tensor>(std::move(p));
  return t.record(Tensor::scalar(loss), {logits}, [logits, mask, probs](Tape& tp, const Tensor& g) {
    const std::size_t hw = mask.size();
    Tensor gz = *probs;
    for (std::size_t k = 0; k < hw; ++k) {
      const std::size_t cls = mask[k] > 0.5 ? 1 : 0;
      gz[cls * hw + k] -= 1.0;
    }
    gz *= g[0] / static_cast<double>(hw);
    tp.accumulate(logits, gz);
  });
}

}  // namespace ad

/// Central-difference check of the tape gradient of a scalar function.
///
/// Returns max over elements of |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
inline double finite_diff_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor analytic;
  {
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var y = f(tape, xv);
    tape.backward(y);
    analytic = xv.grad();
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    Var y = f(tape, tape.leaf(at, false));
    if (!y.value().is_scalar()) throw ContractError("finite_diff_check: f must be scalar-valued");
    return y.value()[0];
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
  }
  return worst;
}

/// A trainable tensor that outlives individual tapes.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of every parameter from its `grad`.
inline void adam_step(std::span<Parameter> params, const AdamConfig& cfg, AdamState& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Tensor::zeros_like(p.value));
      state.v.push_back(Tensor::zeros_like(p.value));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    if (p.grad.empty()) continue;
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      p.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace qclnet

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qclnet/error.hpp"

namespace qclnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major (last axis fastest) tensor of doubles.
///
/// Extents must be positive. Finiteness of elements is checked at I/O
/// boundaries through check_finite(), not on every arithmetic operation.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <class... I>
  double& at(I... idx) {
    return data_[offset(idx...)];
  }
  template <class... I>
  double at(I... idx) const {
    return data_[offset(idx...)];
  }

  /// True when every extent is 1 (a scalar in any rank).
  bool is_scalar() const { return data_.size() == 1; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  void check_finite(const std::string& what) const {
    if (!all_finite()) throw DomainError(what + ": tensor holds non-finite values");
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double a) {
    for (double& v : data_) v *= a;
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* op) const {
    if (shape_ != o.shape_)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(shape_) + " and " +
                       shape_str(o.shape_) + " differ");
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void validate_shape() const {
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("Tensor: zero extent in shape " + shape_str(shape_));
  }

  template <class... I>
  std::size_t offset(I... idx) const {
    const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < sizeof...(I); ++a) off = off * shape_[a] + ids[a];
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
inline Tensor operator*(double s, Tensor a) { return a *= s; }

inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// max|a - b| / max|b|, the infinity-norm relative error of a against reference b.
inline double max_rel_diff(const Tensor& a, const Tensor& ref) {
  const double scale = max_abs(ref);
  const double d = max_abs_diff(a, ref);
  return scale > 0.0 ? d / scale : d;
}

inline double sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s;
}

}  // namespace qclnet

#pragma once

#include <cmath>
#include <ostream>

#include "qclnet/error.hpp"

namespace qclnet {

/// A quaternion r + x i + y j + z k with i^2 = j^2 = k^2 = ijk = -1.
///
/// Components are always finite; the constructor rejects NaN and Inf.
class Quaternion {
 public:
  Quaternion() = default;
  Quaternion(double r, double x, double y, double z) : r_(r), x_(x), y_(y), z_(z) {
    if (!std::isfinite(r) || !std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z))
      throw DomainError("Quaternion: components must be finite");
  }

  static Quaternion pure(double x, double y, double z) { return {0.0, x, y, z}; }

  double r() const { return r_; }
  double x() const { return x_; }
  double y() const { return y_; }
  double z() const { return z_; }

  bool is_pure() const { return r_ == 0.0; }

  double norm_squared() const { return r_ * r_ + x_ * x_ + y_ * y_ + z_ * z_; }
  double norm() const { return std::sqrt(norm_squared()); }

  friend bool operator==(const Quaternion&, const Quaternion&) = default;

 private:
  double r_ = 0.0;
  double x_ = 0.0;
  double y_ = 0.0;
  double z_ = 0.0;
};

inline Quaternion add(const Quaternion& q, const Quaternion& p) {
  return {q.r() + p.r(), q.x() + p.x(), q.y() + p.y(), q.z() + p.z()};
}

inline Quaternion sub(const Quaternion& q, const Quaternion& p) {
  return {q.r() - p.r(), q.x() - p.x(), q.y() - p.y(), q.z() - p.z()};
}

inline Quaternion scalar_mul(double a, const Quaternion& q) {
  return {a * q.r(), a * q.x(), a * q.y(), a * q.z()};
}

inline Quaternion conjugate(const Quaternion& q) { return {q.r(), -q.x(), -q.y(), -q.z()}; }

/// q / |q|. Throws DomainError for the zero quaternion.
inline Quaternion unit(const Quaternion& q) {
  const double n = q.norm();
  if (n == 0.0) throw DomainError("unit: normalization of the zero quaternion is undefined");
  return {q.r() / n, q.x() / n, q.y() / n, q.z() / n};
}

/// Hamilton product q (x) p, expanded term by term.
inline Quaternion hamilton(const Quaternion& q, const Quaternion& p) {
  return {q.r() * p.r() - q.x() * p.x() - q.y() * p.y() - q.z() * p.z(),
          q.x() * p.r() + q.r() * p.x() - q.z() * p.y() + q.y() * p.z(),
          q.y() * p.r() + q.z() * p.x() + q.r() * p.y() - q.x() * p.z(),
          q.z() * p.r() - q.y() * p.x() + q.x() * p.y() + q.r() * p.z()};
}

inline Quaternion operator+(const Quaternion& q, const Quaternion& p) { return add(q, p); }
inline Quaternion operator-(const Quaternion& q, const Quaternion& p) { return sub(q, p); }
inline Quaternion operator*(double a, const Quaternion& q) { return scalar_mul(a, q); }
inline Quaternion operator*(const Quaternion& q, const Quaternion& p) { return hamilton(q, p); }

inline std::ostream& operator<<(std::ostream& os, const Quaternion& q) {
  return os << '(' << q.r() << ", " << q.x() << ", " << q.y() << ", " << q.z() << ')';
}

}  // namespace qclnet

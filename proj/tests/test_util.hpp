#pragma once

#include <random>

#include "qclnet/quaternion.hpp"
#include "qclnet/tensor.hpp"

namespace qt {

inline qclnet::Tensor randn(std::mt19937_64& rng, qclnet::Shape s, double sd = 1.0, double mean = 0.0) {
  std::normal_distribution<double> nd(mean, sd);
  qclnet::Tensor t(std::move(s));
  for (double& v : t.data()) v = nd(rng);
  return t;
}

inline qclnet::Tensor uniform(std::mt19937_64& rng, qclnet::Shape s, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  qclnet::Tensor t(std::move(s));
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline qclnet::Tensor ramp(qclnet::Shape s, double start = 0.0) {
  qclnet::Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = start + static_cast<double>(i);
  return t;
}

// Hamilton product through the 4x4 left-multiplication matrix of q.
inline qclnet::Quaternion matrix_product(const qclnet::Quaternion& q, const qclnet::Quaternion& p) {
  const double r = q.r(), x = q.x(), y = q.y(), z = q.z();
  const double L[4][4] = {{r, -x, -y, -z}, {x, r, -z, y}, {y, z, r, -x}, {z, -y, x, r}};
  const double v[4] = {p.r(), p.x(), p.y(), p.z()};
  double o[4] = {0, 0, 0, 0};
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) o[a] += L[a][b] * v[b];
  return {o[0], o[1], o[2], o[3]};
}

}  // namespace qt

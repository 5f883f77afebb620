#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "qclnet/autograd.hpp"
#include "qclnet/cam.hpp"
#include "qclnet/config.hpp"
#include "qclnet/episode.hpp"
#include "qclnet/erm.hpp"
#include "qclnet/model.hpp"
#include "qclnet/parallel.hpp"
#include "qclnet/qclm.hpp"
#include "qclnet/quaternion.hpp"
#include "qclnet/tensor_ops.hpp"
#include "qclnet/weights.hpp"

namespace qclnet::verify {

struct SuiteResult {
  std::string name;
  bool passed = true;
  double max_error = 0.0;
  std::string detail;  // first failing check, if any
};

using QuatConvFn = std::function<QuatTensor(const QuatTensor&, const QuatConvParams&, std::pair<std::size_t, std::size_t>,
                                            std::pair<std::size_t, std::size_t>)>;

struct Options {
  Config config;
  /// Implementation under test for the block-matrix oracle suite.
  QuatConvFn quat_conv = [](const QuatTensor& q, const QuatConvParams& p, std::pair<std::size_t, std::size_t> s,
                            std::pair<std::size_t, std::size_t> pad) { return quat_conv2d(q, p, s, pad); };
};

namespace detail {

// Tracks the worst error against a tolerance and remembers the first failure.
class Checker {
 public:
  explicit Checker(std::string name) { r_.name = std::move(name); }

  void error(const std::string& what, double err, double tol) {
    if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
    r_.max_error = std::max(r_.max_error, err);
    if (!(err <= tol)) fail(what + ": error " + fmt(err) + " > " + fmt(tol));
  }

  void expect(bool ok, const std::string& what) {
    if (!ok) fail(what);
  }

  template <class E, class Fn>
  void throws(Fn&& fn, const std::string& what, const std::string& must_mention = {}) {
    try {
      fn();
    } catch (const E& e) {
      if (!must_mention.empty() && std::string(e.what()).find(must_mention) == std::string::npos)
        fail(what + ": message '" + e.what() + "' does not mention '" + must_mention + "'");
      return;
    } catch (const std::exception& e) {
      fail(what + ": wrong exception type: " + e.what());
      return;
    }
    fail(what + ": no exception");
  }

  SuiteResult result() const { return r_; }

  static std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
  }

 private:
  void fail(const std::string& msg) {
    if (r_.passed) r_.detail = msg;
    r_.passed = false;
  }
  SuiteResult r_;
};

inline Tensor randn(std::mt19937_64& rng, Shape s, double sd = 1.0, double mean = 0.0) {
  std::normal_distribution<double> nd(mean, sd);
  Tensor t(std::move(s));
  for (double& v : t.data()) v = nd(rng);
  return t;
}

inline Quaternion rand_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  return {nd(rng), nd(rng), nd(rng), nd(rng)};
}

inline double quat_rel(const Quaternion& a, const Quaternion& ref) {
  const double d = (a - ref).norm();
  return d / std::max(ref.norm(), 1e-300);
}

// Reference direct convolution, one output element at a time.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t s, std::size_t p) {
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2), O = k.extent(0), kh = k.extent(2),
                    kw = k.extent(3);
  const std::size_t Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
  Tensor out({O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = b.empty() ? 0.0 : b[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t e = 0; e < kw; ++e) {
              const long y = static_cast<long>(i * s + a) - static_cast<long>(p);
              const long xx = static_cast<long>(j * s + e) - static_cast<long>(p);
              if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
              acc += k.at(o, c, a, e) * x.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx));
            }
        out.at(o, i, j) = acc;
      }
  return out;
}

// The 4x4 real block matrix for left multiplication by W = Wr + Wx i + Wy j + Wz k,
// written out row by row: entry [out][in] = (sign, weight component).
inline constexpr std::array<std::array<std::pair<int, int>, 4>, 4> kBlockMatrix{{
    {{{+1, 0}, {-1, 1}, {-1, 2}, {-1, 3}}},
    {{{+1, 1}, {+1, 0}, {-1, 3}, {+1, 2}}},
    {{{+1, 2}, {+1, 3}, {+1, 0}, {-1, 1}}},
    {{{+1, 3}, {-1, 2}, {+1, 1}, {+1, 0}}},
}};

// One real conv2d with a [4O, 4C, kh, kw] kernel assembled from the block matrix.
inline QuatTensor block_matrix_conv(const QuatTensor& q, const QuatConvParams& p, std::size_t stride, std::size_t pad) {
  const std::size_t O = p.out_channels(), C = p.in_channels(), kh = p.weight[0].extent(2), kw = p.weight[0].extent(3);
  Tensor big({4 * O, 4 * C, kh, kw});
  Tensor bias({4 * O});
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = 0; b < 4; ++b) {
      const auto [sign, comp] = kBlockMatrix[a][b];
      const Tensor& w = p.weight[static_cast<std::size_t>(comp)];
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) big.at(a * O + o, b * C + c, i, j) = sign * w.at(o, c, i, j);
    }
    if (p.has_bias())
      for (std::size_t o = 0; o < O; ++o) bias[a * O + o] = p.bias[a][o];
  }
  const Shape& s = q.shape();
  const Tensor flat = q.stacked().reshaped({4 * s[0], s[1], s[2]});
  const Tensor out = conv2d(flat, Conv2dParams{big, p.has_bias() ? bias : Tensor(), {stride, stride}, {pad, pad}});
  return QuatTensor::from_stacked(out.reshaped({4, O, out.extent(1), out.extent(2)}));
}

inline QuatConvParams random_quat_conv(std::mt19937_64& rng, std::size_t O, std::size_t C, std::size_t k, bool bias) {
  QuatConvParams p;
  for (std::size_t i = 0; i < 4; ++i) {
    p.weight[i] = randn(rng, {O, C, k, k});
    if (bias) p.bias[i] = randn(rng, {O});
  }
  return p;
}

inline QuatTensor random_quat(std::mt19937_64& rng, Shape s) {
  return {randn(rng, s), randn(rng, s), randn(rng, s), randn(rng, s)};
}

inline double quat_rel_diff(const QuatTensor& a, const QuatTensor& ref) { return max_rel_diff(a.stacked(), ref.stacked()); }

// Tiny model config for end-to-end checks that must stay fast.
inline Config tiny_config() {
  Config c;
  c.extents = {4, 2};
  c.layers = {2, 1};
  c.channels = 4;
  c.D = 4;
  c.groups = 2;
  c.qclm_depth = 1;
  c.skip_channels = 2;
  c.skip_proj = 2;
  c.refine = {3};
  return c;
}

}  // namespace detail

inline SuiteResult suite_quat_core(const Options&) {
  detail::Checker ck("quat_core");
  std::mt19937_64 rng(101);
  const Quaternion i = Quaternion::pure(1, 0, 0), j = Quaternion::pure(0, 1, 0), k = Quaternion::pure(0, 0, 1);
  const Quaternion minus1{-1, 0, 0, 0};
  ck.expect(i * j == k && j * k == i && k * i == j, "i*j=k cyclic identities");
  ck.expect(i * i == minus1 && j * j == minus1 && k * k == minus1 && i * j * k == minus1, "i^2=j^2=k^2=ijk=-1");
  ck.expect(Quaternion(1, 2, 3, 4) * Quaternion(5, 6, 7, 8) == Quaternion(-60, 12, 30, 24), "worked product");
  constexpr double tol = 1e-10;
  for (int n = 0; n < 10000; ++n) {
    const Quaternion a = detail::rand_quat(rng), b = detail::rand_quat(rng), c = detail::rand_quat(rng);
    ck.error("associativity", detail::quat_rel((a * b) * c, a * (b * c)), tol);
    const double nab = (a * b).norm(), prod = a.norm() * b.norm();
    ck.error("norm multiplicativity", std::abs(nab - prod) / prod, tol);
    ck.error("conjugate anti-homomorphism", detail::quat_rel(conjugate(a * b), conjugate(b) * conjugate(a)), tol);
    ck.error("distributivity", detail::quat_rel(a * (b + c), a * b + a * c), tol);
    const Quaternion u = unit(a);
    ck.error("unit norm", std::abs(u.norm() - 1.0), tol);
  }
  ck.throws<DomainError>([] { unit(Quaternion(0, 0, 0, 0)); }, "unit of zero");
  return ck.result();
}

inline SuiteResult suite_tensor_ops(const Options&) {
  detail::Checker ck("tensor_ops");
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<std::size_t> ch(1, 4), ext(3, 7), kpick(0, 1), spick(1, 2);
  for (int n = 0; n < 40; ++n) {
    const std::size_t C = ch(rng), O = ch(rng), H = ext(rng), W = ext(rng), k = kpick(rng) ? 3 : 1, s = spick(rng),
                      p = k / 2;
    const Tensor x = detail::randn(rng, {C, H, W}), K = detail::randn(rng, {O, C, k, k}), b = detail::randn(rng, {O});
    const Tensor got = conv2d(x, Conv2dParams{K, b, {s, s}, {p, p}});
    ck.error("conv2d vs direct sum", max_rel_diff(got, detail::naive_conv2d(x, K, b, s, p)), 1e-12);
  }
  const Tensor logits = detail::randn(rng, {3, 5, 4}, 10.0);
  const Tensor sm = softmax(logits, 0);
  for (std::size_t k = 0; k < 20; ++k) ck.error("softmax sums to 1", std::abs(sm[k] + sm[20 + k] + sm[40 + k] - 1.0), 1e-12);
  const Tensor g = group_norm(detail::randn(rng, {8, 6, 6}, 3.0, 2.0), 4, Tensor({8}, 1.0), Tensor({8}));
  for (std::size_t grp = 0; grp < 4; ++grp) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 72; ++i) m += g[grp * 72 + i];
    m /= 72.0;
    for (std::size_t i = 0; i < 72; ++i) v += (g[grp * 72 + i] - m) * (g[grp * 72 + i] - m);
    v /= 72.0;
    ck.error("group_norm mean", std::abs(m), 1e-10);
    ck.error("group_norm variance", std::abs(v - 1.0), 1e-4);
  }
  const Tensor up = upsample2x(Tensor({1, 3, 3}, 2.5));
  ck.error("upsample of constant", max_abs_diff(up, Tensor({1, 6, 6}, 2.5)), 1e-15);
  return ck.result();
}

inline SuiteResult suite_conv_oracle(const Options& opt) {
  detail::Checker ck("conv_oracle");
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<std::size_t> ch(1, 8), ext(1, 8), kpick(0, 1), spick(1, 2);
  for (int n = 0; n < 100; ++n) {
    const std::size_t C = ch(rng), O = ch(rng), H = ext(rng), W = ext(rng);
    const std::size_t k = kpick(rng) ? 3 : 1, s = spick(rng), p = (k == 3 && (H < 3 || W < 3 || kpick(rng))) ? 1 : 0;
    const QuatConvParams params = detail::random_quat_conv(rng, O, C, k, n % 2 == 0);
    const QuatTensor q = detail::random_quat(rng, {C, H, W});
    const QuatTensor got = opt.quat_conv(q, params, {s, s}, {p, p});
    ck.error("quat_conv2d vs block-matrix conv", detail::quat_rel_diff(got, detail::block_matrix_conv(q, params, s, p)),
             1e-10);
  }
  // 1x1 kernel on a single pixel is one Hamilton product per output channel.
  for (int n = 0; n < 50; ++n) {
    const QuatConvParams params = detail::random_quat_conv(rng, 1, 1, 1, false);
    const QuatTensor q = detail::random_quat(rng, {1, 1, 1});
    const QuatTensor got = opt.quat_conv(q, params, {1, 1}, {0, 0});
    const Quaternion w{params.weight[0][0], params.weight[1][0], params.weight[2][0], params.weight[3][0]};
    ck.error("1x1 conv vs scalar hamilton", detail::quat_rel(got.at(0, 0, 0), hamilton(w, q.at(0, 0, 0))), 1e-12);
  }
  return ck.result();
}

inline SuiteResult suite_factorization(const Options&) {
  detail::Checker ck("factorization");
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<std::size_t> ext(2, 4), ch(1, 3), kpick(0, 1), spick(1, 2);
  for (int n = 0; n < 50; ++n) {
    const std::size_t C = ch(rng), O = ch(rng), Hq = ext(rng), Wq = ext(rng), Hs = ext(rng), Ws = ext(rng);
    const std::size_t kq = kpick(rng) ? 3 : 1, ks = kpick(rng) ? 3 : 1;
    const std::size_t sq = spick(rng), ss = spick(rng), pq = kq / 2, ps = ks / 2;
    SeparableKernel4d k{detail::randn(rng, {O, C, kq, kq}), detail::randn(rng, {O, O, ks, ks}), sq, ss, pq, ps};
    const Tensor c = detail::randn(rng, {C, Hq, Wq, Hs, Ws});
    // Full kernel K[o,c,a,b,d,e] = sum_m ks[o,m,d,e] * kq[m,c,a,b].
    Tensor full({O, C, kq, kq, ks, ks});
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t cc = 0; cc < C; ++cc)
        for (std::size_t a = 0; a < kq; ++a)
          for (std::size_t b = 0; b < kq; ++b)
            for (std::size_t d = 0; d < ks; ++d)
              for (std::size_t e = 0; e < ks; ++e) {
                double s = 0.0;
                for (std::size_t m = 0; m < O; ++m) s += k.k_support.at(o, m, d, e) * k.k_query.at(m, cc, a, b);
                full.at(o, cc, a, b, d, e) = s;
              }
    ck.error("separable vs naive conv4d", max_rel_diff(separable_conv4d(c, k), conv4d(c, full, sq, ss, pq, ps)), 1e-10);
  }
  return ck.result();
}

inline SuiteResult suite_param_count(const Options& opt) {
  detail::Checker ck("param_count");
  Config qc = opt.config, rc = opt.config, gc = opt.config;
  qc.kernel = KernelVariant::quaternion;
  rc.kernel = KernelVariant::real;
  gc.kernel = KernelVariant::group;
  const Model qm(qc), rm(rc), gm(gc);
  const auto names = qm.qclm_weight_names();
  ck.expect(!names.empty(), "model has quaternion layers");
  for (const auto& n : names) {
    const std::size_t q = qm.value(n).size(), r = rm.value(n).size(), g = gm.value(n).size();
    ck.expect(r == 4 * q, n + ": real replacement is not 4x the quaternion count");
    ck.expect(g == q, n + ": group ablation count differs from quaternion count");
  }
  ck.expect(quaternion_weight_count(16, 16, 3) == 9216 && real_replacement_weight_count(16, 16, 3) == 36864,
            "formula counts for 64 real channels, 3x3");
  return ck.result();
}

inline SuiteResult suite_quat_norm(const Options&) {
  detail::Checker ck("quat_norm");
  std::mt19937_64 rng(505);
  const std::size_t G = 4, C = 16, H = 32, W = 32;  // 4 channels x 1024 pixels = 4096 per group and component
  QuatTensor q;
  for (std::size_t p = 0; p < 4; ++p) q.plane(p) = detail::randn(rng, {C, H, W}, 4.0 * (1.0 + p), 3.0 * p - 2.0);
  const QuatTensor out = quat_norm(q, QuatNormParams::identity(G));
  const std::size_t per = (C / G) * H * W;
  for (std::size_t g = 0; g < G; ++g) {
    double var = 0.0;
    for (std::size_t p = 0; p < 4; ++p) {
      const double* v = out.plane(p).ptr() + g * per;
      double m = 0.0, s = 0.0;
      for (std::size_t i = 0; i < per; ++i) m += v[i];
      m /= static_cast<double>(per);
      for (std::size_t i = 0; i < per; ++i) s += (v[i] - m) * (v[i] - m);
      var += s / static_cast<double>(per);
      ck.error("group mean component", std::abs(m), 1e-8);
    }
    ck.error("average component variance", std::abs(var / 4.0 - 1.0), 1e-6);
  }
  return ck.result();
}

inline SuiteResult suite_q_properness(const Options&) {
  detail::Checker ck("q_properness");
  std::mt19937_64 rng(606);
  const double v = 2.0;
  std::normal_distribution<double> nd(0.0, std::sqrt(v));
  std::vector<Quaternion> sample;
  sample.reserve(100000);
  for (int n = 0; n < 100000; ++n) sample.emplace_back(nd(rng), nd(rng), nd(rng), nd(rng));
  const Matrix4 cov = augmented_covariance(sample);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b)
      ck.error(a == b ? "diagonal vs v" : "off-diagonal", std::abs(cov[a][b] - (a == b ? v : 0.0)) / v, 0.05);
  return ck.result();
}

inline SuiteResult suite_gradients(const Options&) {
  detail::Checker ck("gradients");
  std::mt19937_64 rng(707);
  constexpr double tol = 1e-4;
  using detail::randn;
  // Scalarizes y with a fixed random projection so no direction is left untested.
  auto proj = [](Tape& t, const Var& y, std::uint64_t seed) {
    std::mt19937_64 r(seed);
    return ad::sum(ad::mul(y, t.leaf(randn(r, y.value().shape()))));
  };
  auto check = [&](const std::string& what, const std::function<Var(Tape&, const Var&)>& f, const Tensor& x) {
    ck.error(what, finite_diff_check(f, x), tol);
  };

  const Tensor x3 = randn(rng, {2, 5, 5}), k3 = randn(rng, {3, 2, 3, 3}), b3 = randn(rng, {3});
  check("conv2d input", [&](Tape& t, const Var& x) {
    return proj(t, ad::conv2d(x, t.leaf(k3), t.leaf(b3), {2, 2}, {1, 1}), 1);
  }, x3);
  check("conv2d kernel", [&](Tape& t, const Var& k) {
    return proj(t, ad::conv2d(t.leaf(x3), k, t.leaf(b3), {1, 1}, {1, 1}), 2);
  }, k3);
  check("conv2d bias", [&](Tape& t, const Var& b) {
    return proj(t, ad::conv2d(t.leaf(x3), t.leaf(k3), b, {1, 1}, {0, 0}), 3);
  }, b3);

  const Tensor gx = randn(rng, {4, 3, 3}, 2.0, 1.0), gg = randn(rng, {4}), gb = randn(rng, {4});
  check("group_norm input", [&](Tape& t, const Var& x) { return proj(t, ad::group_norm(x, 2, t.leaf(gg), t.leaf(gb)), 4); }, gx);
  check("group_norm gamma", [&](Tape& t, const Var& g) { return proj(t, ad::group_norm(t.leaf(gx), 2, g, t.leaf(gb)), 5); }, gg);
  check("group_norm beta", [&](Tape& t, const Var& b) { return proj(t, ad::group_norm(t.leaf(gx), 2, t.leaf(gg), b), 6); }, gb);

  check("relu", [&](Tape& t, const Var& x) { return proj(t, ad::relu(x), 7); }, randn(rng, {3, 4, 4}));
  check("add/scale/mul", [&](Tape& t, const Var& x) {
    return proj(t, ad::mul(ad::add(x, ad::scale(x, 0.5)), x), 8);
  }, randn(rng, {2, 3, 3}));
  check("reshape", [&](Tape& t, const Var& x) { return proj(t, ad::reshape(x, {3, 6}), 9); }, randn(rng, {2, 3, 3}));
  check("resize_bilinear", [&](Tape& t, const Var& x) { return proj(t, ad::resize_bilinear(x, 7, 5), 10); },
        randn(rng, {2, 3, 4}));
  check("upsample2x", [&](Tape& t, const Var& x) { return proj(t, ad::upsample2x(x), 11); }, randn(rng, {2, 3, 3}));
  check("crop", [&](Tape& t, const Var& x) { return proj(t, ad::crop(x, 3, 2), 12); }, randn(rng, {2, 4, 4}));
  const Tensor other = randn(rng, {3, 3, 3});
  check("concat_channels", [&](Tape& t, const Var& x) { return proj(t, ad::concat_channels({x, t.leaf(other)}), 13); },
        randn(rng, {2, 3, 3}));
  check("softmax", [&](Tape& t, const Var& x) { return proj(t, ad::softmax(x, 0), 14); }, randn(rng, {3, 3, 4}));
  Tensor mask({4, 4});
  for (std::size_t i = 0; i < 8; ++i) mask[i * 2] = 1.0;
  check("softmax_cross_entropy", [&](Tape&, const Var& z) { return ad::softmax_cross_entropy(z, mask); },
        randn(rng, {2, 4, 4}));

  const Tensor c4 = randn(rng, {2, 3, 3, 4, 4}), kq = randn(rng, {2, 2, 3, 3}), ks = randn(rng, {2, 2, 3, 3});
  check("separable_conv4d input", [&](Tape& t, const Var& x) {
    return proj(t, ad::separable_conv4d(x, t.leaf(kq), t.leaf(ks), 1, 2, 1, 1), 15);
  }, c4);
  check("separable_conv4d k_query", [&](Tape& t, const Var& k) {
    return proj(t, ad::separable_conv4d(t.leaf(c4), k, t.leaf(ks), 1, 2, 1, 1), 16);
  }, kq);
  check("separable_conv4d k_support", [&](Tape& t, const Var& k) {
    return proj(t, ad::separable_conv4d(t.leaf(c4), t.leaf(kq), k, 2, 1, 1, 1), 17);
  }, ks);

  check("encapsulate", [&](Tape& t, const Var& x) { return proj(t, ad::encapsulate(x), 18); }, randn(rng, {3, 2, 2, 2, 2}));

  const Tensor qx = randn(rng, {4, 2, 3, 3}), qw = randn(rng, {4, 2, 2, 3, 3}), qb = randn(rng, {4, 2});
  for (auto kind : {QuatKernel::hamilton, QuatKernel::group}) {
    const std::string tag = kind == QuatKernel::hamilton ? "quat_conv2d" : "group_conv2d";
    check(tag + " input", [&](Tape& t, const Var& x) {
      return proj(t, ad::quat_conv2d(x, t.leaf(qw), t.leaf(qb), {1, 1}, {1, 1}, kind), 19);
    }, qx);
    check(tag + " weight", [&](Tape& t, const Var& w) {
      return proj(t, ad::quat_conv2d(t.leaf(qx), w, t.leaf(qb), {2, 2}, {1, 1}, kind), 20);
    }, qw);
    check(tag + " bias", [&](Tape& t, const Var& b) {
      return proj(t, ad::quat_conv2d(t.leaf(qx), t.leaf(qw), b, {1, 1}, {0, 0}, kind), 21);
    }, qb);
  }
  const Tensor nx = randn(rng, {4, 4, 3, 3}, 1.5, 0.5), ng = randn(rng, {2}), nb = randn(rng, {4, 2});
  check("quat_norm input", [&](Tape& t, const Var& x) { return proj(t, ad::quat_norm(x, t.leaf(ng), t.leaf(nb), 2), 22); }, nx);
  check("quat_norm gamma", [&](Tape& t, const Var& g) { return proj(t, ad::quat_norm(t.leaf(nx), g, t.leaf(nb), 2), 23); }, ng);
  check("quat_norm beta", [&](Tape& t, const Var& b) { return proj(t, ad::quat_norm(t.leaf(nx), t.leaf(ng), b, 2), 24); }, nb);
  check("qcl_block", [&](Tape& t, const Var& x) {
    Var y = ad::quat_conv2d(x, t.leaf(qw), t.leaf(qb), {1, 1}, {1, 1}, QuatKernel::hamilton);
    return proj(t, ad::relu(ad::quat_norm(y, t.leaf(Tensor({2}, 1.0)), t.leaf(Tensor({4, 2})), 2)), 25);
  }, qx);
  check("quat_upsample_to", [&](Tape& t, const Var& x) { return proj(t, ad::quat_upsample_to(x, 5, 6), 26); },
        randn(rng, {4, 2, 3, 3}));
  check("quat_to_real", [&](Tape& t, const Var& x) { return proj(t, ad::quat_to_real(x), 27); }, randn(rng, {4, 3, 3, 3}));

  const Tensor fr = randn(rng, {2, 2, 2}), skip = randn(rng, {2, 4, 4});
  const Tensor pw = randn(rng, {2, 2, 1, 1}), pb = randn(rng, {2}), rw = randn(rng, {3, 4, 3, 3}), rb = randn(rng, {3});
  const Tensor hw = randn(rng, {2, 3, 1, 1}), hb = randn(rng, {2});
  auto dec = [&](Tape& t, const Var& f, const Var& refine_w) {
    ad::DecoderVars dv;
    dv.projections.emplace_back(t.leaf(pw), t.leaf(pb));
    dv.refines.emplace_back(refine_w, t.leaf(rb));
    dv.head = {t.leaf(hw), t.leaf(hb)};
    return proj(t, ad::decode_logits(f, {t.leaf(skip)}, dv), 28);
  };
  check("decode fr", [&](Tape& t, const Var& f) { return dec(t, f, t.leaf(rw)); }, fr);
  check("decode refine weight", [&](Tape& t, const Var& w) { return dec(t, t.leaf(fr), w); }, rw);

  // End to end through the model for a few parameter tensors.
  const Config tc = detail::tiny_config();
  const Model model = Model::initialized(tc, 7);
  const Episode ep = synth_episode(3, 1, tc.episode_spec());
  const auto hc = shot_hypercorrelation(ep, 0);
  for (const std::string name : {"dec.head.w", "qclm.L1.block0.norm_beta", "qam.L0.norm_gamma", "cam.L1.layer0.kq"}) {
    check("model " + name, [&](Tape& t, const Var& p) {
      BoundModel bm(t, model, false);
      bm.replace(name, p);
      return ad::softmax_cross_entropy(shot_logits(bm, hc, ep.query.skips), ep.query.mask);
    }, model.value(name));
  }
  return ck.result();
}

inline SuiteResult suite_kshot(const Options&) {
  detail::Checker ck("kshot");
  std::mt19937_64 rng(808);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto rand_map = [&](std::size_t h, std::size_t w) {
    Tensor t({h, w});
    for (double& v : t.data()) v = u(rng);
    return t;
  };
  EpisodeSpec spec{PyramidSpec{{8, 4}, {1, 2}, 6}, 1, 2};
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto pr = episode_priors(synth_episode(s, 3, spec));
    for (const auto& w : pr)
      for (double v : w.data()) ck.expect(v >= 0.0 && v <= 1.0, "prior outside [0,1]");
  }
  ck.expect(fuse_kshot({Tensor({1, 1}, 0.5)}, {Tensor({1, 1}, 0.3)}, 0.5)[0] == 0.0, "value == tau must give 0");
  ck.expect(fuse_kshot({Tensor({1, 1}, 0.6)}, {Tensor({1, 1}, 0.3)}, 0.5)[0] == 1.0, "value 0.6 > tau gives 1");
  for (int n = 0; n < 20; ++n) {
    const Tensor soft = softmax(detail::randn(rng, {2, 8, 8}, 2.0), 0);
    const Tensor fused = fuse_kshot({foreground(soft)}, {rand_map(3, 3)}, 0.5);
    ck.expect(fused == binarize(soft), "K=1 fusion differs from binarize");
  }
  for (int n = 0; n < 20; ++n) {
    const std::size_t K = 5, H = 6, W = 6;
    std::vector<Tensor> fg, pr;
    for (std::size_t k = 0; k < K; ++k) {
      fg.push_back(rand_map(H, W));
      pr.push_back(n % 2 ? rand_map(H, W) : rand_map(3, 3));
    }
    const Tensor got = fuse_kshot_soft(fg, pr);
    Tensor want({H, W});
    std::vector<Tensor> up;
    for (const auto& w : pr) up.push_back(w.extent(0) == H ? w : resize_bilinear(w.reshaped({1, 3, 3}), H, W).reshaped({H, W}));
    for (std::size_t p = 0; p < H * W; ++p) {
      double z = 0.0, acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) z += std::exp(up[k][p]);
      for (std::size_t k = 0; k < K; ++k) acc += std::exp(up[k][p]) / z * fg[k][p];
      want[p] = acc;
    }
    ck.error("fusion vs brute-force softmax", max_abs_diff(got, want), 1e-12);
  }
  return ck.result();
}

inline SuiteResult suite_metrics(const Options&) {
  detail::Checker ck("metrics");
  auto acc_of = [](std::initializer_list<std::pair<int, ConfusionCounts>> rows) {
    MetricsAccumulator a;
    for (const auto& [cls, c] : rows) a.add_counts(cls, c);
    return a;
  };
  auto exact = [&](const std::string& what, double got, double want) {
    ck.error(what, std::abs(got - want), 0.0);
  };
  exact("TP8 FP2 FN0", miou(acc_of({{0, {8, 2, 0, 0}}}), 1), 0.8);
  exact("two classes 0.5 and 1", miou(acc_of({{0, {1, 1, 0, 0}}, {1, {5, 0, 0, 0}}}), 2), 0.75);
  exact("TP3 FP1 FN2", miou(acc_of({{0, {3, 1, 2, 0}}}), 1), 0.5);
  exact("no overlap", miou(acc_of({{0, {0, 4, 4, 0}}}), 1), 0.0);
  exact("four classes", miou(acc_of({{0, {1, 1, 0, 0}}, {1, {1, 2, 1, 0}}, {2, {4, 0, 0, 0}}, {3, {3, 1, 0, 0}}}), 4),
        0.625);
  std::size_t excluded = 0;
  exact("empty class excluded", miou(acc_of({{0, {2, 2, 0, 5}}, {1, {0, 0, 0, 9}}}), 2, &excluded), 0.5);
  ck.expect(excluded == 1, "empty class counted as excluded");
  exact("fb-iou mixed", fb_iou(acc_of({{0, {2, 1, 1, 6}}})), 0.625);
  exact("fb-iou all background", fb_iou(acc_of({{0, {0, 0, 0, 16}}})), 0.5);
  exact("fb-iou complement", fb_iou(acc_of({{0, {0, 5, 11, 0}}})), 0.0);
  Tensor truth({4, 4});
  for (std::size_t i = 0; i < 6; ++i) truth[i] = 1.0;
  MetricsAccumulator perfect;
  perfect.add(truth, truth, 3);
  exact("perfect prediction miou", miou(perfect), 1.0);
  exact("perfect prediction fb-iou", fb_iou(perfect), 1.0);
  MetricsAccumulator a = acc_of({{0, {1, 2, 3, 4}}}), b = acc_of({{0, {5, 6, 7, 8}}, {1, {1, 0, 0, 1}}});
  MetricsAccumulator ab = a, ba = b;
  ab.merge(b);
  ba.merge(a);
  exact("merge is order independent", miou(ab, 2), miou(ba, 2));
  return ck.result();
}

inline SuiteResult suite_serialization(const Options&) {
  detail::Checker ck("serialization");
  std::mt19937_64 rng(909);
  std::uniform_int_distribution<std::size_t> rank(1, 4), ext(1, 5);
  for (int n = 0; n < 20; ++n) {
    NamedTensors ts;
    for (std::size_t i = 0; i < 4; ++i) {
      Shape s(rank(rng));
      for (auto& e : s) e = ext(rng);
      ts.emplace_back("t" + std::to_string(i), detail::randn(rng, s, 1e3));
    }
    ck.expect(deserialize_weights(serialize_weights(ts)) == ts, "round trip not bit-exact");
  }
  NamedTensors one{{"w", detail::randn(rng, {2, 3})}};
  const std::string buf = serialize_weights(one);
  ck.throws<TruncatedError>([&] { deserialize_weights(buf.substr(0, buf.size() - 5)); }, "truncated payload", "payload");
  ck.throws<BadMagicError>([&] { deserialize_weights("QCLX" + buf.substr(4)); }, "bad magic");
  std::string v2 = buf;
  v2[4] = 2;
  ck.throws<VersionError>([&] { deserialize_weights(v2); }, "version mismatch");
  Config small = detail::tiny_config(), big = small;
  big.D = 8;
  Model m(small);
  ck.throws<ShapeError>([&] { Model(big).assign(named_tensors(m)); }, "D mismatch", "cam.L0.layer0.kq");
  return ck.result();
}

inline SuiteResult suite_determinism(const Options& opt) {
  detail::Checker ck("determinism");
  const Config& c = opt.config;
  const Model m = Model::initialized(c, c.seed + 1);
  const Episode ep = synth_episode(c.seed, c.K, c.episode_spec());
  const int saved = qclnet::detail::thread_override();
  set_num_threads(1);
  const EpisodeOutput a = forward_episode(ep, m), b = forward_episode(ep, m);
  set_num_threads(4);
  const EpisodeOutput d = forward_episode(ep, m);
  set_num_threads(saved);
  ck.expect(a.soft == b.soft && a.mask == b.mask, "repeated forward differs");
  ck.expect(a.soft == d.soft && a.fused_fg == d.fused_fg && a.mask == d.mask, "forward differs across thread counts");
  double worst = 0.0;
  for (std::size_t k = 0; k < a.soft.size(); ++k) worst = std::max(worst, max_abs_diff(a.soft[k], d.soft[k]));
  ck.error("max difference across thread counts", worst, 0.0);
  return ck.result();
}

struct SuiteEntry {
  const char* name;
  SuiteResult (*run)(const Options&);
};

inline const std::vector<SuiteEntry>& suites() {
  static const std::vector<SuiteEntry> all{
      {"quat_core", suite_quat_core},         {"tensor_ops", suite_tensor_ops},
      {"conv_oracle", suite_conv_oracle},     {"factorization", suite_factorization},
      {"param_count", suite_param_count},     {"quat_norm", suite_quat_norm},
      {"q_properness", suite_q_properness},   {"gradients", suite_gradients},
      {"kshot", suite_kshot},                 {"metrics", suite_metrics},
      {"serialization", suite_serialization}, {"determinism", suite_determinism},
  };
  return all;
}

/// Runs every suite, or only `only` when non-empty. Throws ConfigError for an unknown suite.
inline std::vector<SuiteResult> run_suites(const Options& opt, const std::string& only = {}) {
  std::vector<SuiteResult> out;
  for (const auto& s : suites()) {
    if (!only.empty() && only != s.name) continue;
    try {
      out.push_back(s.run(opt));
    } catch (const std::exception& e) {
      out.push_back({s.name, false, std::numeric_limits<double>::infinity(), std::string("exception: ") + e.what()});
    }
  }
  if (!only.empty() && out.empty()) throw ConfigError("unknown suite '" + only + "'");
  return out;
}

inline std::string format(const SuiteResult& r) {
  std::string line = r.name + " " + (r.passed ? "PASS" : "FAIL") + " max_error=" + detail::Checker::fmt(r.max_error);
  if (!r.passed) line += " (" + r.detail + ")";
  return line;
}

}  // namespace qclnet::verify

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "qclnet/autograd.hpp"
#include "qclnet/cam.hpp"
#include "qclnet/config.hpp"
#include "qclnet/correlation.hpp"
#include "qclnet/episode.hpp"
#include "qclnet/erm.hpp"
#include "qclnet/error.hpp"
#include "qclnet/qclm.hpp"
#include "qclnet/tensor.hpp"

namespace qclnet {

inline constexpr std::size_t kQclmKernel = 3;

/// Full model state: the config that fixes every shape, plus named parameters
/// in a stable order.
class Model {
 public:
  explicit Model(Config cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  /// Fresh weights drawn from `seed`.
  static Model initialized(const Config& cfg, std::uint64_t seed) {
    Model m(cfg);
    m.initialize(seed);
    return m;
  }

  const Config& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  std::size_t index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("model: no parameter named '" + name + "'");
    return it->second;
  }
  const Tensor& value(const std::string& name) const { return params_[index_of(name)].value; }
  Tensor& value(const std::string& name) { return params_[index_of(name)].value; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Names of the quaternion-layer weights (per-level blocks and merge blocks).
  std::vector<std::string> qclm_weight_names() const {
    std::vector<std::string> out;
    for (const auto& p : params_)
      if ((p.name.starts_with("qclm.") || p.name.starts_with("qam.")) && p.name.ends_with(".w")) out.push_back(p.name);
    return out;
  }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& p : params_) {
      const std::string& n = p.name;
      Tensor& v = p.value;
      if (n.ends_with("gamma")) {
        v.fill(1.0);
      } else if (n.ends_with("beta")) {
        v.fill(0.0);
      } else if ((n.starts_with("qclm.") || n.starts_with("qam.")) && n.ends_with(".b")) {
        v.fill(0.0);
      } else if ((n.starts_with("qclm.") || n.starts_with("qam.")) && cfg_.kernel != KernelVariant::real) {
        v = quaternion_init(rng, cfg_.D, cfg_.D, kQclmKernel, kQclmKernel);
      } else {
        // Uniform +-1/sqrt(fan_in); biases share the bound of their kernel.
        const std::string kname = n.ends_with(".b") ? n.substr(0, n.size() - 1) + "w" : n;
        const Tensor& k = n.ends_with(".b") ? value(kname) : v;
        const double bound = 1.0 / std::sqrt(static_cast<double>(k.size() / k.extent(0)));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& x : v.data()) x = u(rng);
      }
    }
  }

  /// Replaces every parameter value; names and shapes must match exactly.
  void assign(const std::vector<std::pair<std::string, Tensor>>& named) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [n, t] : named) by_name[n] = &t;
    for (const auto& p : params_) {
      const auto it = by_name.find(p.name);
      if (it == by_name.end()) throw ShapeError("weights: missing tensor '" + p.name + "'");
      if (it->second->shape() != p.value.shape())
        throw ShapeError("weights: tensor '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                         ", config expects " + shape_str(p.value.shape()));
    }
    if (named.size() != params_.size()) {
      for (const auto& [n, t] : named)
        if (!index_.count(n)) throw ShapeError("weights: unexpected tensor '" + n + "'");
    }
    for (auto& p : params_) p.value = *by_name.at(p.name);
  }

 private:
  void add(std::string name, Shape shape) {
    index_[name] = params_.size();
    params_.push_back(Parameter{std::move(name), Tensor(std::move(shape)), {}});
  }

  void add_block(const std::string& prefix) {
    const std::size_t D = cfg_.D, G = cfg_.groups, k = kQclmKernel;
    if (cfg_.kernel == KernelVariant::real) {
      add(prefix + ".w", {4 * D, 4 * D, k, k});
      add(prefix + ".b", {4 * D});
    } else {
      add(prefix + ".w", {4, D, D, k, k});
      add(prefix + ".b", {4, D});
    }
    if (cfg_.norm == NormVariant::qn) {
      add(prefix + ".norm_gamma", {G});
      add(prefix + ".norm_beta", {4, G});
    } else {
      add(prefix + ".norm_gamma", {4 * D});
      add(prefix + ".norm_beta", {4 * D});
    }
  }

  void build() {
    const std::size_t D = cfg_.D, P = cfg_.extents.size();
    for (std::size_t p = 0; p < P; ++p) {
      const auto sched = cam_schedule(cfg_.layers[p], D, cfg_.extents[p]);
      for (std::size_t i = 0; i < sched.size(); ++i) {
        const std::string pre = "cam.L" + std::to_string(p) + ".layer" + std::to_string(i);
        add(pre + ".kq", {D, sched[i].in_channels, kCamKernel, kCamKernel});
        add(pre + ".ks", {D, D, kCamKernel, kCamKernel});
        add(pre + ".gn_gamma", {D});
        add(pre + ".gn_beta", {D});
      }
      for (std::size_t b = 0; b < cfg_.qclm_depth; ++b)
        add_block("qclm.L" + std::to_string(p) + ".block" + std::to_string(b));
    }
    for (std::size_t p = 0; p + 1 < P; ++p) add_block("qam.L" + std::to_string(p));
    std::size_t width = D;
    for (std::size_t i = 0; i < cfg_.refine.size(); ++i) {
      const std::string s = std::to_string(i);
      add("dec.proj" + s + ".w", {cfg_.skip_proj, cfg_.skip_channels, 1, 1});
      add("dec.proj" + s + ".b", {cfg_.skip_proj});
      add("dec.refine" + s + ".w", {cfg_.refine[i], width + cfg_.skip_proj, 3, 3});
      add("dec.refine" + s + ".b", {cfg_.refine[i]});
      width = cfg_.refine[i];
    }
    add("dec.head.w", {2, width, 1, 1});
    add("dec.head.b", {2});
  }

  Config cfg_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Model parameters placed on one tape.
class BoundModel {
 public:
  BoundModel(Tape& tape, const Model& m, bool requires_grad) : tape_(&tape), model_(&m) {
    for (const auto& p : m.parameters()) vars_.push_back(tape.leaf(p.value, requires_grad));
  }

  const Var& operator[](const std::string& name) const { return vars_[model_->index_of(name)]; }
  void replace(const std::string& name, const Var& v) { vars_[model_->index_of(name)] = v; }
  const std::vector<Var>& vars() const { return vars_; }
  Tape& tape() const { return *tape_; }
  const Config& config() const { return model_->config(); }

 private:
  Tape* tape_;
  const Model* model_;
  std::vector<Var> vars_;
};

namespace detail {

// conv -> norm -> ReLU on a stacked [4,D,H,W] quaternion map.
inline Var model_block(const BoundModel& bm, const std::string& pre, const Var& x) {
  const Config& c = bm.config();
  const Shape s = x.value().shape();
  const std::size_t D = s[1], H = s[2], W = s[3], pad = kQclmKernel / 2;
  Var y;
  if (c.kernel == KernelVariant::real) {
    y = ad::reshape(ad::conv2d(ad::reshape(x, {4 * D, H, W}), bm[pre + ".w"], bm[pre + ".b"], {1, 1}, {pad, pad}), s);
  } else {
    const auto kind = c.kernel == KernelVariant::group ? QuatKernel::group : QuatKernel::hamilton;
    y = ad::quat_conv2d(x, bm[pre + ".w"], bm[pre + ".b"], {1, 1}, {pad, pad}, kind);
  }
  if (c.norm == NormVariant::qn) {
    y = ad::quat_norm(y, bm[pre + ".norm_gamma"], bm[pre + ".norm_beta"], c.groups);
  } else {
    y = ad::reshape(
        ad::group_norm(ad::reshape(y, {4 * D, H, W}), 4 * c.groups, bm[pre + ".norm_gamma"], bm[pre + ".norm_beta"]), s);
  }
  return ad::relu(y);
}

}  // namespace detail

/// Decoder logits [2,H,W] for one support shot, given that shot's
/// hypercorrelation (one tensor per level) and the query skips.
inline Var shot_logits(const BoundModel& bm, const std::vector<Tensor>& hypercorr, const std::vector<Tensor>& skips) {
  const Config& c = bm.config();
  Tape& t = bm.tape();
  const std::size_t P = c.extents.size();
  if (hypercorr.size() != P)
    throw ShapeError("model: " + std::to_string(hypercorr.size()) + " correlation levels, config has " +
                     std::to_string(P));
  std::vector<Var> levels;
  for (std::size_t p = 0; p < P; ++p) {
    const std::string lp = "L" + std::to_string(p);
    const auto sched = cam_schedule(c.layers[p], c.D, c.extents[p]);
    Var x = t.leaf(hypercorr[p]);
    for (std::size_t i = 0; i < sched.size(); ++i) {
      const std::string pre = "cam." + lp + ".layer" + std::to_string(i);
      x = ad::separable_conv4d(x, bm[pre + ".kq"], bm[pre + ".ks"], 1, sched[i].support_stride, 1, 1);
      x = ad::relu(ad::group_norm(x, c.groups, bm[pre + ".gn_gamma"], bm[pre + ".gn_beta"]));
    }
    Var q = ad::encapsulate(x);
    for (std::size_t b = 0; b < c.qclm_depth; ++b)
      q = detail::model_block(bm, "qclm." + lp + ".block" + std::to_string(b), q);
    levels.push_back(q);
  }
  Var q = levels[P - 1];
  for (std::size_t p = P - 1; p-- > 0;) {
    const Shape& fs = levels[p].value().shape();
    detail::check_merge_extents(q.value().extent(2), q.value().extent(3), fs[2], fs[3]);
    q = detail::model_block(bm, "qam.L" + std::to_string(p), ad::add(levels[p], ad::quat_upsample_to(q, fs[2], fs[3])));
  }
  Var fr = ad::quat_to_real(q);
  ad::DecoderVars dv;
  for (std::size_t i = 0; i < c.refine.size(); ++i) {
    const std::string s = std::to_string(i);
    dv.projections.emplace_back(bm["dec.proj" + s + ".w"], bm["dec.proj" + s + ".b"]);
    dv.refines.emplace_back(bm["dec.refine" + s + ".w"], bm["dec.refine" + s + ".b"]);
  }
  dv.head = {bm["dec.head.w"], bm["dec.head.b"]};
  std::vector<Var> sk;
  for (const auto& s : skips) sk.push_back(t.leaf(s));
  return ad::decode_logits(fr, sk, dv);
}

inline void check_episode(const Episode& ep, const Config& c) {
  ep.validate();
  const std::size_t n = c.mask_extent();
  if (ep.query.mask.extent(0) != n || ep.query.mask.extent(1) != n)
    throw ShapeError("episode: mask " + shape_str(ep.query.mask.shape()) + " does not match configured extent " +
                     std::to_string(n));
  if (ep.query.skips.size() != c.refine.size())
    throw ShapeError("episode: " + std::to_string(ep.query.skips.size()) + " query skips, config expects " +
                     std::to_string(c.refine.size()));
}

inline std::vector<Tensor> shot_hypercorrelation(const Episode& ep, std::size_t shot) {
  const auto& s = ep.supports.at(shot);
  return build_hypercorrelation(ep.query.features, mask_support(s.features, s.mask));
}

/// Prior maps per shot from the coarsest level's last feature map.
inline std::vector<Tensor> episode_priors(const Episode& ep) {
  std::vector<Tensor> masked;
  for (const auto& s : ep.supports) {
    const auto& last = s.features.levels.back().back();
    const Tensor m = resize_nearest(s.mask, last.extent(1), last.extent(2));
    Tensor f = last;
    const std::size_t hw = m.size();
    for (std::size_t c = 0; c < f.extent(0); ++c)
      for (std::size_t k = 0; k < hw; ++k) f[c * hw + k] *= m[k];
    masked.push_back(std::move(f));
  }
  return prior_weights(ep.query.features.levels.back().back(), masked);
}

struct EpisodeOutput {
  std::vector<Tensor> soft;    // per shot [2,H,W]
  std::vector<Tensor> priors;  // per shot [h,w]
  Tensor fused_fg;             // [H,W]
  Tensor mask;                 // [H,W] binary
};

inline EpisodeOutput fuse_outputs(std::vector<Tensor> soft, std::vector<Tensor> priors, double tau) {
  EpisodeOutput out{std::move(soft), std::move(priors), {}, {}};
  std::vector<Tensor> fg;
  for (const auto& s : out.soft) fg.push_back(foreground(s));
  out.fused_fg = fuse_kshot_soft(fg, out.priors);
  out.mask = threshold(out.fused_fg, tau);
  return out;
}

/// Per-shot soft masks and the prior-fused binary mask for one episode.
inline EpisodeOutput forward_episode(const Episode& ep, const Model& model) {
  const Config& c = model.config();
  check_episode(ep, c);
  Tape t;
  BoundModel bm(t, model, false);
  std::vector<Tensor> soft;
  for (std::size_t k = 0; k < ep.shots(); ++k)
    soft.push_back(softmax(shot_logits(bm, shot_hypercorrelation(ep, k), ep.query.skips).value(), 0));
  return fuse_outputs(std::move(soft), episode_priors(ep), c.tau);
}

/// Seeded synthetic training set: episode i uses seed + i.
inline std::vector<Episode> toy_episodes(const Config& c) {
  std::vector<Episode> eps;
  for (std::size_t i = 0; i < c.episodes; ++i) eps.push_back(synth_episode(c.seed + i, c.K, c.episode_spec()));
  return eps;
}

struct TrainResult {
  std::vector<double> loss;
  std::vector<double> miou;
  bool diverged = false;
  std::size_t diverged_step = 0;
};

/// Adam on the mean per-shot cross-entropy over `episodes`. Logs
/// `step,loss,miou` per step; loss and mIoU describe the weights before the step.
inline TrainResult train(Model& model, const std::vector<Episode>& episodes, std::size_t steps, double lr,
                         std::ostream* log = nullptr) {
  const Config& c = model.config();
  for (const auto& ep : episodes) check_episode(ep, c);
  std::vector<std::vector<std::vector<Tensor>>> hc(episodes.size());
  std::vector<std::vector<Tensor>> priors;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    for (std::size_t k = 0; k < episodes[e].shots(); ++k) hc[e].push_back(shot_hypercorrelation(episodes[e], k));
    priors.push_back(episode_priors(episodes[e]));
  }
  AdamConfig acfg;
  acfg.lr = lr;
  AdamState state;
  TrainResult r;
  if (log) *log << "step,loss,miou\n";
  Tape t;
  for (std::size_t step = 0; step < steps; ++step) {
    t.reset();
    BoundModel bm(t, model, true);
    MetricsAccumulator acc;
    std::vector<Var> terms;
    for (std::size_t e = 0; e < episodes.size(); ++e) {
      std::vector<Tensor> soft;
      for (std::size_t k = 0; k < episodes[e].shots(); ++k) {
        Var logits = shot_logits(bm, hc[e][k], episodes[e].query.skips);
        soft.push_back(softmax(logits.value(), 0));
        terms.push_back(ad::softmax_cross_entropy(logits, episodes[e].query.mask));
      }
      acc.add(fuse_outputs(std::move(soft), priors[e], c.tau).mask, episodes[e].query.mask, episodes[e].class_id);
    }
    Var loss = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) loss = ad::add(loss, terms[i]);
    loss = ad::scale(loss, 1.0 / static_cast<double>(terms.size()));
    const double lv = loss.value()[0], mv = miou(acc);
    if (log) *log << step << ',' << lv << ',' << mv << '\n';
    if (!std::isfinite(lv)) {
      r.diverged = true;
      r.diverged_step = step;
      return r;
    }
    r.loss.push_back(lv);
    r.miou.push_back(mv);
    t.backward(loss);
    auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].grad = bm.vars()[i].grad();
    adam_step(params, acfg, state);
  }
  return r;
}

inline std::ostream& operator<<(std::ostream& os, const EpisodeOutput& o) {
  std::size_t fg = 0;
  for (double v : o.mask.data()) fg += v > 0.5;
  return os << "shots=" << o.soft.size() << " extent=" << o.mask.extent(0) << "x" << o.mask.extent(1)
            << " foreground=" << fg;
}

}  // namespace qclnet

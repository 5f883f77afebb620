// qclnet command line: verify | forward | train-toy | bench.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "qclnet/config.hpp"
#include "qclnet/episode.hpp"
#include "qclnet/model.hpp"
#include "qclnet/verify.hpp"
#include "qclnet/weights.hpp"

namespace {

enum Exit : int { kOk = 0, kVerifyFailed = 1, kDiverged = 2, kUsage = 3 };

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string suite;
  std::string out;
  std::string weights;
};

qclnet::Config resolve(const Args& a) {
  qclnet::Config c = a.config.empty() ? qclnet::Config{} : qclnet::load_config(a.config);
  if (a.seed) c.seed = *a.seed;
  c.validate();
  return c;
}

void write_pgm(const qclnet::Tensor& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw qclnet::FormatError("cannot open '" + path + "' for writing");
  out << "P5\n" << mask.extent(1) << ' ' << mask.extent(0) << "\n255\n";
  for (double v : mask.data()) out.put(static_cast<char>(v > 0.5 ? 255 : 0));
}

int cmd_verify(const Args& a) {
  qclnet::verify::Options opt;
  opt.config = resolve(a);
  bool ok = true;
  for (const auto& r : qclnet::verify::run_suites(opt, a.suite)) {
    std::cout << qclnet::verify::format(r) << std::endl;
    ok = ok && r.passed;
  }
  return ok ? kOk : kVerifyFailed;
}

int cmd_forward(const Args& a) {
  const qclnet::Config c = resolve(a);
  const qclnet::Model model = a.weights.empty() ? qclnet::Model::initialized(c, c.seed + 1) : qclnet::load_model(c, a.weights);
  const qclnet::Episode ep = qclnet::synth_episode(c.seed, c.K, c.episode_spec());
  const auto out = qclnet::forward_episode(ep, model);
  qclnet::MetricsAccumulator acc;
  acc.add(out.mask, ep.query.mask, ep.class_id);
  std::cout << "episode seed=" << c.seed << " class=" << ep.class_id << " " << out << " miou=" << qclnet::miou(acc)
            << " fb_iou=" << qclnet::fb_iou(acc) << "\n";
  for (std::size_t k = 0; k < out.soft.size(); ++k) {
    qclnet::MetricsAccumulator shot;
    shot.add(qclnet::binarize(out.soft[k]), ep.query.mask, ep.class_id);
    std::cout << "shot " << k << " miou=" << qclnet::miou(shot) << "\n";
  }
  if (!a.out.empty()) {
    write_pgm(out.mask, a.out);
    std::cout << "mask written to " << a.out << "\n";
  }
  return kOk;
}

int cmd_train_toy(const Args& a) {
  const qclnet::Config c = resolve(a);
  qclnet::Model model = qclnet::Model::initialized(c, c.seed + 1);
  std::cout << std::setprecision(10);
  const auto r = qclnet::train(model, qclnet::toy_episodes(c), c.steps, c.lr, &std::cout);
  if (r.diverged) {
    std::cerr << "error: loss diverged at step " << r.diverged_step << "\n";
    return kDiverged;
  }
  const std::string path = a.out.empty() ? "qclnet_weights.qclw" : a.out;
  qclnet::save_weights(model, path);
  std::cerr << "weights written to " << path << "\n";
  return kOk;
}

int cmd_bench(const Args& a) {
  using namespace qclnet;
  const Config c = resolve(a);
  Config qc = c, rc = c, gc = c;
  qc.kernel = KernelVariant::quaternion;
  rc.kernel = KernelVariant::real;
  gc.kernel = KernelVariant::group;
  const Model qm(qc), rm(rc), gm(gc);
  std::cout << "layer,quaternion,real,group,real/quaternion\n";
  for (const auto& n : qm.qclm_weight_names()) {
    const auto q = qm.value(n).size(), r = rm.value(n).size(), g = gm.value(n).size();
    std::cout << n << ',' << q << ',' << r << ',' << g << ',' << std::fixed << std::setprecision(3)
              << static_cast<double>(r) / static_cast<double>(q) << std::defaultfloat << "\n";
  }
  std::cout << "total," << qm.scalar_count() << ',' << rm.scalar_count() << ',' << gm.scalar_count() << ",\n";

  std::cout << "variant,extents,forward_ms\n";
  for (KernelVariant v : {KernelVariant::quaternion, KernelVariant::real, KernelVariant::group}) {
    // Growing inputs: the coarsest level alone, then one more finer level at a time.
    for (std::size_t keep = 1; keep <= c.extents.size(); ++keep) {
      Config b = c;
      b.kernel = v;
      b.extents.assign(c.extents.end() - static_cast<long>(keep), c.extents.end());
      b.layers.assign(c.layers.end() - static_cast<long>(keep), c.layers.end());
      const Model m = Model::initialized(b, b.seed + 1);
      const Episode ep = synth_episode(b.seed, b.K, b.episode_spec());
      const auto t0 = std::chrono::steady_clock::now();
      (void)forward_episode(ep, m);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      std::cout << to_string(v) << ',';
      for (std::size_t i = 0; i < b.extents.size(); ++i) std::cout << (i ? "/" : "") << b.extents[i];
      std::cout << ',' << std::fixed << std::setprecision(2) << ms << std::defaultfloat << "\n";
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quaternion correlation learning for few-shot segmentation"};
  app.require_subcommand(1);
  Args args;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "Config file (key = value lines)");
    sub->add_option("--seed", args.seed, "Override the config seed");
    sub->add_option("--out", args.out, "Output path");
  };
  auto* verify = app.add_subcommand("verify", "Run invariant and oracle suites");
  add_common(verify);
  verify->add_option("--suite", args.suite, "Run only this suite");
  auto* forward = app.add_subcommand("forward", "Segment one synthetic episode");
  add_common(forward);
  forward->add_option("--weights", args.weights, "Weight file (default: fresh initialization)");
  auto* train = app.add_subcommand("train-toy", "Overfit seeded synthetic episodes");
  add_common(train);
  auto* bench = app.add_subcommand("bench", "Parameter counts and forward timings");
  add_common(bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*verify) return cmd_verify(args);
    if (*forward) return cmd_forward(args);
    if (*train) return cmd_train_toy(args);
    if (*bench) return cmd_bench(args);
  } catch (const qclnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "qclnet/config.hpp"
#include "qclnet/verify.hpp"
#include "qclnet/weights.hpp"
#include "test_util.hpp"

using namespace qclnet;
namespace fs = std::filesystem;

namespace {

Config parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in, "test.cfg");
}

std::string config_error(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

fs::path scratch(const std::string& name) { return fs::temp_directory_path() / ("qclnet_test_" + name); }

struct CliResult {
  int code;
  std::string out;
};

CliResult run_cli(const std::string& args) {
  const fs::path log = scratch("cli_out.txt");
  const std::string cmd = std::string(QCLNET_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

Config tiny() { return verify::detail::tiny_config(); }

}  // namespace

TEST(Config, EmptyFileGivesDefaults) {
  const Config c = parse("");
  EXPECT_EQ(c.D, 64u);
  EXPECT_EQ(c.tau, 0.5);
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.K, 1u);
  EXPECT_EQ(c.groups, 4u);
}

TEST(Config, ValuesAndComments) {
  const Config c = parse("# comment\nD = 32   # inline\n\nextents = 16, 8, 4\nkernel = group\nnorm = gn\ntau=0.6\n");
  EXPECT_EQ(c.D, 32u);
  EXPECT_EQ(c.extents, (std::vector<std::size_t>{16, 8, 4}));
  EXPECT_EQ(c.kernel, KernelVariant::group);
  EXPECT_EQ(c.norm, NormVariant::gn);
  EXPECT_EQ(c.tau, 0.6);
}

TEST(Config, ErrorsNameKeyAndLine) {
  const std::string neg = config_error("D = -1\n");
  EXPECT_NE(neg.find("D"), std::string::npos) << neg;
  EXPECT_NE(neg.find("test.cfg:1"), std::string::npos) << neg;
  EXPECT_NE(config_error("\nbogus = 3\n").find("test.cfg:2"), std::string::npos);
  EXPECT_NE(config_error("\nbogus = 3\n").find("bogus"), std::string::npos);
  EXPECT_NE(config_error("D 3\n").find("key = value"), std::string::npos);
  EXPECT_NE(config_error("D = 30\n").find("D:"), std::string::npos);  // not divisible by 4 groups
  EXPECT_NE(config_error("tau = 1.5\n").find("tau"), std::string::npos);
  EXPECT_NE(config_error("extents = 8, 3\nlayers = 1, 1\n").find("extents"), std::string::npos);
}

TEST(Weights, RoundTripBitExact) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> rank(1, 4), ext(1, 4);
  for (int n = 0; n < 10; ++n) {
    NamedTensors ts;
    for (int i = 0; i < 3; ++i) {
      Shape s(rank(rng));
      for (auto& e : s) e = ext(rng);
      ts.emplace_back("p" + std::to_string(i), qt::randn(rng, s, 1e6));
    }
    const fs::path p = scratch("roundtrip.qclw");
    save_weights(ts, p.string());
    EXPECT_EQ(load_weights(p.string()), ts);
  }
}

TEST(Weights, LayoutIsLittleEndian) {
  const std::string b = serialize_weights({{"ab", Tensor({1}, {1.0})}});
  ASSERT_EQ(b.size(), 4u + 4 + 4 + 4 + 2 + 4 + 8 + 8);
  EXPECT_EQ(b.substr(0, 4), "QCLW");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 1);
  EXPECT_EQ(b[12], 2);
  EXPECT_EQ(b.substr(16, 2), "ab");
  EXPECT_EQ(static_cast<unsigned char>(b[b.size() - 1]), 0x3F);  // 1.0 = 0x3FF0...
}

TEST(Weights, DistinctErrors) {
  const std::string b = serialize_weights({{"w", Tensor({2, 2}, 1.5)}});
  try {
    deserialize_weights(b.substr(0, b.size() - 3));
    FAIL();
  } catch (const TruncatedError& e) {
    EXPECT_NE(std::string(e.what()).find("payload"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
  EXPECT_THROW(deserialize_weights("XXXX" + b.substr(4)), BadMagicError);
  std::string v = b;
  v[4] = 9;
  EXPECT_THROW(deserialize_weights(v), VersionError);
  EXPECT_THROW(deserialize_weights(b + "x"), FormatError);
  EXPECT_THROW(serialize_weights({{"a", Tensor({1})}, {"a", Tensor({1})}}), FormatError);
}

TEST(Weights, ShapeMismatchNamesFirstTensor) {
  Config c64 = tiny(), c32 = tiny();
  c64.D = 8;
  c32.D = 4;
  const fs::path p = scratch("d8.qclw");
  save_weights(Model::initialized(c64, 1), p.string());
  try {
    load_model(c32, p.string());
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("cam.L0.layer0.kq"), std::string::npos) << e.what();
  }
  const Model back = load_model(c64, p.string());
  EXPECT_EQ(named_tensors(back), named_tensors(Model::initialized(c64, 1)));
}

TEST(Model, ParameterCountRatios) {
  Config q = tiny(), r = tiny(), g = tiny();
  r.kernel = KernelVariant::real;
  g.kernel = KernelVariant::group;
  const Model mq(q), mr(r), mg(g);
  for (const auto& n : mq.qclm_weight_names()) {
    EXPECT_EQ(mr.value(n).size(), 4 * mq.value(n).size()) << n;
    EXPECT_EQ(mg.value(n).size(), mq.value(n).size()) << n;
  }
}

TEST(Verify, AllSuitesPassOnTinyConfig) {
  verify::Options opt;
  opt.config = tiny();
  for (const auto& r : verify::run_suites(opt)) EXPECT_TRUE(r.passed) << verify::format(r);
  EXPECT_EQ(verify::run_suites(opt, "quat_core").size(), 1u);
  EXPECT_THROW(verify::run_suites(opt, "nope"), ConfigError);
}

TEST(Verify, CorruptedSignFailsOracle) {
  verify::Options opt;
  opt.config = tiny();
  // Flip the sign of the Wz * y term feeding the x output plane.
  opt.quat_conv = [](const QuatTensor& q, const QuatConvParams& p, std::pair<std::size_t, std::size_t> s,
                     std::pair<std::size_t, std::size_t> pad) {
    QuatTensor out = quat_conv2d(q, p, s, pad);
    out.plane(1) = out.plane(1) + 2.0 * conv2d(q.y(), Conv2dParams{p.weight[3], Tensor(), s, pad});
    return out;
  };
  const auto r = verify::run_suites(opt, "conv_oracle");
  ASSERT_EQ(r.size(), 1u);
  EXPECT_FALSE(r[0].passed);
}

TEST(Cli, VerifySuiteExitCodes) {
  const CliResult ok = run_cli("verify --suite quat_core");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("quat_core PASS"), std::string::npos) << ok.out;
  EXPECT_EQ(ok.out.find("tensor_ops"), std::string::npos) << ok.out;
  EXPECT_EQ(run_cli("verify --suite missing").code, 3);
  EXPECT_EQ(run_cli("").code, 3);
  EXPECT_EQ(run_cli("frobnicate").code, 3);
}

TEST(Cli, ConfigErrorExitCode) {
  const fs::path p = scratch("bad.cfg");
  std::ofstream(p) << "D = -1\n";
  const CliResult r = run_cli("forward --config " + p.string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("D"), std::string::npos) << r.out;
}

TEST(Cli, TrainForwardAndBench) {
  const fs::path cfg = scratch("tiny.cfg"), w = scratch("tiny.qclw"), pgm = scratch("mask.pgm");
  std::ofstream(cfg) << "extents = 4, 2\nlayers = 2, 1\nchannels = 4\nD = 4\ngroups = 2\nqclm_depth = 1\n"
                        "skip_channels = 2\nskip_proj = 2\nrefine = 3\nsteps = 3\nlr = 0.01\n";
  const CliResult t = run_cli("train-toy --config " + cfg.string() + " --out " + w.string());
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_NE(t.out.find("step,loss,miou\n0,"), std::string::npos) << t.out;
  EXPECT_TRUE(fs::exists(w));
  const CliResult again = run_cli("train-toy --config " + cfg.string() + " --out " + w.string());
  EXPECT_EQ(again.out, t.out);

  const CliResult f = run_cli("forward --config " + cfg.string() + " --weights " + w.string() + " --out " + pgm.string());
  ASSERT_EQ(f.code, 0) << f.out;
  std::ifstream in(pgm, std::ios::binary);
  std::string magic;
  std::size_t wdt = 0, hgt = 0, maxv = 0;
  in >> magic >> wdt >> hgt >> maxv;
  in.get();
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(wdt, 8u);
  EXPECT_EQ(hgt, 8u);
  EXPECT_EQ(maxv, 255u);
  std::string px((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ASSERT_EQ(px.size(), 64u);
  for (unsigned char v : px) EXPECT_TRUE(v == 0 || v == 255);

  const CliResult b = run_cli("bench --config " + cfg.string());
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_NE(b.out.find(",4.000"), std::string::npos) << b.out;
  EXPECT_NE(b.out.find("variant,extents,forward_ms"), std::string::npos) << b.out;
}

#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qclnet/episode.hpp"
#include "qclnet/error.hpp"

namespace qclnet {

enum class KernelVariant { quaternion, group, real };
enum class NormVariant { qn, gn };

inline const char* to_string(KernelVariant k) {
  switch (k) {
    case KernelVariant::quaternion: return "quaternion";
    case KernelVariant::group: return "group";
    case KernelVariant::real: return "real";
  }
  return "?";
}

inline const char* to_string(NormVariant n) { return n == NormVariant::qn ? "qn" : "gn"; }

struct Config {
  std::vector<std::size_t> extents{8, 4, 2};
  std::vector<std::size_t> layers{2, 3, 2};
  std::size_t channels = 16;  // backbone feature width
  std::size_t D = 64;
  std::size_t groups = 4;
  std::size_t qclm_depth = 2;
  std::size_t skip_channels = 16;
  std::size_t skip_proj = 48;
  std::vector<std::size_t> refine{16, 16};  // one 3x3 refine width per skip
  double tau = 0.5;
  std::size_t K = 1;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  std::size_t steps = 300;
  std::size_t episodes = 1;  // training set size for train-toy
  KernelVariant kernel = KernelVariant::quaternion;
  NormVariant norm = NormVariant::qn;

  PyramidSpec pyramid() const { return {extents, layers, channels}; }
  EpisodeSpec episode_spec() const { return {pyramid(), refine.size(), skip_channels}; }
  std::size_t mask_extent() const { return episode_spec().image_extent(); }

  void validate() const {
    auto need = [](bool ok, const char* key, const std::string& why) {
      if (!ok) throw ConfigError(std::string(key) + ": " + why);
    };
    need(!extents.empty(), "extents", "at least one pyramid level is required");
    for (auto e : extents) need(e > 0, "extents", "must be positive");
    need(layers.size() == extents.size(), "layers", "needs one entry per pyramid level");
    for (auto l : layers) need(l > 0, "layers", "must be positive");
    for (std::size_t p = 1; p < extents.size(); ++p)
      need(extents[p] == (extents[p - 1] + 1) / 2, "extents", "each level must halve the previous one");
    need(extents.back() >= 2, "extents", "coarsest level must be at least 2");
    need(channels > 0, "channels", "must be positive");
    need(D > 0, "D", "must be positive");
    need(groups > 0, "groups", "must be positive");
    need(D % groups == 0, "D", "must be divisible by groups");
    need(qclm_depth > 0, "qclm_depth", "must be positive");
    need(skip_channels > 0, "skip_channels", "must be positive");
    need(skip_proj > 0, "skip_proj", "must be positive");
    for (auto r : refine) need(r > 0, "refine", "widths must be positive");
    need(tau > 0.0 && tau < 1.0, "tau", "must lie in (0, 1)");
    need(K > 0, "K", "must be positive");
    need(lr >= 0.0, "lr", "must be non-negative");
    need(episodes > 0, "episodes", "must be positive");
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline long long parse_int(std::string_view v, std::string_view key) {
  long long out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("expected an integer for " + std::string(key) + ", got '" + std::string(v) + "'");
  return out;
}

inline double parse_real(std::string_view v, std::string_view key) {
  // from_chars<double> is missing from older libstdc++; istringstream is enough here.
  std::istringstream in{std::string(v)};
  double out = 0.0;
  in >> out;
  if (!in || !in.eof() || !std::isfinite(out))
    throw ConfigError("expected a number for " + std::string(key) + ", got '" + std::string(v) + "'");
  return out;
}

inline std::size_t parse_count(std::string_view v, std::string_view key) {
  const long long n = parse_int(v, key);
  if (n < 0) throw ConfigError(std::string(key) + ": must be non-negative, got " + std::to_string(n));
  return static_cast<std::size_t>(n);
}

inline std::vector<std::size_t> parse_list(std::string_view v, std::string_view key) {
  std::vector<std::size_t> out;
  while (true) {
    const auto comma = v.find(',');
    out.push_back(parse_count(trim(v.substr(0, comma)), key));
    if (comma == std::string_view::npos) break;
    v = v.substr(comma + 1);
  }
  return out;
}

inline void apply(Config& c, std::string_view key, std::string_view v) {
  if (key == "extents") c.extents = parse_list(v, key);
  else if (key == "layers") c.layers = parse_list(v, key);
  else if (key == "channels") c.channels = parse_count(v, key);
  else if (key == "D") c.D = parse_count(v, key);
  else if (key == "groups") c.groups = parse_count(v, key);
  else if (key == "qclm_depth") c.qclm_depth = parse_count(v, key);
  else if (key == "skip_channels") c.skip_channels = parse_count(v, key);
  else if (key == "skip_proj") c.skip_proj = parse_count(v, key);
  else if (key == "refine") c.refine = parse_list(v, key);
  else if (key == "tau") c.tau = parse_real(v, key);
  else if (key == "K") c.K = parse_count(v, key);
  else if (key == "seed") c.seed = parse_count(v, key);
  else if (key == "lr") c.lr = parse_real(v, key);
  else if (key == "steps") c.steps = parse_count(v, key);
  else if (key == "episodes") c.episodes = parse_count(v, key);
  else if (key == "kernel") {
    if (v == "quaternion") c.kernel = KernelVariant::quaternion;
    else if (v == "group") c.kernel = KernelVariant::group;
    else if (v == "real") c.kernel = KernelVariant::real;
    else throw ConfigError("kernel: expected quaternion, group or real, got '" + std::string(v) + "'");
  } else if (key == "norm") {
    if (v == "qn") c.norm = NormVariant::qn;
    else if (v == "gn") c.norm = NormVariant::gn;
    else throw ConfigError("norm: expected qn or gn, got '" + std::string(v) + "'");
  } else {
    throw ConfigError("unknown key '" + std::string(key) + "'");
  }
}

}  // namespace detail

/// Parses `key = value` lines; `#` starts a comment. Missing keys keep defaults.
inline Config parse_config(std::istream& in, const std::string& origin = "<config>") {
  Config c;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    std::string_view s = line;
    if (const auto h = s.find('#'); h != std::string_view::npos) s = s.substr(0, h);
    s = detail::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    const std::string where = origin + ":" + std::to_string(n) + ": ";
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    const auto key = detail::trim(s.substr(0, eq)), value = detail::trim(s.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError(where + "expected 'key = value'");
    try {
      detail::apply(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  c.validate();
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, path);
}

}  // namespace qclnet

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "qclnet/error.hpp"
#include "qclnet/model.hpp"
#include "qclnet/tensor.hpp"

namespace qclnet {

// Layout: "QCLW", u32 version, u32 count, then per tensor: u32 name length,
// name bytes, u32 rank, u64 extents, f64 payload. All little-endian.
inline constexpr char kWeightMagic[4] = {'Q', 'C', 'L', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

struct BadMagicError : FormatError {
  using FormatError::FormatError;
};
struct VersionError : FormatError {
  using FormatError::FormatError;
};
struct TruncatedError : FormatError {
  using FormatError::FormatError;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

template <class T>
void put_le(std::string& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  buf.append(b, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <class T>
  T get(const std::string& what) {
    need(sizeof(T), what);
    char b[sizeof(T)];
    std::memcpy(b, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const std::string& what) const {
    if (data_.size() - pos_ < n)
      throw TruncatedError("weights: truncated file: " + what + " needs " + std::to_string(n) + " bytes, " +
                           std::to_string(data_.size() - pos_) + " remain");
  }

  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_weights(const NamedTensors& tensors) {
  std::set<std::string> seen;
  std::string buf(kWeightMagic, 4);
  detail::put_le<std::uint32_t>(buf, kWeightVersion);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (!seen.insert(name).second) throw FormatError("weights: duplicate tensor name '" + name + "'");
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_le<std::uint64_t>(buf, e);
    for (double v : t.data()) detail::put_le<double>(buf, v);
  }
  return buf;
}

inline NamedTensors deserialize_weights(std::string data) {
  detail::Reader r(std::move(data));
  if (r.bytes(4, "magic") != std::string(kWeightMagic, 4)) throw BadMagicError("weights: bad magic, not a QCLW file");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kWeightVersion)
    throw VersionError("weights: format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kWeightVersion) + ")");
  const auto count = r.get<std::uint32_t>("tensor count");
  NamedTensors out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>("name length of tensor " + std::to_string(i));
    std::string name = r.bytes(len, "name of tensor " + std::to_string(i));
    if (!seen.insert(name).second) throw FormatError("weights: duplicate tensor name '" + name + "'");
    const auto rank = r.get<std::uint32_t>("rank of '" + name + "'");
    if (rank == 0) throw FormatError("weights: tensor '" + name + "' has rank 0");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      const auto v = r.get<std::uint64_t>("extents of '" + name + "'");
      if (v == 0) throw FormatError("weights: tensor '" + name + "' has a zero extent");
      e = static_cast<std::size_t>(v);
      n *= e;
    }
    r.need(n * sizeof(double), "payload of '" + name + "'");
    std::vector<double> vals(n);
    for (auto& v : vals) v = r.get<double>("payload of '" + name + "'");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(vals)));
  }
  if (!r.at_end()) throw FormatError("weights: trailing bytes after the last tensor");
  return out;
}

inline void save_weights(const NamedTensors& tensors, const std::string& path) {
  const std::string buf = serialize_weights(tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("weights: cannot open '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("weights: write to '" + path + "' failed");
}

inline NamedTensors load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("weights: cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_weights(std::move(data));
}

inline NamedTensors named_tensors(const Model& m) {
  NamedTensors out;
  for (const auto& p : m.parameters()) out.emplace_back(p.name, p.value);
  return out;
}

inline void save_weights(const Model& m, const std::string& path) { save_weights(named_tensors(m), path); }

/// Loads a weight file into a model built from `cfg`; shapes are checked
/// against the config and the first mismatch is reported by name.
inline Model load_model(const Config& cfg, const std::string& path) {
  Model m(cfg);
  m.assign(load_weights(path));
  return m;
}

}  // namespace qclnet

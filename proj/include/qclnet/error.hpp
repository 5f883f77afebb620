#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qclnet {

/// Tensor extents are incompatible with the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value or layer schedule is unusable.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input outside the mathematical domain of an operation (e.g. unit of zero).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Input data violates a documented value constraint (non-binary mask, k out of range).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse, such as running backward twice on the same tape.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed serialized data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

}  // namespace qclnet

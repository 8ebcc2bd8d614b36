#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flashsim {

/// Invalid configuration, shape mismatch or out-of-range argument.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A non-finite value appeared during training. Carries the index of the
/// first layer whose output went non-finite (or the layer count when only the
/// loss itself overflowed).
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t layer)
      : std::runtime_error(what), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

/// Malformed input file. `offset` is the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// A density target cannot be met even with every layer fully dense.
class InfeasibleTargetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flashsim

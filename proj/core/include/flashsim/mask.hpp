#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flashsim/model_spec.hpp"

namespace flashsim {

/// Per-layer binary masks over the weight tensors (biases are never masked).
/// Entry 1 means the weight is live.
class SparseMask {
 public:
  SparseMask() = default;
  /// One flat layer per entry of `sizes`, filled with `value`.
  SparseMask(const std::vector<std::size_t>& sizes, std::uint8_t value);

  static SparseMask ones(const ModelSpec& spec) { return SparseMask(spec.weight_counts(), 1); }
  static SparseMask zeros(const ModelSpec& spec) { return SparseMask(spec.weight_counts(), 0); }

  std::size_t layer_count() const noexcept { return layers_.size(); }
  std::size_t layer_size(std::size_t l) const { return layers_.at(l).size(); }
  std::size_t total_size() const;

  std::span<std::uint8_t> layer(std::size_t l) { return layers_.at(l); }
  std::span<const std::uint8_t> layer(std::size_t l) const { return layers_.at(l); }

  std::size_t nnz(std::size_t l) const;
  std::size_t nnz() const;
  std::vector<std::size_t> layer_nnz() const;
  double density() const;

  /// Same layer count and per-layer sizes.
  bool same_shape(const SparseMask& other) const;
  /// Elementwise OR; shapes must match.
  SparseMask& operator|=(const SparseMask& other);
  /// True when every live entry of *this is live in `other`.
  bool subset_of(const SparseMask& other) const;

  friend bool operator==(const SparseMask& a, const SparseMask& b) = default;

 private:
  std::vector<std::vector<std::uint8_t>> layers_;
};

/// floor(x) that tolerates representation error just below an integer, so
/// 0.29 * 100 counts as 29.
inline std::size_t floor_count(double x) {
  if (!(x > 0.0)) return 0;
  return static_cast<std::size_t>(std::floor(x + 1e-9 * std::max(1.0, x)));
}

/// Live count for density d over k slots: floor(d * k), at least 1, at most k.
inline std::size_t live_count(double d, std::size_t k) {
  return std::clamp<std::size_t>(floor_count(d * static_cast<double>(k)), 1, k);
}

}  // namespace flashsim

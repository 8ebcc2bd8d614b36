#include "flashsim/mask.hpp"

#include <algorithm>
#include <numeric>

#include "flashsim/error.hpp"

namespace flashsim {

SparseMask::SparseMask(const std::vector<std::size_t>& sizes, std::uint8_t value) {
  layers_.reserve(sizes.size());
  for (std::size_t n : sizes) layers_.emplace_back(n, value);
}

std::size_t SparseMask::total_size() const {
  std::size_t total = 0;
  for (const auto& l : layers_) total += l.size();
  return total;
}

std::size_t SparseMask::nnz(std::size_t l) const {
  const auto& layer = layers_.at(l);
  return static_cast<std::size_t>(std::count(layer.begin(), layer.end(), std::uint8_t{1}));
}

std::size_t SparseMask::nnz() const {
  std::size_t total = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) total += nnz(l);
  return total;
}

std::vector<std::size_t> SparseMask::layer_nnz() const {
  std::vector<std::size_t> out(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) out[l] = nnz(l);
  return out;
}

double SparseMask::density() const {
  const std::size_t total = total_size();
  return total == 0 ? 0.0 : static_cast<double>(nnz()) / static_cast<double>(total);
}

bool SparseMask::same_shape(const SparseMask& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (layers_[l].size() != other.layers_[l].size()) return false;
  }
  return true;
}

SparseMask& SparseMask::operator|=(const SparseMask& other) {
  if (!same_shape(other)) throw ConfigError("mask union: shape mismatch");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& dst = layers_[l];
    const auto& src = other.layers_[l];
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = dst[i] | src[i];
  }
  return *this;
}

bool SparseMask::subset_of(const SparseMask& other) const {
  if (!same_shape(other)) return false;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    for (std::size_t i = 0; i < layers_[l].size(); ++i) {
      if (layers_[l][i] && !other.layers_[l][i]) return false;
    }
  }
  return true;
}

}  // namespace flashsim

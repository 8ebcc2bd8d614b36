#include "flashsim/mask_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flashsim/error.hpp"

namespace flashsim {

namespace {

struct SetCounts {
  std::size_t intersection = 0;
  std::size_t union_size = 0;
};

SetCounts count_layer(const SparseMask& a, const SparseMask& b, std::size_t l) {
  SetCounts c;
  auto x = a.layer(l);
  auto y = b.layer(l);
  for (std::size_t i = 0; i < x.size(); ++i) {
    c.intersection += static_cast<std::size_t>(x[i] & y[i]);
    c.union_size += static_cast<std::size_t>(x[i] | y[i]);
  }
  return c;
}

double jaccard_distance(const SetCounts& c) {
  if (c.union_size == 0) return 0.0;
  return 1.0 - static_cast<double>(c.intersection) / static_cast<double>(c.union_size);
}

/// Layer positions ordered by |w| descending, then live-in-mask first, then
/// flat index ascending.
std::vector<std::size_t> magnitude_order(const MaskedModel& model, std::size_t l) {
  auto w = model.weights[l].data();
  auto m = model.mask.layer(l);
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const float fa = std::fabs(w[a]), fb = std::fabs(w[b]);
    if (fa != fb) return fa > fb;
    if (m[a] != m[b]) return m[a] > m[b];
    return a < b;
  });
  return idx;
}

void check_layers(const MaskedModel& server, std::size_t n) {
  if (n != server.weight_layer_count()) throw ConfigError("density list length does not match model layers");
}

}  // namespace

double sparse_mask_mismatch(const SparseMask& current, const SparseMask& previous) {
  if (!current.same_shape(previous)) throw ConfigError("sparse mask mismatch: mask shapes differ");
  SetCounts total;
  for (std::size_t l = 0; l < current.layer_count(); ++l) {
    const auto c = count_layer(current, previous, l);
    total.intersection += c.intersection;
    total.union_size += c.union_size;
  }
  return jaccard_distance(total);
}

double layer_sm(const SparseMask& current, const SparseMask& previous, std::size_t layer) {
  if (!current.same_shape(previous)) throw ConfigError("sparse mask mismatch: mask shapes differ");
  if (layer >= current.layer_count()) throw ConfigError("layer index out of range");
  return jaccard_distance(count_layer(current, previous, layer));
}

std::vector<double> recalibrate_density(std::span<const double> d_hat, std::span<const std::size_t> k, double d) {
  const std::size_t L = d_hat.size();
  if (L == 0 || k.size() != L) throw ConfigError("recalibrate_density: layer count mismatch");
  if (!(d > 0.0)) throw ConfigError("recalibrate_density: target density must be positive");
  double total = 0.0;
  double mass = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    if (!(d_hat[l] >= 0.0)) throw ConfigError("recalibrate_density: negative layer density");
    total += static_cast<double>(k[l]);
    mass += d_hat[l] * static_cast<double>(k[l]);
  }
  if (!(mass > 0.0)) throw ConfigError("recalibrate_density: sum of d_hat * k is zero");
  const double target = d * total;
  const double tol = 1e-9 * std::max(1.0, target);
  if (target > total + tol) {
    throw InfeasibleTargetError("target density " + std::to_string(d) + " needs more parameters than the model has");
  }

  std::vector<bool> clamped(L, false);
  double rf = 1.0;
  for (;;) {
    double fixed = 0.0, free_mass = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      if (clamped[l]) {
        fixed += static_cast<double>(k[l]);
      } else {
        free_mass += d_hat[l] * static_cast<double>(k[l]);
      }
    }
    const double remaining = target - fixed;
    if (!(free_mass > 0.0)) {
      if (remaining > tol) {
        throw InfeasibleTargetError("every layer with nonzero density is saturated below the target budget");
      }
      rf = 0.0;
      break;
    }
    rf = std::max(0.0, remaining) / free_mass;
    bool changed = false;
    for (std::size_t l = 0; l < L; ++l) {
      if (!clamped[l] && d_hat[l] * rf > 1.0) {
        clamped[l] = true;
        changed = true;
      }
    }
    if (!changed) break;
  }

  std::vector<double> d_c(L);
  for (std::size_t l = 0; l < L; ++l) d_c[l] = clamped[l] ? 1.0 : d_hat[l] * rf;
  return d_c;
}

SparseMask magnitude_subsample(const MaskedModel& server, std::span<const double> d_c) {
  check_layers(server, d_c.size());
  SparseMask mask(server.spec.weight_counts(), 0);
  for (std::size_t l = 0; l < d_c.size(); ++l) {
    const auto order = magnitude_order(server, l);
    const std::size_t n = live_count(d_c[l], order.size());
    auto m = mask.layer(l);
    for (std::size_t r = 0; r < n; ++r) m[order[r]] = 1;
  }
  return mask;
}

std::vector<SparseMask> hetero_subsample(const MaskedModel& server, std::span<const double> d_set,
                                         const SensitivityProfile& server_profile) {
  check_layers(server, server_profile.density.size());
  for (std::size_t i = 1; i < d_set.size(); ++i) {
    if (!(d_set[i - 1] < d_set[i])) throw ConfigError("hetero_subsample: density set must be strictly ascending");
  }
  const auto k = server.spec.weight_counts();
  std::vector<std::vector<double>> d_c;
  d_c.reserve(d_set.size());
  for (double di : d_set) d_c.push_back(recalibrate_density(server_profile.density, k, di));

  std::vector<SparseMask> masks(d_set.size(), SparseMask(k, 0));
  for (std::size_t l = 0; l < k.size(); ++l) {
    const auto order = magnitude_order(server, l);
    for (std::size_t i = 0; i < d_set.size(); ++i) {
      const std::size_t n = live_count(d_c[i][l], k[l]);
      auto m = masks[i].layer(l);
      for (std::size_t r = 0; r < n; ++r) m[order[r]] = 1;
    }
  }
  return masks;
}

NestedSample nested_mask_sample(const SparseMask& parent, std::span<const double> d_c, Rng& rng) {
  const std::size_t L = parent.layer_count();
  if (d_c.size() != L) throw ConfigError("nested_mask_sample: density list length does not match mask");
  std::vector<std::size_t> target(L), avail(L);
  std::size_t excess = 0;
  for (std::size_t l = 0; l < L; ++l) {
    if (!(d_c[l] > 0.0 && d_c[l] <= 1.0)) throw ConfigError("nested_mask_sample: layer density must lie in (0, 1]");
    avail[l] = parent.nnz(l);
    target[l] = live_count(d_c[l], parent.layer_size(l));
    if (target[l] > avail[l]) {
      excess += target[l] - avail[l];
      target[l] = avail[l];
    }
  }
  NestedSample out;
  out.redistributed = excess;
  for (std::size_t l = 0; l < L && excess > 0; ++l) {
    const std::size_t extra = std::min(excess, avail[l] - target[l]);
    target[l] += extra;
    excess -= extra;
  }

  std::vector<std::size_t> sizes(L);
  for (std::size_t l = 0; l < L; ++l) sizes[l] = parent.layer_size(l);
  out.mask = SparseMask(sizes, 0);
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<std::size_t> live;
    live.reserve(avail[l]);
    auto p = parent.layer(l);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i]) live.push_back(i);
    }
    auto m = out.mask.layer(l);
    for (std::size_t i = 0; i < target[l]; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, live.size() - 1);
      std::swap(live[i], live[pick(rng)]);
      m[live[i]] = 1;
    }
  }
  return out;
}

}  // namespace flashsim

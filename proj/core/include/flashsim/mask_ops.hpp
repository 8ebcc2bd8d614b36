#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flashsim/engine.hpp"
#include "flashsim/mask.hpp"
#include "flashsim/rng.hpp"
#include "flashsim/sparse_learner.hpp"

namespace flashsim {

/// Jaccard distance between the live sets of two masks, pooled over all
/// layers: 1 - |A & B| / |A | B|. Zero when both masks are empty.
double sparse_mask_mismatch(const SparseMask& current, const SparseMask& previous);

/// The same distance restricted to weight layer `layer`.
double layer_sm(const SparseMask& current, const SparseMask& previous, std::size_t layer);

/// Rescales averaged layer densities so the global budget equals d * K:
/// r_f = d * K / sum(d_hat^l * k^l), d_c^l = d_hat^l * r_f. Layers pushed
/// above 1 are clamped to 1 and r_f is recomputed over the remaining layers
/// until nothing changes. Throws InfeasibleTargetError when d * K exceeds the
/// layer sizes, ConfigError when sum(d_hat^l * k^l) is zero.
std::vector<double> recalibrate_density(std::span<const double> d_hat, std::span<const std::size_t> k, double d);

/// Per layer, keeps the floor(d_c^l * k^l) (at least one) positions of the
/// server model with the largest |w|. Ties prefer positions live in the
/// server's current mask, then the lowest flat index.
SparseMask magnitude_subsample(const MaskedModel& server, std::span<const double> d_c);

/// One nested mask per density in the ascending `d_set`. Each density is
/// recalibrated against the server model's own layer densities (so
/// r_f_i = d_i / D_s when no layer saturates) and takes the top-|w| prefix of
/// the same per-layer ordering, which makes mask(d_i) a subset of mask(d_j)
/// for d_i <= d_j.
std::vector<SparseMask> hetero_subsample(const MaskedModel& server, std::span<const double> d_set,
                                         const SensitivityProfile& server_profile);

struct NestedSample {
  SparseMask mask;
  /// Live weights moved to another layer because the parent layer had too
  /// few live positions for its target.
  std::size_t redistributed = 0;
};

/// Draws a child mask inside `parent`: layer l gets floor(d_c^l * k^l) (at
/// least one) positions chosen uniformly among the parent's live ones.
/// Targets above a layer's parent count are capped and the excess spread over
/// layers with spare parent capacity.
NestedSample nested_mask_sample(const SparseMask& parent, std::span<const double> d_c, Rng& rng);

}  // namespace flashsim

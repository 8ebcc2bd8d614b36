#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flashsim/data.hpp"
#include "flashsim/engine.hpp"
#include "flashsim/mask.hpp"
#include "flashsim/rng.hpp"

namespace flashsim {

/// Per-layer density d^l = nnz / k^l of a sparse model, the pruning
/// sensitivity proxy.
struct SensitivityProfile {
  std::vector<double> density;
  std::vector<std::size_t> params;
};

/// Uniform-density random mask: floor(d * k^l) live weights per layer at
/// uniformly random positions, never fewer than one.
SparseMask init_random_mask(const ModelSpec& spec, double density, Rng& rng);

/// Random mask with per-layer densities d_c^l (same counting rule).
SparseMask init_sensitivity_mask(std::span<const double> layer_density, const ModelSpec& spec, Rng& rng);

struct PruneResult {
  SparseMask mask;
  std::vector<std::size_t> pruned;  // per layer
  /// Flat indices of pruned weights, per layer, ascending.
  std::vector<std::vector<std::size_t>> positions;

  std::size_t total() const;
};

/// Masks out the floor(p_r * nnz_l) live weights with the smallest |w| in
/// every layer (ties: lowest flat index), keeping at least one live weight
/// per layer. Zeroes the pruned weights in `model`.
PruneResult prune_step(MaskedModel& model, double prune_rate);

/// Layer scores proportional to the summed |w| of live weights; sum to 1.
/// Falls back to uniform scores when every live weight is zero.
std::vector<double> rank_layers(const MaskedModel& model);

/// floor(budget * score) per layer, remainder to the largest fractional parts
/// (ties: lower layer index).
std::vector<std::size_t> regrow_quotas(std::span<const double> scores, std::size_t budget);

struct RegrowResult {
  SparseMask mask;
  std::vector<std::size_t> grown;  // per layer
  std::size_t shortfall = 0;       // budget that found no masked slot
};

/// Revives `budget` masked positions. Quotas come from regrow_quotas, capped
/// at each layer's masked-slot count with the overflow passed down the score
/// ranking. Within a layer the masked positions with the largest gradient
/// magnitude win (ties: lowest flat index). Revived weights are zero.
RegrowResult regrow(MaskedModel& model, const std::vector<std::vector<float>>& grad_magnitudes,
                    std::span<const double> scores, std::size_t budget);

SensitivityProfile compute_sensitivity(const SparseMask& mask);
inline SensitivityProfile compute_sensitivity(const MaskedModel& model) { return compute_sensitivity(model.mask); }

/// Within-layer regrowth criterion. Only the accumulated gradient mean is
/// implemented.
enum class RegrowCriterion { kGradientMean };

struct DnrOptions {
  double lr = 0.1;
  double prune_rate = 0.25;
  bool freeze_mask = false;
  std::size_t batch_size = 32;
  RegrowCriterion criterion = RegrowCriterion::kGradientMean;
};

struct EpochStats {
  double mean_loss = 0.0;
  std::size_t samples = 0;
  std::size_t steps = 0;
  std::size_t correct = 0;
  std::size_t pruned = 0;
  std::size_t grown = 0;
};

/// One pass of masked SGD over `indices` (shuffled with `rng`), then, unless
/// the mask is frozen, a prune/regrow mask update driven by the mean absolute
/// gradient over the epoch. The total live count is conserved. A position
/// that is pruned and regrown in the same update keeps its value.
EpochStats dnr_epoch(MaskedModel& model, const Dataset& data, std::span<const std::size_t> indices,
                     const DnrOptions& options, Rng& rng);

}  // namespace flashsim

#include "flashsim/sparse_learner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flashsim/error.hpp"

namespace flashsim {

namespace {

/// Marks `count` uniformly chosen positions out of `candidates` (partial
/// Fisher-Yates).
void mark_random(std::span<std::uint8_t> layer, std::vector<std::size_t> candidates, std::size_t count, Rng& rng) {
  count = std::min(count, candidates.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
    std::swap(candidates[i], candidates[pick(rng)]);
    layer[candidates[i]] = 1;
  }
}

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

SparseMask init_sensitivity_mask(std::span<const double> layer_density, const ModelSpec& spec, Rng& rng) {
  if (layer_density.size() != spec.weight_layer_count()) {
    throw ConfigError("density list length does not match the model's weight layers");
  }
  SparseMask mask = SparseMask::zeros(spec);
  const auto counts = spec.weight_counts();
  for (std::size_t l = 0; l < counts.size(); ++l) {
    const double d = layer_density[l];
    if (!(d > 0.0 && d <= 1.0)) throw ConfigError("layer density must lie in (0, 1]");
    mark_random(mask.layer(l), iota_vec(counts[l]), live_count(d, counts[l]), rng);
  }
  return mask;
}

SparseMask init_random_mask(const ModelSpec& spec, double density, Rng& rng) {
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("density must lie in (0, 1]");
  const std::vector<double> d(spec.weight_layer_count(), density);
  return init_sensitivity_mask(d, spec, rng);
}

std::size_t PruneResult::total() const { return std::accumulate(pruned.begin(), pruned.end(), std::size_t{0}); }

PruneResult prune_step(MaskedModel& model, double prune_rate) {
  if (!(prune_rate >= 0.0 && prune_rate <= 1.0)) throw ConfigError("prune rate must lie in [0, 1]");
  const std::size_t L = model.weight_layer_count();
  PruneResult res;
  res.pruned.assign(L, 0);
  res.positions.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    auto m = model.mask.layer(l);
    auto w = model.weights[l].data();
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i]) live.push_back(i);
    }
    if (live.empty()) continue;
    const std::size_t n = std::min(floor_count(prune_rate * static_cast<double>(live.size())), live.size() - 1);
    if (n == 0) continue;
    std::partial_sort(live.begin(), live.begin() + static_cast<std::ptrdiff_t>(n), live.end(),
                      [&](std::size_t a, std::size_t b) {
                        const float fa = std::fabs(w[a]), fb = std::fabs(w[b]);
                        return fa != fb ? fa < fb : a < b;
                      });
    live.resize(n);
    std::sort(live.begin(), live.end());
    for (std::size_t i : live) {
      m[i] = 0;
      w[i] = 0.0f;
    }
    res.pruned[l] = n;
    res.positions[l] = std::move(live);
  }
  res.mask = model.mask;
  return res;
}

std::vector<double> rank_layers(const MaskedModel& model) {
  const std::size_t L = model.weight_layer_count();
  std::vector<double> sums(L, 0.0);
  double total = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    auto m = model.mask.layer(l);
    auto w = model.weights[l].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (m[i]) sums[l] += std::fabs(static_cast<double>(w[i]));
    }
    total += sums[l];
  }
  if (!(total > 0.0)) return std::vector<double>(L, 1.0 / static_cast<double>(L));
  for (auto& s : sums) s /= total;
  return sums;
}

std::vector<std::size_t> regrow_quotas(std::span<const double> scores, std::size_t budget) {
  const std::size_t L = scores.size();
  std::vector<std::size_t> quota(L, 0);
  if (L == 0 || budget == 0) return quota;
  std::vector<std::pair<double, std::size_t>> frac(L);
  std::size_t assigned = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const double exact = static_cast<double>(budget) * scores[l];
    quota[l] = std::min(floor_count(exact), budget);
    frac[l] = {exact - static_cast<double>(quota[l]), l};
    assigned += quota[l];
  }
  std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < budget; ++r, ++assigned) ++quota[frac[r % L].second];
  // floor_count's tolerance can overshoot when the scores sum to a hair
  // above one; take the excess back from the smallest fractional parts.
  for (std::size_t r = L; assigned > budget && r-- > 0;) {
    auto& q = quota[frac[r].second];
    if (q > 0) {
      --q;
      --assigned;
    }
  }
  return quota;
}

RegrowResult regrow(MaskedModel& model, const std::vector<std::vector<float>>& grad_magnitudes,
                    std::span<const double> scores, std::size_t budget) {
  const std::size_t L = model.weight_layer_count();
  if (scores.size() != L || grad_magnitudes.size() != L) throw ConfigError("regrow: layer count mismatch");
  RegrowResult res;
  res.grown.assign(L, 0);
  if (budget == 0) {
    res.mask = model.mask;
    return res;
  }

  std::vector<std::size_t> avail(L);
  for (std::size_t l = 0; l < L; ++l) avail[l] = model.mask.layer_size(l) - model.mask.nnz(l);

  const auto quota = regrow_quotas(scores, budget);
  std::vector<std::size_t> order = iota_vec(L);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<std::size_t> alloc(L, 0);
  std::size_t carry = 0;
  for (std::size_t l : order) {
    const std::size_t want = quota[l] + carry;
    alloc[l] = std::min(want, avail[l]);
    carry = want - alloc[l];
  }
  // Overflow that ran past the lowest-ranked layer goes back to the top.
  for (std::size_t l : order) {
    if (carry == 0) break;
    const std::size_t extra = std::min(carry, avail[l] - alloc[l]);
    alloc[l] += extra;
    carry -= extra;
  }
  res.shortfall = carry;

  for (std::size_t l = 0; l < L; ++l) {
    if (alloc[l] == 0) continue;
    auto m = model.mask.layer(l);
    auto w = model.weights[l].data();
    const auto& g = grad_magnitudes[l];
    if (g.size() != m.size()) throw ConfigError("regrow: gradient magnitude size mismatch");
    std::vector<std::size_t> masked;
    masked.reserve(avail[l]);
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) masked.push_back(i);
    }
    const auto n = static_cast<std::ptrdiff_t>(alloc[l]);
    std::partial_sort(masked.begin(), masked.begin() + n, masked.end(), [&](std::size_t a, std::size_t b) {
      return g[a] != g[b] ? g[a] > g[b] : a < b;
    });
    for (std::ptrdiff_t k = 0; k < n; ++k) {
      m[masked[static_cast<std::size_t>(k)]] = 1;
      w[masked[static_cast<std::size_t>(k)]] = 0.0f;
    }
    res.grown[l] = alloc[l];
  }
  res.mask = model.mask;
  return res;
}

SensitivityProfile compute_sensitivity(const SparseMask& mask) {
  SensitivityProfile p;
  for (std::size_t l = 0; l < mask.layer_count(); ++l) {
    const std::size_t k = mask.layer_size(l);
    p.params.push_back(k);
    p.density.push_back(k == 0 ? 0.0 : static_cast<double>(mask.nnz(l)) / static_cast<double>(k));
  }
  return p;
}

EpochStats dnr_epoch(MaskedModel& model, const Dataset& data, std::span<const std::size_t> indices,
                     const DnrOptions& options, Rng& rng) {
  if (indices.empty()) throw ConfigError("dnr_epoch: empty data shard");
  if (options.batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(options.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!options.freeze_mask && !(options.prune_rate > 0.0 && options.prune_rate < 1.0)) {
    throw ConfigError("prune rate must lie in (0, 1)");
  }

  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t L = model.weight_layer_count();
  const bool learn_mask = !options.freeze_mask;
  std::vector<std::vector<float>> grad_sum;
  if (learn_mask) {
    for (std::size_t l = 0; l < L; ++l) grad_sum.emplace_back(model.weights[l].size(), 0.0f);
  }
  const auto mode = learn_mask ? WeightGradMode::kDense : WeightGradMode::kLiveOnly;
  const auto lr = static_cast<float>(options.lr);

  EpochStats stats;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
    const std::size_t end = std::min(order.size(), start + options.batch_size);
    const auto batch = make_batch(data, std::span(order).subspan(start, end - start));
    const auto r = loss_and_backward(model, batch.images, batch.labels, mode);
    if (learn_mask) {
      for (std::size_t l = 0; l < L; ++l) {
        auto g = r.grads.weights[l].data();
        auto& acc = grad_sum[l];
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += std::fabs(g[i]);
      }
    }
    sgd_step(model, r.grads, lr);
    loss_sum += r.loss * static_cast<double>(end - start);
    stats.correct += r.correct;
    stats.samples += end - start;
    ++stats.steps;
  }
  stats.mean_loss = loss_sum / static_cast<double>(stats.samples);

  if (learn_mask) {
    const float inv = 1.0f / static_cast<float>(stats.steps);
    for (auto& layer : grad_sum) {
      for (auto& v : layer) v *= inv;
    }
    const std::vector<BasicTensor<float>> before = model.weights;
    const auto pruned = prune_step(model, options.prune_rate);
    const auto scores = rank_layers(model);
    const auto grown = regrow(model, grad_sum, scores, pruned.total());
    for (std::size_t l = 0; l < L; ++l) {
      auto m = model.mask.layer(l);
      auto w = model.weights[l].data();
      for (std::size_t i : pruned.positions[l]) {
        if (m[i]) w[i] = before[l][i];
      }
    }
    stats.pruned = pruned.total();
    stats.grown = pruned.total() - grown.shortfall;
  }
  return stats;
}

}  // namespace flashsim

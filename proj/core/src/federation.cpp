#include "flashsim/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include <spdlog/spdlog.h>

#include "flashsim/error.hpp"
#include "flashsim/mask_ops.hpp"

namespace flashsim {

namespace {

/// Runs fn(0..n-1) on up to `workers` threads. The first exception (by task
/// index) is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::min(std::max<std::size_t>(workers, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// `count` distinct entries of `from`, returned ascending.
std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> from, std::size_t count, Rng& rng) {
  count = std::min(count, from.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, from.size() - 1);
    std::swap(from[i], from[pick(rng)]);
  }
  from.resize(count);
  std::sort(from.begin(), from.end());
  return from;
}

void check_updates(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw ConfigError("aggregation needs at least one client update");
  for (const auto& u : updates) {
    if (u.data_size == 0) throw ConfigError("client update with zero data size");
    if (!u.model.mask.same_shape(updates.front().model.mask)) throw ConfigError("client updates differ in shape");
  }
}

MaskedModel union_skeleton(std::span<const ClientUpdate> updates) {
  MaskedModel out = MaskedModel::zeros(updates.front().model.spec);
  out.mask = updates.front().model.mask;
  for (std::size_t c = 1; c < updates.size(); ++c) out.mask |= updates[c].model.mask;
  return out;
}

void average_biases(std::span<const ClientUpdate> updates, double total, MaskedModel& out) {
  for (std::size_t l = 0; l < out.biases.size(); ++l) {
    std::vector<double> acc(out.biases[l].size(), 0.0);
    for (const auto& u : updates) {
      const double coef = static_cast<double>(u.data_size) / total;
      auto b = u.model.biases[l].data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += coef * static_cast<double>(b[i]);
    }
    auto dst = out.biases[l].data();
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i]);
  }
}

double total_data(std::span<const ClientUpdate> updates) {
  double total = 0.0;
  for (const auto& u : updates) total += static_cast<double>(u.data_size);
  return total;
}

std::vector<double> mean_density(std::span<const ClientUpdate> updates) {
  std::vector<double> mean(updates.front().model.weight_layer_count(), 0.0);
  for (const auto& u : updates) {
    const auto p = compute_sensitivity(u.model.mask);
    for (std::size_t l = 0; l < mean.size(); ++l) mean[l] += p.density[l];
  }
  for (auto& v : mean) v /= static_cast<double>(updates.size());
  return mean;
}

}  // namespace

std::string to_string(Algorithm algo) {
  switch (algo) {
    case Algorithm::kNst: return "nst";
    case Algorithm::kPdst: return "pdst";
    case Algorithm::kSpdst: return "spdst";
    case Algorithm::kJmwst: return "jmwst";
    case Algorithm::kHeteroSpdst: return "hetero-spdst";
    case Algorithm::kHeteroJmwst: return "hetero-jmwst";
  }
  return "unknown";
}

Algorithm parse_algorithm(const std::string& name) {
  for (auto a : {Algorithm::kNst, Algorithm::kPdst, Algorithm::kSpdst, Algorithm::kJmwst, Algorithm::kHeteroSpdst,
                 Algorithm::kHeteroJmwst}) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown algorithm '" + name + "'");
}

std::string to_string(Aggregation agg) { return agg == Aggregation::kFedAvg ? "fedavg" : "wfa"; }

Aggregation parse_aggregation(const std::string& name) {
  if (name == "fedavg") return Aggregation::kFedAvg;
  if (name == "wfa") return Aggregation::kWfa;
  throw ConfigError("unknown aggregation '" + name + "'");
}

bool is_hetero(Algorithm algo) { return algo == Algorithm::kHeteroSpdst || algo == Algorithm::kHeteroJmwst; }

bool uses_warmup(Algorithm algo) { return algo != Algorithm::kNst && algo != Algorithm::kPdst; }

void FederationConfig::validate() const {
  auto require = [](bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw ConfigError(key + ": " + why);
  };
  require(rounds >= 1, "rounds", "must be at least 1");
  require(num_clients >= 1, "clients", "must be at least 1");
  require(clients_per_round >= 1 && clients_per_round <= num_clients, "clients-per-round",
          "must lie in [1, clients]");
  if (uses_warmup(algo)) {
    require(warmup_clients >= 1 && warmup_clients <= num_clients, "warmup-clients", "must lie in [1, clients]");
    require(warmup_epochs >= 1, "warmup-epochs", "must be at least 1");
  }
  require(density > 0.0 && density <= 1.0, "density", "must lie in (0, 1]");
  if (is_hetero(algo)) {
    require(!density_set.empty(), "density-set", "must not be empty");
    for (std::size_t i = 0; i < density_set.size(); ++i) {
      require(density_set[i] > 0.0 && density_set[i] <= 1.0, "density-set", "entries must lie in (0, 1]");
      if (i > 0) require(density_set[i - 1] < density_set[i], "density-set", "must be strictly ascending");
    }
    require(density_set.size() <= num_clients, "density-set", "more groups than clients");
    const auto f = resolved_group_fractions();
    require(f.size() == density_set.size(), "group-fractions", "need one fraction per density");
    double sum = 0.0;
    for (double x : f) {
      require(x > 0.0, "group-fractions", "must be positive");
      sum += x;
    }
    require(std::fabs(sum - 1.0) < 1e-9, "group-fractions", "must sum to 1");
  }
  require(prune_rate > 0.0 && prune_rate < 1.0, "prune-rate", "must lie in (0, 1)");
  require(mask_interval >= 1, "rint", "must be at least 1");
  require(lr_init > 0.0 && lr_end > 0.0, "lr", "must be positive");
  require(batch_size >= 1, "batch-size", "must be at least 1");
  require(alpha > 0.0, "alpha", "must be positive");
  require(eval_every >= 1, "eval-every", "must be at least 1");
  require(eval_batch >= 1, "eval-batch", "must be at least 1");
  comm.validate();
}

Aggregation FederationConfig::resolved_aggregation() const {
  if (aggregation) return *aggregation;
  return is_hetero(algo) ? Aggregation::kWfa : Aggregation::kFedAvg;
}

std::vector<double> FederationConfig::group_densities() const {
  return is_hetero(algo) ? density_set : std::vector<double>{density};
}

std::vector<double> FederationConfig::resolved_group_fractions() const {
  if (!group_fractions.empty()) return group_fractions;
  const std::size_t g = group_densities().size();
  if (g == 3) return {0.3, 0.3, 0.4};
  return std::vector<double>(g, 1.0 / static_cast<double>(g));
}

bool FederationConfig::mask_frozen(std::size_t t) const {
  switch (algo) {
    case Algorithm::kNst: return false;
    case Algorithm::kJmwst:
    case Algorithm::kHeteroJmwst: return t % mask_interval != 0;
    default: return true;
  }
}

Partition partition_clients(const FederationConfig& cfg, const Dataset& train) {
  auto rng = make_rng(cfg.seed, Stream::kPartition);
  return lda_partition(train.labels, train.num_classes, cfg.num_clients, cfg.alpha, rng);
}

std::vector<std::vector<std::size_t>> assign_groups(const FederationConfig& cfg) {
  std::vector<std::size_t> ids(cfg.num_clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  if (!is_hetero(cfg.algo)) return {ids};

  auto rng = make_rng(cfg.seed, Stream::kGroups);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto frac = cfg.resolved_group_fractions();
  const std::size_t G = frac.size();
  std::vector<std::size_t> count(G);
  std::vector<std::pair<double, std::size_t>> rem(G);
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < G; ++g) {
    const double exact = frac[g] * static_cast<double>(cfg.num_clients);
    count[g] = floor_count(exact);
    rem[g] = {exact - static_cast<double>(count[g]), g};
    assigned += count[g];
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < cfg.num_clients; ++r, ++assigned) ++count[rem[r % G].second];
  // Every group keeps at least one client, borrowed from the largest group.
  for (std::size_t g = 0; g < G; ++g) {
    if (count[g] == 0) {
      auto big = std::max_element(count.begin(), count.end());
      --*big;
      ++count[g];
    }
  }

  std::vector<std::vector<std::size_t>> groups(G);
  std::size_t pos = 0;
  for (std::size_t g = 0; g < G; ++g) {
    groups[g].assign(ids.begin() + static_cast<std::ptrdiff_t>(pos),
                     ids.begin() + static_cast<std::ptrdiff_t>(pos + count[g]));
    std::sort(groups[g].begin(), groups[g].end());
    pos += count[g];
  }
  return groups;
}

SensitivityProfile stage1_sensitivity(const FederationConfig& cfg, const MaskedModel& start, const Dataset& train,
                                      const Partition& partition, std::span<const std::size_t> candidates) {
  auto rng = make_rng(cfg.seed, Stream::kWarmup);
  const auto chosen =
      sample_without_replacement(std::vector<std::size_t>(candidates.begin(), candidates.end()), cfg.warmup_clients, rng);

  std::vector<std::optional<SensitivityProfile>> profiles(chosen.size());
  parallel_for(chosen.size(), resolve_threads(cfg), [&](std::size_t i) {
    const std::size_t c = chosen[i];
    const auto& shard = partition.clients.at(c);
    if (shard.empty()) {
      spdlog::warn("warm-up client {} has no data, skipped", c);
      return;
    }
    MaskedModel model = start;
    auto crng = make_rng(cfg.seed, Stream::kWarmup, c + 1);
    DnrOptions opt;
    opt.lr = cfg.lr_init;
    opt.prune_rate = cfg.prune_rate;
    opt.freeze_mask = false;
    opt.batch_size = cfg.batch_size;
    for (std::size_t e = 0; e < cfg.warmup_epochs; ++e) dnr_epoch(model, train, shard, opt, crng);
    profiles[i] = compute_sensitivity(model);
  });

  SensitivityProfile mean;
  mean.params = start.spec.weight_counts();
  mean.density.assign(mean.params.size(), 0.0);
  std::size_t used = 0;
  for (const auto& p : profiles) {
    if (!p) continue;
    for (std::size_t l = 0; l < mean.density.size(); ++l) mean.density[l] += p->density[l];
    ++used;
  }
  if (used == 0) throw ConfigError("stage 1: every warm-up client was skipped");
  for (auto& d : mean.density) d /= static_cast<double>(used);
  return mean;
}

ClientUpdate client_execute(const MaskedModel& model, const Dataset& train, std::span<const std::size_t> shard,
                            std::size_t epochs, bool freeze_mask, double lr, const FederationConfig& cfg, Rng& rng) {
  if (shard.empty()) throw ConfigError("client_execute: empty shard");
  ClientUpdate up{0, model, shard.size(), 0.0};
  DnrOptions opt;
  opt.lr = lr;
  opt.prune_rate = cfg.prune_rate;
  opt.freeze_mask = freeze_mask;
  opt.batch_size = cfg.batch_size;
  for (std::size_t e = 0; e < epochs; ++e) up.train_loss = dnr_epoch(up.model, train, shard, opt, rng).mean_loss;
  return up;
}

MaskedModel fed_avg(std::span<const ClientUpdate> updates) {
  check_updates(updates);
  const double total = total_data(updates);
  MaskedModel out = union_skeleton(updates);
  for (std::size_t l = 0; l < out.weights.size(); ++l) {
    std::vector<double> acc(out.weights[l].size(), 0.0);
    for (const auto& u : updates) {
      const double coef = static_cast<double>(u.data_size) / total;
      auto w = u.model.weights[l].data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += coef * static_cast<double>(w[i]);
    }
    auto dst = out.weights[l].data();
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i]);
  }
  average_biases(updates, total, out);
  out.apply_mask();
  return out;
}

MaskedModel weighted_fed_avg(std::span<const ClientUpdate> updates) {
  check_updates(updates);
  MaskedModel out = union_skeleton(updates);
  for (std::size_t l = 0; l < out.weights.size(); ++l) {
    const std::size_t k = out.weights[l].size();
    std::vector<double> weight(k, 0.0);
    for (const auto& u : updates) {
      auto m = u.model.mask.layer(l);
      const double ds = static_cast<double>(u.data_size);
      for (std::size_t i = 0; i < k; ++i) {
        if (m[i]) weight[i] += ds;
      }
    }
    std::vector<double> acc(k, 0.0);
    for (const auto& u : updates) {
      auto m = u.model.mask.layer(l);
      auto w = u.model.weights[l].data();
      const double ds = static_cast<double>(u.data_size);
      for (std::size_t i = 0; i < k; ++i) {
        if (m[i]) acc[i] += ds / weight[i] * static_cast<double>(w[i]);
      }
    }
    auto dst = out.weights[l].data();
    for (std::size_t i = 0; i < k; ++i) dst[i] = static_cast<float>(acc[i]);
  }
  average_biases(updates, total_data(updates), out);
  out.apply_mask();
  return out;
}

double evaluate_accuracy(const MaskedModel& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw ConfigError("evaluate_accuracy: empty dataset");
  if (batch_size == 0) throw ConfigError("evaluate_accuracy: batch size must be positive");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    const auto batch = make_batch(data, std::span(idx).subspan(start, n));
    const auto logits = forward(model, batch.images);
    const std::size_t C = logits.dim(1);
    auto z = logits.data();
    for (std::size_t b = 0; b < n; ++b) {
      const auto row = z.subspan(b * C, C);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == static_cast<std::size_t>(batch.labels[b])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::size_t resolve_threads(const FederationConfig& cfg) {
  if (cfg.threads > 0) return cfg.threads;
  if (const char* env = std::getenv("FLASH_SIM_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<RoundRecord> run_flash(const FederationConfig& cfg, const ModelSpec& spec, const Dataset& train,
                                   const Dataset& test, const RoundObserver& observer) {
  cfg.validate();
  const auto k = spec.weight_counts();
  const std::size_t L = k.size();
  const auto dens = cfg.group_densities();
  const std::size_t G = dens.size();
  const double d_top = dens.back();
  const auto aggregation = cfg.resolved_aggregation();
  const std::size_t workers = resolve_threads(cfg);

  const Partition partition = partition_clients(cfg, train);
  const auto groups = assign_groups(cfg);
  std::vector<std::size_t> per_round(G);
  for (std::size_t g = 0; g < G; ++g) {
    const std::size_t share =
        G == 1 ? cfg.clients_per_round
               : floor_count(static_cast<double>(groups[g].size() * cfg.clients_per_round) /
                             static_cast<double>(cfg.num_clients));
    per_round[g] = std::clamp<std::size_t>(share, 1, groups[g].size());
  }

  auto init_rng = make_rng(cfg.seed, Stream::kInit);
  const MaskedModel dense = init_dense_model(spec, init_rng);

  std::uint64_t uplink = 0, downlink = 0;
  double flops = 0.0;

  // Stage 1 and the initial masks, one per density group (ascending).
  std::vector<SparseMask> group_masks(G);
  {
    auto mask_rng = make_rng(cfg.seed, Stream::kMask);
    SparseMask random_top = init_random_mask(spec, d_top, mask_rng);
    if (!uses_warmup(cfg.algo)) {
      group_masks[0] = std::move(random_top);
    } else {
      MaskedModel start = dense;
      start.set_mask(random_top);
      const auto profile = stage1_sensitivity(cfg, start, train, partition, groups.back());
      uplink += stage1_overhead_bits(L, cfg.warmup_clients);
      double warm_samples = 0.0;
      {
        auto r = make_rng(cfg.seed, Stream::kWarmup);
        const auto chosen = sample_without_replacement(groups.back(), cfg.warmup_clients, r);
        for (auto c : chosen) warm_samples += static_cast<double>(partition.clients[c].size());
      }
      flops += model_train_flops(spec, random_top, true).total() * warm_samples *
               static_cast<double>(cfg.warmup_epochs);

      auto chain_rng = make_rng(cfg.seed, Stream::kMask, 1);
      group_masks[G - 1] = init_sensitivity_mask(recalibrate_density(profile.density, k, d_top), spec, chain_rng);
      for (std::size_t g = G - 1; g-- > 0;) {
        const auto d_c = recalibrate_density(profile.density, k, dens[g]);
        const auto child = nested_mask_sample(group_masks[g + 1], d_c, chain_rng);
        if (child.redistributed > 0) {
          spdlog::info("nested mask for density {}: {} weights moved between layers", dens[g], child.redistributed);
        }
        group_masks[g] = child.mask;
      }
    }
  }

  MaskedModel server = dense;
  server.set_mask(group_masks.back());
  std::vector<std::optional<SparseMask>> last_sent(G);

  std::vector<RoundRecord> records;
  records.reserve(cfg.rounds);
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    const double lr = lr_at_round(t - 1, cfg.rounds - 1, cfg.lr_init, cfg.lr_end);
    const bool frozen = cfg.mask_frozen(t);

    std::vector<std::pair<std::size_t, std::size_t>> picks;  // (client, group)
    {
      auto srng = make_rng(cfg.seed, Stream::kSampling, t);
      for (std::size_t g = 0; g < G; ++g) {
        for (auto c : sample_without_replacement(groups[g], per_round[g], srng)) picks.emplace_back(c, g);
      }
      std::sort(picks.begin(), picks.end());
    }

    std::vector<MaskedModel> broadcast;
    broadcast.reserve(G);
    for (std::size_t g = 0; g < G; ++g) {
      broadcast.push_back(server);
      broadcast.back().set_mask(group_masks[g]);
    }
    for (const auto& [c, g] : picks) {
      const bool structure = !last_sent[g] || *last_sent[g] != group_masks[g];
      downlink += model_comm_bits(broadcast[g], cfg.comm, structure);
    }
    for (std::size_t g = 0; g < G; ++g) last_sent[g] = group_masks[g];

    std::vector<std::optional<ClientUpdate>> results(picks.size());
    parallel_for(picks.size(), workers, [&](std::size_t i) {
      const auto [c, g] = picks[i];
      const auto& shard = partition.clients[c];
      if (shard.empty()) {
        spdlog::warn("round {}: client {} has no data, skipped", t, c);
        return;
      }
      auto crng = make_rng(cfg.seed, Stream::kClient, t, c);
      try {
        results[i] = client_execute(broadcast[g], train, shard, cfg.local_epochs, frozen, lr, cfg, crng);
        results[i]->client = c;
      } catch (const NumericalError& e) {
        spdlog::warn("round {}: client {} dropped: {}", t, c, e.what());
      }
    });

    RoundRecord rec;
    rec.round = t;
    rec.mask_update = !frozen;
    std::vector<ClientUpdate> updates;
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      if (!results[i]) {
        ++rec.dropped;
        continue;
      }
      auto& u = *results[i];
      const std::size_t g = picks[i].second;
      uplink += model_comm_bits(u.model, cfg.comm, !frozen);
      flops += model_train_flops(spec, group_masks[g], !frozen).total() * static_cast<double>(u.data_size) *
               static_cast<double>(cfg.local_epochs);
      loss_sum += u.train_loss * static_cast<double>(u.data_size);
      updates.push_back(std::move(u));
    }
    rec.participants = updates.size();

    const SparseMask previous = server.mask;
    if (!updates.empty()) {
      rec.train_loss = loss_sum / total_data(updates);
      MaskedModel agg = aggregation == Aggregation::kFedAvg ? fed_avg(updates) : weighted_fed_avg(updates);
      if (frozen) {
        agg.set_mask(server.mask);
      } else if (G == 1) {
        const auto d_c = recalibrate_density(mean_density(updates), k, dens[0]);
        group_masks[0] = magnitude_subsample(agg, d_c);
        agg.set_mask(group_masks[0]);
      } else {
        const auto profile = compute_sensitivity(agg.mask);
        group_masks = hetero_subsample(agg, dens, profile);
        agg.set_mask(group_masks.back());
      }
      server = std::move(agg);
    } else {
      rec.train_loss = std::numeric_limits<double>::quiet_NaN();
      spdlog::warn("round {}: no client update survived, server unchanged", t);
    }

    rec.sm_global = sparse_mask_mismatch(server.mask, previous);
    for (std::size_t l = 0; l < L; ++l) rec.sm_layers.push_back(layer_sm(server.mask, previous, l));
    rec.uplink_bits = uplink;
    rec.downlink_bits = downlink;
    rec.cum_flops = flops;
    rec.server_density = server.mask.density();
    rec.test_acc = (t % cfg.eval_every == 0 || t == cfg.rounds) ? evaluate_accuracy(server, test, cfg.eval_batch)
                                                               : std::numeric_limits<double>::quiet_NaN();
    records.push_back(rec);

    if (observer) {
      std::vector<std::size_t> clients, client_group;
      for (const auto& [c, g] : picks) {
        clients.push_back(c);
        client_group.push_back(g);
      }
      // Observers see the masks the clients of this round trained under.
      std::vector<SparseMask> sent;
      for (const auto& b : broadcast) sent.push_back(b.mask);
      RoundDetail detail{&server, sent, clients, client_group};
      observer(records.back(), detail);
    }
  }
  return records;
}

std::vector<RoundRecord> run_hetero_flash(const FederationConfig& cfg, const ModelSpec& spec, const Dataset& train,
                                          const Dataset& test, const RoundObserver& observer) {
  if (!is_hetero(cfg.algo)) throw ConfigError("run_hetero_flash needs a hetero algorithm");
  return run_flash(cfg, spec, train, test, observer);
}

}  // namespace flashsim

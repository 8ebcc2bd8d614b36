#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flashsim/accounting.hpp"
#include "flashsim/data.hpp"
#include "flashsim/engine.hpp"
#include "flashsim/mask.hpp"
#include "flashsim/sparse_learner.hpp"

namespace flashsim {

enum class Algorithm { kNst, kPdst, kSpdst, kJmwst, kHeteroSpdst, kHeteroJmwst };
enum class Aggregation { kFedAvg, kWfa };

/// CLI spelling: "nst", "pdst", "spdst", "jmwst", "hetero-spdst", "hetero-jmwst".
std::string to_string(Algorithm algo);
Algorithm parse_algorithm(const std::string& name);
std::string to_string(Aggregation agg);
Aggregation parse_aggregation(const std::string& name);

bool is_hetero(Algorithm algo);
/// SPDST, JMWST and both hetero variants start from warm-up sensitivities.
bool uses_warmup(Algorithm algo);

struct FederationConfig {
  Algorithm algo = Algorithm::kSpdst;
  std::size_t rounds = 400;             // T
  std::size_t local_epochs = 1;         // E
  std::size_t num_clients = 100;        // C_N
  std::size_t clients_per_round = 10;   // c_r
  std::size_t warmup_clients = 10;      // c_d
  std::size_t warmup_epochs = 10;       // E_d
  double density = 0.1;                 // d
  /// Ascending densities for the hetero algorithms.
  std::vector<double> density_set{0.1, 0.15, 0.2};
  /// Share of clients per entry of density_set. Empty means 0.3/0.3/0.4 for
  /// three densities and an even split otherwise.
  std::vector<double> group_fractions;
  double prune_rate = 0.25;             // p_r
  std::size_t mask_interval = 1;        // r_int
  /// Unset means WFA for hetero algorithms and FedAvg otherwise.
  std::optional<Aggregation> aggregation;
  double lr_init = 0.1;
  double lr_end = 0.001;
  std::size_t batch_size = 32;
  double alpha = 1000.0;
  std::uint64_t seed = 1;
  /// Evaluate every n rounds; the final round is always evaluated.
  std::size_t eval_every = 1;
  std::size_t eval_batch = 512;
  /// Client workers per round; 0 reads FLASH_SIM_THREADS, then hardware.
  std::size_t threads = 0;
  CommModel comm;

  void validate() const;
  Aggregation resolved_aggregation() const;
  /// Densities served to client groups, ascending ({density} when homogeneous).
  std::vector<double> group_densities() const;
  std::vector<double> resolved_group_fractions() const;
  /// True when round t (1-based) trains with a frozen mask.
  bool mask_frozen(std::size_t t) const;
};

struct ClientUpdate {
  std::size_t client = 0;
  MaskedModel model;
  std::size_t data_size = 0;
  double train_loss = 0.0;  // mean loss of the last local epoch
};

/// One entry of the metrics stream. Bits and FLOPs are cumulative.
struct RoundRecord {
  std::size_t round = 0;
  double test_acc = 0.0;  // NaN on rounds that were not evaluated
  double train_loss = 0.0;
  double sm_global = 0.0;
  std::vector<double> sm_layers;
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;
  double cum_flops = 0.0;
  double server_density = 0.0;
  std::size_t participants = 0;
  std::size_t dropped = 0;
  bool mask_update = false;
};

/// Extra per-round state for observers: the masks broadcast to each density
/// group and which clients trained under which group.
struct RoundDetail {
  const MaskedModel* server = nullptr;
  std::span<const SparseMask> group_masks;
  std::span<const std::size_t> clients;       // ascending
  std::span<const std::size_t> client_group;  // parallel to clients
};

using RoundObserver = std::function<void(const RoundRecord&, const RoundDetail&)>;

/// Server-side sizes of client shards.
Partition partition_clients(const FederationConfig& cfg, const Dataset& train);

/// Client ids per density group (ascending ids within a group).
std::vector<std::vector<std::size_t>> assign_groups(const FederationConfig& cfg);

/// Stage 1: `warmup_clients` clients drawn from `candidates` each run
/// `warmup_epochs` of mask-learning DNR from `start` (already masked) and the
/// per-layer mean of their densities is returned. Clients with empty shards
/// are skipped.
SensitivityProfile stage1_sensitivity(const FederationConfig& cfg, const MaskedModel& start, const Dataset& train,
                                      const Partition& partition, std::span<const std::size_t> candidates);

/// E local epochs of DNR on the client's shard starting from `model`.
ClientUpdate client_execute(const MaskedModel& model, const Dataset& train, std::span<const std::size_t> shard,
                            std::size_t epochs, bool freeze_mask, double lr, const FederationConfig& cfg, Rng& rng);

/// Data-size-weighted mean over every position. The result's mask is the
/// union of the client masks.
MaskedModel fed_avg(std::span<const ClientUpdate> updates);

/// Per position, the mean over clients where it is live, weighted by data
/// size; zero where no client has it live. Biases use plain fed_avg.
MaskedModel weighted_fed_avg(std::span<const ClientUpdate> updates);

/// Top-1 accuracy over the dataset.
double evaluate_accuracy(const MaskedModel& model, const Dataset& data, std::size_t batch_size = 512);

/// Worker count used for client training: cfg.threads, else
/// FLASH_SIM_THREADS, else hardware concurrency.
std::size_t resolve_threads(const FederationConfig& cfg);

/// Two-stage sparse federated training. Runs every algorithm, homogeneous
/// and hetero; `observer` sees each round as it finishes.
std::vector<RoundRecord> run_flash(const FederationConfig& cfg, const ModelSpec& spec, const Dataset& train,
                                   const Dataset& test, const RoundObserver& observer = {});

/// run_flash restricted to the hetero algorithms.
std::vector<RoundRecord> run_hetero_flash(const FederationConfig& cfg, const ModelSpec& spec, const Dataset& train,
                                          const Dataset& test, const RoundObserver& observer = {});

}  // namespace flashsim

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "flashsim/error.hpp"
#include "flashsim/federation.hpp"
#include "flashsim/mask_ops.hpp"

using namespace flashsim;

namespace {

ModelSpec small_spec() { return ModelSpec::mlp(8, 12, 4); }

struct SynthData {
  Dataset train, test;
};

SynthData synth(std::uint64_t seed = 3) {
  Rng a(seed), b(seed + 100);
  return {synth_dataset(4, 60, 8, 3.0, a), synth_dataset(4, 20, 8, 3.0, b, Split::kTest)};
}

FederationConfig small_cfg(Algorithm algo) {
  FederationConfig c;
  c.algo = algo;
  c.rounds = 6;
  c.num_clients = 8;
  c.clients_per_round = 4;
  c.warmup_clients = 2;
  c.warmup_epochs = 2;
  c.density = 0.3;
  c.density_set = {0.2, 0.3, 0.4};
  c.batch_size = 8;
  c.threads = 1;
  return c;
}

ClientUpdate make_update(const ModelSpec& spec, std::size_t ds, std::vector<float> w0, std::vector<std::uint8_t> m0) {
  ClientUpdate u{0, MaskedModel::zeros(spec), ds, 0.0};
  for (std::size_t i = 0; i < w0.size(); ++i) {
    u.model.weights[0][i] = w0[i];
    u.model.mask.layer(0)[i] = m0[i];
  }
  return u;
}

ModelSpec two_by_one() { return ModelSpec({1, 1, 2}, {Flatten{}, FullyConnected{2, 2}}, 2); }

}  // namespace

TEST(Config, Validation) {
  FederationConfig c;
  EXPECT_NO_THROW(c.validate());
  c.clients_per_round = 101;
  EXPECT_THROW(c.validate(), ConfigError);
  c = FederationConfig{};
  c.mask_interval = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = FederationConfig{};
  c.algo = Algorithm::kHeteroJmwst;
  c.density_set = {0.2, 0.1};
  EXPECT_THROW(c.validate(), ConfigError);
  c.density_set = {0.1, 0.2};
  c.group_fractions = {0.5, 0.6};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, MaskScheduleByAlgorithm) {
  FederationConfig c;
  c.algo = Algorithm::kNst;
  EXPECT_FALSE(c.mask_frozen(3));
  c.algo = Algorithm::kSpdst;
  EXPECT_TRUE(c.mask_frozen(3));
  c.algo = Algorithm::kJmwst;
  c.mask_interval = 5;
  EXPECT_TRUE(c.mask_frozen(4));
  EXPECT_FALSE(c.mask_frozen(5));
  c.mask_interval = 1;
  EXPECT_FALSE(c.mask_frozen(4));
}

TEST(FedAvg, WeightedMeanAndIdentity) {
  const auto spec = two_by_one();
  std::vector<ClientUpdate> ups{make_update(spec, 1, {4.0f, 0.0f, 0.0f, 0.0f}, {1, 0, 0, 0}), make_update(spec, 3, {0.0f, 2.0f, 0.0f, 0.0f}, {0, 1, 0, 0})};
  const auto avg = fed_avg(ups);
  EXPECT_FLOAT_EQ(avg.weights[0][0], 1.0f);
  EXPECT_FLOAT_EQ(avg.weights[0][1], 1.5f);
  EXPECT_EQ(avg.mask.nnz(), 2u);

  const std::vector<ClientUpdate> one{ups[0]};
  EXPECT_EQ(fed_avg(one).weights, ups[0].model.weights);
  EXPECT_THROW(fed_avg(std::vector<ClientUpdate>{}), ConfigError);
}

TEST(WeightedFedAvg, HandTracedTwoClients) {
  const auto spec = two_by_one();
  // position 0 live only in client A (3.0), position 1 live nowhere
  std::vector<ClientUpdate> ups{make_update(spec, 5, {3.0f, 0.0f, 0.0f, 0.0f}, {1, 0, 0, 0}), make_update(spec, 5, {0.0f, 0.0f, 0.0f, 0.0f}, {0, 0, 0, 0})};
  ups[0].model.biases[0][0] = 2.0f;
  const auto wfa = weighted_fed_avg(ups);
  EXPECT_FLOAT_EQ(wfa.weights[0][0], 3.0f);
  EXPECT_FLOAT_EQ(wfa.weights[0][1], 0.0f);
  EXPECT_FLOAT_EQ(wfa.biases[0][0], 1.0f);
  EXPECT_FLOAT_EQ(fed_avg(ups).weights[0][0], 1.5f);
}

TEST(WeightedFedAvg, IdenticalMasksEqualFedAvg) {
  const auto spec = small_spec();
  Rng r(2);
  const auto mask = init_random_mask(spec, 0.4, r);
  std::vector<ClientUpdate> ups;
  for (int c = 0; c < 3; ++c) {
    ClientUpdate u{0, init_dense_model(spec, r), 10, 0.0};
    u.model.set_mask(mask);
    ups.push_back(u);
  }
  EXPECT_EQ(weighted_fed_avg(ups), fed_avg(ups));
}

TEST(ClientExecute, EpochsAndFreezing) {
  const auto d = synth();
  const auto spec = small_spec();
  auto cfg = small_cfg(Algorithm::kNst);
  Rng r(1);
  auto model = init_dense_model(spec, r);
  model.set_mask(init_random_mask(spec, 0.3, r));
  std::vector<std::size_t> shard{0, 5, 9, 40, 77, 100, 150, 200};
  Rng c1(1);
  EXPECT_EQ(client_execute(model, d.train, shard, 0, false, 0.1, cfg, c1).model, model);
  const auto frozen = client_execute(model, d.train, shard, 2, true, 0.1, cfg, c1);
  EXPECT_EQ(frozen.model.mask, model.mask);
  EXPECT_EQ(frozen.data_size, shard.size());
  const auto learned = client_execute(model, d.train, shard, 2, false, 0.1, cfg, c1);
  EXPECT_EQ(learned.model.mask.nnz(), model.mask.nnz());
}

TEST(Stage1, SingleClientProfileEqualsItsDensities) {
  const auto d = synth();
  const auto spec = small_spec();
  auto cfg = small_cfg(Algorithm::kSpdst);
  cfg.warmup_clients = 1;
  const auto part = partition_clients(cfg, d.train);
  Rng r(1);
  auto start = init_dense_model(spec, r);
  start.set_mask(init_random_mask(spec, 0.3, r));
  const std::vector<std::size_t> cands{0, 1, 2, 3, 4, 5, 6, 7};
  const auto p = stage1_sensitivity(cfg, start, d.train, part, cands);
  double total = 0.0;
  for (std::size_t l = 0; l < p.density.size(); ++l) total += p.density[l] * static_cast<double>(p.params[l]);
  EXPECT_NEAR(total, static_cast<double>(start.mask.nnz()), 1e-9);
}

TEST(Groups, FractionsAndDisjointness) {
  auto cfg = small_cfg(Algorithm::kHeteroJmwst);
  cfg.num_clients = 100;
  const auto g = assign_groups(cfg);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0].size(), 30u);
  EXPECT_EQ(g[1].size(), 30u);
  EXPECT_EQ(g[2].size(), 40u);
  std::set<std::size_t> all;
  for (const auto& grp : g) all.insert(grp.begin(), grp.end());
  EXPECT_EQ(all.size(), 100u);
}

TEST(RunFlash, SpdstMaskFrozenAndDensityExact) {
  const auto d = synth();
  const auto cfg = small_cfg(Algorithm::kSpdst);
  std::size_t nnz0 = 0;
  const auto recs = run_flash(cfg, small_spec(), d.train, d.test, [&](const RoundRecord& r, const RoundDetail& det) {
    if (r.round == 1) nnz0 = det.server->mask.nnz();
    EXPECT_EQ(det.server->mask.nnz(), nnz0);
  });
  ASSERT_EQ(recs.size(), cfg.rounds);
  for (const auto& r : recs) EXPECT_EQ(r.sm_global, 0.0);
}

TEST(RunFlash, DeterministicForSeed) {
  const auto d = synth();
  auto cfg = small_cfg(Algorithm::kJmwst);
  const auto a = run_flash(cfg, small_spec(), d.train, d.test);
  cfg.threads = 3;
  const auto b = run_flash(cfg, small_spec(), d.train, d.test);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].test_acc, b[i].test_acc);
    EXPECT_EQ(a[i].train_loss, b[i].train_loss);
    EXPECT_EQ(a[i].sm_global, b[i].sm_global);
    EXPECT_EQ(a[i].uplink_bits, b[i].uplink_bits);
  }
}

TEST(RunFlash, CountersMonotoneAndSmBounded) {
  const auto d = synth();
  const auto recs = run_flash(small_cfg(Algorithm::kNst), small_spec(), d.train, d.test);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_GE(recs[i].sm_global, 0.0);
    EXPECT_LE(recs[i].sm_global, 1.0);
    if (i > 0) {
      EXPECT_GT(recs[i].uplink_bits, recs[i - 1].uplink_bits);
      EXPECT_GT(recs[i].downlink_bits, recs[i - 1].downlink_bits);
      EXPECT_GT(recs[i].cum_flops, recs[i - 1].cum_flops);
    }
  }
}

TEST(RunFlash, JmwstServerReturnsToBudget) {
  const auto d = synth();
  const auto cfg = small_cfg(Algorithm::kJmwst);
  const auto spec = small_spec();
  const auto k = spec.weight_counts();
  run_flash(cfg, spec, d.train, d.test, [&](const RoundRecord&, const RoundDetail& det) {
    const double target = cfg.density * static_cast<double>(spec.total_weights());
    EXPECT_LE(static_cast<double>(det.server->mask.nnz()), target + 1e-9);
    EXPECT_GE(static_cast<double>(det.server->mask.nnz()), target - static_cast<double>(k.size()));
  });
}

TEST(RunFlash, EvalEveryLeavesGaps) {
  const auto d = synth();
  auto cfg = small_cfg(Algorithm::kPdst);
  cfg.eval_every = 4;
  const auto recs = run_flash(cfg, small_spec(), d.train, d.test);
  EXPECT_TRUE(std::isnan(recs[0].test_acc));
  EXPECT_FALSE(std::isnan(recs[3].test_acc));
  EXPECT_FALSE(std::isnan(recs[5].test_acc));
}

TEST(RunFlash, HeteroSingleDensityMatchesHomogeneous) {
  const auto d = synth();
  auto homo = small_cfg(Algorithm::kSpdst);
  auto het = small_cfg(Algorithm::kHeteroSpdst);
  het.density_set = {homo.density};
  const auto a = run_flash(homo, small_spec(), d.train, d.test);
  const auto b = run_hetero_flash(het, small_spec(), d.train, d.test);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].test_acc, b[i].test_acc);
    EXPECT_EQ(a[i].train_loss, b[i].train_loss);
  }
  EXPECT_THROW(run_hetero_flash(homo, small_spec(), d.train, d.test), ConfigError);
}

TEST(RunFlash, StageOneOverheadCountedOnce) {
  const auto d = synth();
  auto cfg = small_cfg(Algorithm::kSpdst);
  cfg.rounds = 1;
  cfg.comm.mode = CommMode::kValueOnly;
  const auto spec = small_spec();
  const auto recs = run_flash(cfg, spec, d.train, d.test);
  EXPECT_GE(recs[0].uplink_bits, stage1_overhead_bits(spec.weight_layer_count(), cfg.warmup_clients));
}

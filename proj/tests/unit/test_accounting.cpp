#include <gtest/gtest.h>

#include "flashsim/accounting.hpp"
#include "flashsim/error.hpp"
#include "flashsim/sparse_learner.hpp"

using namespace flashsim;

namespace {

CommModel mode(CommMode m) {
  CommModel c;
  c.mode = m;
  return c;
}

}  // namespace

TEST(CommBits, Goldens) {
  EXPECT_EQ(layer_comm_bits(100, 1000, 10, mode(CommMode::kCsr)), 6752u);
  EXPECT_EQ(layer_comm_bits(100, 1000, 10, mode(CommMode::kDense)), 32000u);
  EXPECT_EQ(layer_comm_bits(100, 1000, 10, mode(CommMode::kBitmap)), 4200u);
  EXPECT_EQ(layer_comm_bits(100, 1000, 10, mode(CommMode::kValueOnly)), 3200u);
  CommModel narrow = mode(CommMode::kCsr);
  narrow.value_bits = 16;
  narrow.index_bits = 8;
  narrow.pointer_bits = 16;
  EXPECT_EQ(layer_comm_bits(100, 1000, 10, narrow), 100u * 24 + 11 * 16);
}

TEST(CommBits, FullCsrCostsMoreThanDense) {
  EXPECT_GT(layer_comm_bits(500, 500, 10, mode(CommMode::kCsr)), layer_comm_bits(500, 500, 10, mode(CommMode::kDense)));
}

TEST(CommBits, RejectsBadInput) {
  CommModel c;
  c.value_bits = 12;
  EXPECT_THROW(layer_comm_bits(1, 10, 1, c), ConfigError);
  EXPECT_THROW(layer_comm_bits(11, 10, 1, CommModel{}), ConfigError);
  EXPECT_THROW(layer_comm_bits(1, 10, 0, CommModel{}), ConfigError);
  EXPECT_THROW(parse_comm_mode("zip"), ConfigError);
}

TEST(CommBits, SavingRatioDecreasesWithDensity) {
  for (auto m : {CommMode::kCsr, CommMode::kBitmap, CommMode::kValueOnly}) {
    double prev = INFINITY;
    for (double d : {0.05, 0.1, 0.2, 0.5, 1.0}) {
      const std::size_t k = 10000, nnz = static_cast<std::size_t>(d * k);
      const double ratio =
          static_cast<double>(layer_comm_bits(nnz, k, 100, mode(CommMode::kDense))) /
          static_cast<double>(layer_comm_bits(nnz, k, 100, mode(m)));
      EXPECT_LT(ratio, prev);
      prev = ratio;
    }
  }
}

TEST(ModelBits, DenseModelAndMaskFlag) {
  const auto spec = ModelSpec::mnist_net();
  auto model = MaskedModel::zeros(spec);
  EXPECT_EQ(model_comm_bits(model, mode(CommMode::kDense), true), 32u * (21750 + 90));
  Rng r(1);
  model.set_mask(init_random_mask(spec, 0.1, r));
  const auto with = model_comm_bits(model, mode(CommMode::kCsr), true);
  const auto without = model_comm_bits(model, mode(CommMode::kCsr), false);
  EXPECT_GT(with, without);
  EXPECT_EQ(without, 32u * (model.mask.nnz() + 90));
}

TEST(Flops, Conv1Golden) {
  const auto& conv1 = ModelSpec::mnist_net().weight_layers()[0];
  const auto f = layer_train_flops(conv1, 1.0, false);
  EXPECT_DOUBLE_EQ(f.f_fwd, 144000.0);
  EXPECT_DOUBLE_EQ(layer_train_flops(1, 10, 5, 5, 28, 28, 24, 24, 1.0, false).f_fwd, 144000.0);
}

TEST(Flops, LinearInDensity) {
  for (const auto& layer : ModelSpec::mnist_net().weight_layers()) {
    const auto dense = layer_train_flops(layer, 1.0, false);
    const auto fixed = layer_train_flops(layer, 0.1, false);
    const auto learn = layer_train_flops(layer, 0.1, true);
    EXPECT_NEAR(fixed.f_fwd, 0.1 * dense.f_fwd, 1e-9 * dense.f_fwd);
    EXPECT_NEAR(fixed.f_back_in, 0.1 * dense.f_back_in, 1e-9 * dense.f_back_in);
    EXPECT_NEAR(fixed.f_back_wt, 0.1 * dense.f_back_wt, 1e-9 * dense.f_back_wt);
    EXPECT_NEAR(learn.f_back_wt / fixed.f_back_wt, 10.0, 1e-12);
    EXPECT_DOUBLE_EQ(learn.f_back_wt, dense.f_back_wt);
    EXPECT_DOUBLE_EQ(learn.f_fwd, fixed.f_fwd);
  }
}

TEST(Flops, FullyConnectedIsOneByOneConv) {
  const auto& fc = ModelSpec::mnist_net().weight_layers()[2];
  const auto f = layer_train_flops(fc, 1.0, false);
  EXPECT_DOUBLE_EQ(f.f_fwd, 320.0 * 50.0);
  EXPECT_DOUBLE_EQ(f.f_back_in, 320.0 * 50.0);
}

TEST(Stage1Overhead, Formula) {
  EXPECT_EQ(stage1_overhead_bits(4, 10), 1280u);
  EXPECT_EQ(stage1_overhead_bits(7, 1), 7u * 32);
  EXPECT_LT(stage1_overhead_bits(4, 10), stage1_overhead_bits(5, 10));
  EXPECT_LT(stage1_overhead_bits(4, 10), stage1_overhead_bits(4, 11));
  EXPECT_THROW(stage1_overhead_bits(0, 1), ConfigError);
}

#include <benchmark/benchmark.h>

#include <numeric>

#include "flashsim/accounting.hpp"
#include "flashsim/data.hpp"
#include "flashsim/mask_ops.hpp"
#include "flashsim/sparse_learner.hpp"

using namespace flashsim;

namespace {

Tensor mnist_like_batch(std::size_t n, Rng& rng) {
  Tensor x({n, 1, 28, 28});
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : x.data()) v = u(rng);
  return x;
}

MaskedModel mnist_model(double density, Rng& rng) {
  const auto spec = ModelSpec::mnist_net();
  auto m = init_dense_model(spec, rng);
  m.set_mask(init_random_mask(spec, density, rng));
  return m;
}

}  // namespace

// arg 0: density in percent, arg 1: weight-gradient mode (0 dense, 1 live only)
static void BM_MnistForwardBackward(benchmark::State& state) {
  Rng rng(1);
  const auto model = mnist_model(static_cast<double>(state.range(0)) / 100.0, rng);
  const auto x = mnist_like_batch(32, rng);
  std::vector<std::int32_t> y(32);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<std::int32_t>(i % 10);
  const auto mode = state.range(1) ? WeightGradMode::kLiveOnly : WeightGradMode::kDense;
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_backward(model, x, y, mode).loss);
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_MnistForwardBackward)->Args({10, 0})->Args({10, 1})->Args({100, 0})->Unit(benchmark::kMillisecond);

static void BM_MnistForward(benchmark::State& state) {
  Rng rng(2);
  const auto model = mnist_model(static_cast<double>(state.range(0)) / 100.0, rng);
  const auto x = mnist_like_batch(256, rng);
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, x).data().data());
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_MnistForward)->Arg(10)->Arg(100)->Unit(benchmark::kMillisecond);

// One client epoch on 600 synthetic samples with an MLP.
static void BM_DnrEpoch(benchmark::State& state) {
  Rng rng(3);
  const auto data = synth_dataset(10, 60, 32, 4.0, rng);
  const auto spec = ModelSpec::mlp(32, 64, 10);
  auto model = init_dense_model(spec, rng);
  model.set_mask(init_random_mask(spec, 0.2, rng));
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  DnrOptions opt;
  opt.freeze_mask = state.range(0) == 0;
  for (auto _ : state) benchmark::DoNotOptimize(dnr_epoch(model, data, idx, opt, rng).mean_loss);
}
BENCHMARK(BM_DnrEpoch)->ArgName("learn_mask")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_SparseMaskMismatch(benchmark::State& state) {
  Rng rng(4);
  const auto spec = ModelSpec::mnist_net();
  const auto a = init_random_mask(spec, 0.1, rng), b = init_random_mask(spec, 0.1, rng);
  for (auto _ : state) benchmark::DoNotOptimize(sparse_mask_mismatch(a, b));
}
BENCHMARK(BM_SparseMaskMismatch);

static void BM_MagnitudeSubsample(benchmark::State& state) {
  Rng rng(5);
  const auto model = mnist_model(0.3, rng);
  const std::vector<double> d{0.5, 0.1, 0.08, 0.4};
  for (auto _ : state) benchmark::DoNotOptimize(magnitude_subsample(model, d).nnz());
}
BENCHMARK(BM_MagnitudeSubsample);

static void BM_HeteroSubsample(benchmark::State& state) {
  Rng rng(6);
  const auto model = mnist_model(0.3, rng);
  const auto prof = compute_sensitivity(model);
  const std::vector<double> d{0.1, 0.15, 0.2};
  for (auto _ : state) benchmark::DoNotOptimize(hetero_subsample(model, d, prof).size());
}
BENCHMARK(BM_HeteroSubsample);

static void BM_Recalibrate(benchmark::State& state) {
  const std::vector<double> dh{0.9, 0.12, 0.07, 0.5};
  const std::vector<std::size_t> k{250, 5000, 16000, 500};
  for (auto _ : state) benchmark::DoNotOptimize(recalibrate_density(dh, k, 0.1));
}
BENCHMARK(BM_Recalibrate);

static void BM_ModelCommBits(benchmark::State& state) {
  Rng rng(7);
  const auto model = mnist_model(0.1, rng);
  const CommModel comm;
  for (auto _ : state) benchmark::DoNotOptimize(model_comm_bits(model, comm, true));
}
BENCHMARK(BM_ModelCommBits);

BENCHMARK_MAIN();

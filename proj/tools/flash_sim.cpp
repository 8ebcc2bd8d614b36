#include <chrono>
#include <cmath>
#include <iostream>

#include <spdlog/spdlog.h>

#include "flashsim/cli.hpp"
#include "flashsim/data.hpp"
#include "flashsim/federation.hpp"

using namespace flashsim;

namespace {

struct Loaded {
  Dataset train;
  Dataset test;
  ModelSpec spec;
};

Loaded load(const RunOptions& o) {
  if (o.dataset == "mnist") {
    return {load_mnist_dir(o.data_dir, Split::kTrain), load_mnist_dir(o.data_dir, Split::kTest),
            ModelSpec::mnist_net()};
  }
  auto train_rng = make_rng(o.fed.seed, Stream::kData, 0);
  auto test_rng = make_rng(o.fed.seed, Stream::kData, 1);
  return {synth_dataset(o.synth_classes, o.synth_train_per_class, o.synth_dim, o.synth_separation, train_rng),
          synth_dataset(o.synth_classes, o.synth_test_per_class, o.synth_dim, o.synth_separation, test_rng,
                        Split::kTest),
          ModelSpec::mlp(o.synth_dim, o.synth_hidden, o.synth_classes)};
}

}  // namespace

int main(int argc, char** argv) {
  RunOptions opts;
  try {
    opts = parse_config(argc, argv);
  } catch (const HelpRequested& h) {
    std::cout << h.what();
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nrun with --help for the flag list\n";
    return 2;
  }

  try {
    const auto data = load(opts);
    RunManifest manifest;
    manifest.options = opts;
    manifest.dataset_checksum = dataset_checksum(data.train) ^ (dataset_checksum(data.test) * 31);
    manifest.model = data.spec.describe();
    manifest.version = FLASHSIM_TOOL_VERSION;
    manifest.started_at = timestamp_utc();

    MetricsWriter writer(opts.out_dir, data.spec.weight_layer_count());
    writer.write_manifest(manifest);

    const auto t0 = std::chrono::steady_clock::now();
    spdlog::info("{} on {}: T={} C_N={} c_r={} d={} seed={}", to_string(opts.fed.algo), opts.dataset,
                 opts.fed.rounds, opts.fed.num_clients, opts.fed.clients_per_round, opts.fed.density, opts.fed.seed);
    const auto records = run_flash(opts.fed, data.spec, data.train, data.test,
                                   [&](const RoundRecord& r, const RoundDetail&) {
                                     writer.append(r);
                                     if (!std::isnan(r.test_acc)) {
                                       const double secs = std::chrono::duration<double>(
                                                               std::chrono::steady_clock::now() - t0)
                                                               .count();
                                       spdlog::info("round {:>4}  acc {:.4f}  loss {:.4f}  sm {:.4f}  {:.0f}s",
                                                    r.round, r.test_acc, r.train_loss, r.sm_global, secs);
                                     }
                                   });
    writer.finish(manifest, records);
    if (records.size() != opts.fed.rounds) {
      spdlog::error("completed {} of {} rounds", records.size(), opts.fed.rounds);
      return 1;
    }
    std::cout << "final test accuracy " << records.back().test_acc << '\n';
    return 0;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}

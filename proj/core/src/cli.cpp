#include "flashsim/cli.hpp"

#include <cmath>
#include <cstdio>
#include <ctime>

#include <CLI11.hpp>
#include <json.hpp>

#include "flashsim/data.hpp"

namespace flashsim {

namespace {

using nlohmann::json;

json config_json(const RunOptions& o) {
  const auto& f = o.fed;
  json j;
  j["dataset"] = o.dataset;
  j["data_dir"] = o.data_dir.string();
  j["algo"] = to_string(f.algo);
  j["density"] = f.density;
  j["density_set"] = f.density_set;
  j["group_fractions"] = f.resolved_group_fractions();
  j["rounds"] = f.rounds;
  j["clients"] = f.num_clients;
  j["clients_per_round"] = f.clients_per_round;
  j["alpha"] = f.alpha;
  j["lda_variant"] = kLdaVariant;
  j["rint"] = f.mask_interval;
  j["prune_rate"] = f.prune_rate;
  j["local_epochs"] = f.local_epochs;
  j["warmup_clients"] = f.warmup_clients;
  j["warmup_epochs"] = f.warmup_epochs;
  j["aggregation"] = to_string(f.resolved_aggregation());
  j["comm_mode"] = to_string(f.comm.mode);
  j["value_bits"] = f.comm.value_bits;
  j["index_bits"] = f.comm.index_bits;
  j["pointer_bits"] = f.comm.pointer_bits;
  j["lr_init"] = f.lr_init;
  j["lr_end"] = f.lr_end;
  j["batch_size"] = f.batch_size;
  j["eval_every"] = f.eval_every;
  j["seed"] = f.seed;
  if (o.dataset == "synth") {
    j["synth"] = {{"classes", o.synth_classes},     {"train_per_class", o.synth_train_per_class},
                  {"test_per_class", o.synth_test_per_class}, {"dim", o.synth_dim},
                  {"hidden", o.synth_hidden},       {"separation", o.synth_separation}};
  }
  return j;
}

json manifest_json(const RunManifest& m) {
  json j;
  j["config"] = config_json(m.options);
  j["seed"] = m.options.fed.seed;
  char sum[24];
  std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(m.dataset_checksum));
  j["dataset_checksum"] = sum;
  j["model"] = m.model;
  j["version"] = m.version;
  j["started_at"] = m.started_at;
  j["finished_at"] = m.finished_at.empty() ? json(nullptr) : json(m.finished_at);
  return j;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string fmt_real(double v, const char* format) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

}  // namespace

RunOptions parse_config(int argc, const char* const* argv) {
  RunOptions o;
  auto& f = o.fed;
  std::string algo = to_string(f.algo);
  std::string aggregation;
  std::string comm_mode = to_string(f.comm.mode);

  CLI::App app{"Sparse federated training simulator", "flash_sim"};
  app.set_config("--config", "", "key=value config file; flags override its values");
  app.allow_config_extras(CLI::config_extras_mode::error);

  app.add_option("--dataset", o.dataset, "Training data")->check(CLI::IsMember({"mnist", "synth"}));
  app.add_option("--data-dir", o.data_dir, "Directory with the MNIST IDX files");
  app.add_option("--algo", algo, "Training algorithm")
      ->check(CLI::IsMember({"nst", "pdst", "spdst", "jmwst", "hetero-spdst", "hetero-jmwst"}));
  app.add_option("--density", f.density, "Target density d");
  app.add_option("--density-set", f.density_set, "Ascending densities for hetero runs, comma separated")
      ->delimiter(',');
  app.add_option("--group-fractions", f.group_fractions, "Client share per density, comma separated")
      ->delimiter(',');
  app.add_option("--rounds", f.rounds, "Communication rounds T");
  app.add_option("--clients", f.num_clients, "Client count C_N");
  app.add_option("--clients-per-round", f.clients_per_round, "Clients sampled per round c_r");
  app.add_option("--alpha", f.alpha, "Dirichlet concentration of the label partition");
  app.add_option("--rint", f.mask_interval, "Mask update interval in rounds");
  app.add_option("--prune-rate", f.prune_rate, "Prune rate p_r");
  app.add_option("--local-epochs", f.local_epochs, "Local epochs E");
  app.add_option("--warmup-clients", f.warmup_clients, "Warm-up clients c_d");
  app.add_option("--warmup-epochs", f.warmup_epochs, "Warm-up epochs E_d");
  app.add_option("--aggregation", aggregation, "Server aggregation (default: wfa for hetero, else fedavg)")
      ->check(CLI::IsMember({"fedavg", "wfa"}));
  app.add_option("--comm-mode", comm_mode, "Payload encoding for bit accounting")
      ->check(CLI::IsMember({"dense", "csr", "bitmap", "value-only"}));
  app.add_option("--value-bits", f.comm.value_bits, "Bits per value");
  app.add_option("--index-bits", f.comm.index_bits, "Bits per CSR column index");
  app.add_option("--pointer-bits", f.comm.pointer_bits, "Bits per CSR row pointer");
  app.add_option("--lr-init", f.lr_init, "Learning rate of round 1");
  app.add_option("--lr-end", f.lr_end, "Learning rate of the last round");
  app.add_option("--batch-size", f.batch_size, "Local minibatch size");
  app.add_option("--eval-every", f.eval_every, "Evaluate every n rounds (the last round always)");
  app.add_option("--threads", f.threads, "Client workers (0: FLASH_SIM_THREADS or all cores)");
  app.add_option("--seed", f.seed, "Master seed");
  app.add_option("--out", o.out_dir, "Output directory");
  app.add_option("--synth-classes", o.synth_classes, "Synthetic classes");
  app.add_option("--synth-train-per-class", o.synth_train_per_class, "Synthetic training samples per class");
  app.add_option("--synth-test-per-class", o.synth_test_per_class, "Synthetic test samples per class");
  app.add_option("--synth-dim", o.synth_dim, "Synthetic feature dimension");
  app.add_option("--synth-hidden", o.synth_hidden, "Hidden units of the synthetic MLP");
  app.add_option("--synth-separation", o.synth_separation, "Distance between synthetic class means");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    throw HelpRequested(app.help());
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }

  if (auto* cfg = app.get_config_ptr(); cfg && cfg->count() > 0) o.config_file = cfg->as<std::string>();
  try {
    f.algo = parse_algorithm(algo);
    if (!aggregation.empty()) f.aggregation = parse_aggregation(aggregation);
    f.comm.mode = parse_comm_mode(comm_mode);
    f.validate();
  } catch (const UsageError&) {
    throw;
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (o.dataset == "synth" && (o.synth_classes < 2 || o.synth_dim == 0 || o.synth_hidden == 0 ||
                               o.synth_train_per_class == 0 || o.synth_test_per_class == 0 ||
                               !(o.synth_separation > 0.0))) {
    throw UsageError("synth-*: invalid synthetic dataset settings");
  }
  return o;
}

std::string timestamp_utc(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string format_round_row(const RoundRecord& rec) {
  std::string row = std::to_string(rec.round);
  row += ',' + fmt_real(rec.test_acc, "%.6f");
  row += ',' + fmt_real(rec.train_loss, "%.6f");
  row += ',' + fmt_real(rec.sm_global, "%.6f");
  row += ',' + std::to_string(rec.uplink_bits);
  row += ',' + std::to_string(rec.downlink_bits);
  row += ',' + fmt_real(rec.cum_flops, "%.0f");
  return row;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& out_dir, std::size_t weight_layers)
    : dir_(out_dir), layers_(weight_layers) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw std::runtime_error("cannot create " + dir_.string() + ": " + ec.message());
  rounds_ = open_csv(dir_ / "rounds.csv");
  rounds_ << kRoundsHeader << '\n' << std::flush;
  sm_ = open_csv(dir_ / "sm_layers.csv");
  sm_ << "round";
  for (std::size_t l = 0; l < layers_; ++l) sm_ << ",layer" << l;
  sm_ << '\n' << std::flush;
}

void MetricsWriter::write_manifest(const RunManifest& manifest) {
  write_json(dir_ / "manifest.json", manifest_json(manifest));
}

void MetricsWriter::append(const RoundRecord& rec) {
  rounds_ << format_round_row(rec) << '\n' << std::flush;
  sm_ << rec.round;
  for (double v : rec.sm_layers) sm_ << ',' << fmt_real(v, "%.6f");
  sm_ << '\n' << std::flush;
  if (!rounds_ || !sm_) throw std::runtime_error("write failed in " + dir_.string());
}

void MetricsWriter::finish(RunManifest manifest, const std::vector<RoundRecord>& records) {
  if (manifest.finished_at.empty()) manifest.finished_at = timestamp_utc();
  write_manifest(manifest);
  json s;
  s["rounds_completed"] = records.size();
  s["rounds_requested"] = manifest.options.fed.rounds;
  if (!records.empty()) {
    const auto& last = records.back();
    s["final_test_acc"] = std::isnan(last.test_acc) ? json(nullptr) : json(last.test_acc);
    double best = -1.0;
    for (const auto& r : records) {
      if (!std::isnan(r.test_acc)) best = std::max(best, r.test_acc);
    }
    s["best_test_acc"] = best < 0.0 ? json(nullptr) : json(best);
    s["uplink_bits"] = last.uplink_bits;
    s["downlink_bits"] = last.downlink_bits;
    s["total_bits"] = last.uplink_bits + last.downlink_bits;
    s["cum_flops"] = last.cum_flops;
    s["final_server_density"] = last.server_density;
    std::size_t dropped = 0;
    for (const auto& r : records) dropped += r.dropped;
    s["dropped_client_updates"] = dropped;
  }
  s["started_at"] = manifest.started_at;
  s["finished_at"] = manifest.finished_at;
  write_json(dir_ / "summary.json", s);
}

void emit_metrics(const std::vector<RoundRecord>& records, const std::filesystem::path& out_dir,
                  const RunManifest& manifest, std::size_t weight_layers) {
  MetricsWriter w(out_dir, weight_layers);
  w.write_manifest(manifest);
  for (const auto& r : records) w.append(r);
  w.finish(manifest, records);
}

}  // namespace flashsim

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "flashsim/error.hpp"
#include "flashsim/federation.hpp"

namespace flashsim {

/// Bad command line or config file. The message names the offending key.
class UsageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Thrown by parse_config for --help; what() is the help text.
class HelpRequested : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  FederationConfig fed;
  std::string dataset = "mnist";  // "mnist" or "synth"
  std::filesystem::path data_dir = "data/mnist";
  std::filesystem::path out_dir = "runs/latest";
  std::optional<std::filesystem::path> config_file;

  // Synthetic data and the MLP trained on it.
  std::size_t synth_classes = 10;
  std::size_t synth_train_per_class = 200;
  std::size_t synth_test_per_class = 50;
  std::size_t synth_dim = 32;
  std::size_t synth_hidden = 64;
  double synth_separation = 4.0;
};

/// Flags override the key=value config file (--config), which overrides the
/// defaults. Config keys are the long flag names without dashes, e.g.
/// `algo = jmwst`; `#` starts a comment. Throws UsageError or HelpRequested.
RunOptions parse_config(int argc, const char* const* argv);

struct RunManifest {
  RunOptions options;
  std::uint64_t dataset_checksum = 0;
  std::string model;
  std::string version;
  std::string started_at;
  std::string finished_at;
};

std::string timestamp_utc(std::chrono::system_clock::time_point t = std::chrono::system_clock::now());

/// Exact header of rounds.csv.
inline constexpr const char* kRoundsHeader = "round,test_acc,train_loss,sm_global,uplink_bits,downlink_bits,cum_flops";

/// Writes manifest.json up front, appends one flushed row per round to
/// rounds.csv and sm_layers.csv, and summary.json at the end. Throws
/// std::runtime_error naming the path on IO failure.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& out_dir, std::size_t weight_layers);

  void write_manifest(const RunManifest& manifest);
  void append(const RoundRecord& rec);
  /// summary.json plus the manifest again with its finish time.
  void finish(RunManifest manifest, const std::vector<RoundRecord>& records);

 private:
  std::filesystem::path dir_;
  std::size_t layers_;
  std::ofstream rounds_;
  std::ofstream sm_;
};

/// Batch form: writes every record through a fresh MetricsWriter.
void emit_metrics(const std::vector<RoundRecord>& records, const std::filesystem::path& out_dir,
                  const RunManifest& manifest, std::size_t weight_layers);

/// One CSV row of rounds.csv (no newline).
std::string format_round_row(const RoundRecord& rec);

}  // namespace flashsim

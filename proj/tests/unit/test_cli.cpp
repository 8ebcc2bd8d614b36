#include <gtest/gtest.h>

#include <limits>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "flashsim/cli.hpp"
#include "flashsim/data.hpp"

using namespace flashsim;
namespace fs = std::filesystem;

namespace {

RunOptions parse(std::vector<std::string> args) {
  args.insert(args.begin(), "flash_sim");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return parse_config(static_cast<int>(argv.size()), argv.data());
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("flashsim_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string l; std::getline(ss, l);) out.push_back(l);
  return out;
}

/// Three synthetic rounds written through the metrics writer.
void tiny_run(Algorithm algo, const fs::path& out) {
  RunOptions o;
  o.fed.algo = algo;
  o.fed.rounds = 3;
  o.fed.num_clients = 6;
  o.fed.clients_per_round = 3;
  o.fed.warmup_clients = 2;
  o.fed.warmup_epochs = 1;
  o.fed.batch_size = 8;
  o.fed.threads = 2;
  Rng a(1), b(2);
  const auto train = synth_dataset(3, 30, 6, 3.0, a);
  const auto test = synth_dataset(3, 10, 6, 3.0, b, Split::kTest);
  const auto spec = ModelSpec::mlp(6, 10, 3);
  RunManifest man;
  man.options = o;
  man.model = spec.describe();
  MetricsWriter w(out, spec.weight_layer_count());
  w.write_manifest(man);
  const auto recs = run_flash(o.fed, spec, train, test, [&](const RoundRecord& r, const RoundDetail&) { w.append(r); });
  w.finish(man, recs);
}

}  // namespace

TEST(ParseConfig, Defaults) {
  const auto o = parse({});
  EXPECT_EQ(o.fed.algo, Algorithm::kSpdst);
  EXPECT_DOUBLE_EQ(o.fed.density, 0.1);
  EXPECT_EQ(o.fed.rounds, 400u);
  EXPECT_EQ(o.fed.num_clients, 100u);
  EXPECT_EQ(o.fed.clients_per_round, 10u);
  EXPECT_EQ(o.fed.warmup_clients, 10u);
  EXPECT_EQ(o.fed.warmup_epochs, 10u);
  EXPECT_EQ(o.fed.local_epochs, 1u);
  EXPECT_EQ(o.fed.batch_size, 32u);
  EXPECT_DOUBLE_EQ(o.fed.prune_rate, 0.25);
  EXPECT_EQ(o.fed.comm.mode, CommMode::kCsr);
}

TEST(ParseConfig, FlagsAndLists) {
  const auto o = parse({"--algo", "jmwst", "--rint", "5", "--comm-mode", "value-only", "--density-set", "0.05,0.1"});
  EXPECT_EQ(o.fed.algo, Algorithm::kJmwst);
  EXPECT_EQ(o.fed.mask_interval, 5u);
  EXPECT_EQ(o.fed.comm.mode, CommMode::kValueOnly);
  EXPECT_EQ(o.fed.density_set, (std::vector<double>{0.05, 0.1}));
}

TEST(ParseConfig, BadValuesAreUsageErrors) {
  try {
    parse({"--density", "1.5"});
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("density"), std::string::npos);
  }
  EXPECT_THROW(parse({"--bogus", "1"}), UsageError);
  EXPECT_THROW(parse({"--algo", "sgd"}), UsageError);
  EXPECT_THROW(parse({"--clients", "5", "--clients-per-round", "6"}), UsageError);
  EXPECT_THROW(parse({"--help"}), HelpRequested);
}

TEST(ParseConfig, FlagsOverrideConfigFile) {
  const auto dir = scratch("conf");
  std::ofstream(dir / "run.conf") << "# comment\nalgo = pdst\nrounds = 12\ndensity-set = 0.1,0.2\n";
  const auto o = parse({"--config", (dir / "run.conf").string(), "--rounds", "7"});
  EXPECT_EQ(o.fed.algo, Algorithm::kPdst);
  EXPECT_EQ(o.fed.rounds, 7u);
  EXPECT_EQ(o.fed.density_set, (std::vector<double>{0.1, 0.2}));
  std::ofstream(dir / "bad.conf") << "colour = red\n";
  EXPECT_THROW(parse({"--config", (dir / "bad.conf").string()}), UsageError);
  fs::remove_all(dir);
}

TEST(Metrics, RowFormatting) {
  RoundRecord r;
  r.round = 4;
  r.test_acc = std::numeric_limits<double>::quiet_NaN();
  r.train_loss = 0.5;
  r.uplink_bits = 10;
  r.downlink_bits = 20;
  r.cum_flops = 1e6;
  EXPECT_EQ(format_round_row(r), "4,,0.500000,0.000000,10,20,1000000");
}

TEST(Metrics, ThreeRoundRunFiles) {
  const auto dir = scratch("run");
  tiny_run(Algorithm::kSpdst, dir / "a");
  const auto rows = lines(slurp(dir / "a" / "rounds.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], kRoundsHeader);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].substr(0, 2), std::to_string(i) + ",");
    EXPECT_NE(rows[i].find(",0.000000,"), std::string::npos) << rows[i];
  }
  EXPECT_EQ(lines(slurp(dir / "a" / "sm_layers.csv")).size(), 4u);
  EXPECT_TRUE(fs::exists(dir / "a" / "manifest.json"));
  EXPECT_NE(slurp(dir / "a" / "summary.json").find("final_test_acc"), std::string::npos);

  tiny_run(Algorithm::kSpdst, dir / "b");
  EXPECT_EQ(slurp(dir / "a" / "rounds.csv"), slurp(dir / "b" / "rounds.csv"));
  fs::remove_all(dir);
}

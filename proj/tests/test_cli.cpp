// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "chordprompt/binary_io.hpp"
#include "chordprompt/cli.hpp"

namespace fs = std::filesystem;

namespace {

// Small enough that a full gen/pretrain/train/eval cycle takes well under a second.
const std::vector<std::string> kTiny = {
    "--layers=4",        "--text-width=8",  "--vision-width=8", "--heads=2",
    "--max-text-tokens=4", "--image-size=8", "--patch-size=4",  "--vocab-size=32",
    "--joint-width=8",   "--mlp-hidden=16", "--domains=2",      "--classes=3",
    "--samples-per-class=6", "--base-samples-per-class=4", "--pretrain-iterations=10",
    "--eval-every=5",    "--target-accuracy=0", "--iterations=3", "--batch=4", "--depth=2"};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("cp_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& cmd, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"chordprompt", cmd};
    for (const auto& a : kTiny) args.push_back(a);
    args.push_back("--data=" + (dir_ / "data").string());
    args.push_back("--backbone=" + (dir_ / "bb.cpbb").string());
    args.push_back("--pool=" + (dir_ / "pool.cpp1").string());
    args.push_back("--out=" + (dir_ / "out").string());
    for (auto& a : extra) args.push_back(a);
    out_.str("");
    err_.str("");
    return chordprompt::cli::run(args, out_, err_);
  }

  std::vector<std::uint8_t> bytes(const fs::path& p) { return chordprompt::read_file(p.string()); }

  fs::path dir_;
  std::ostringstream out_, err_;
};

std::map<std::string, std::vector<std::uint8_t>> snapshot(const fs::path& d) {
  std::map<std::string, std::vector<std::uint8_t>> m;
  for (const auto& e : fs::directory_iterator(d))
    m[e.path().filename().string()] = chordprompt::read_file(e.path().string());
  return m;
}

}  // namespace

TEST_F(CliTest, GenIsDeterministic) {
  ASSERT_EQ(run("gen", {"--seed=7"}), 0) << err_.str();
  const auto a = snapshot(dir_ / "data");
  fs::remove_all(dir_ / "data");
  ASSERT_EQ(run("gen", {"--seed=7"}), 0);
  EXPECT_EQ(snapshot(dir_ / "data"), a);
  EXPECT_EQ(a.size(), 4u);  // manifest, base, two tasks
  ASSERT_EQ(run("gen", {"--seed=8", "--data=" + (dir_ / "other").string()}), 0);
  EXPECT_NE(snapshot(dir_ / "other"), a);
}

TEST_F(CliTest, TrainThenEvalReproducesMetrics) {
  ASSERT_EQ(run("gen"), 0) << err_.str();
  ASSERT_EQ(run("pretrain"), 0) << err_.str();
  ASSERT_EQ(run("train"), 0) << err_.str();
  const auto metrics = bytes(dir_ / "out" / "metrics.json");
  const auto csv = bytes(dir_ / "out" / "metrics.csv");
  const auto pool = bytes(dir_ / "pool.cpp1");
  EXPECT_TRUE(fs::exists(dir_ / "out" / "train_log.json"));
  fs::remove_all(dir_ / "out");
  ASSERT_EQ(run("eval"), 0) << err_.str();
  EXPECT_EQ(bytes(dir_ / "out" / "metrics.json"), metrics);
  EXPECT_EQ(bytes(dir_ / "out" / "metrics.csv"), csv);
  // and a second training run is byte-identical
  ASSERT_EQ(run("train"), 0);
  EXPECT_EQ(bytes(dir_ / "pool.cpp1"), pool);
  EXPECT_EQ(bytes(dir_ / "out" / "metrics.json"), metrics);
  const std::string js(metrics.begin(), metrics.end());
  EXPECT_NE(js.find("\"config_hash\""), std::string::npos);
  EXPECT_NE(js.find("\"seed\": 7"), std::string::npos);
  ASSERT_EQ(run("inspect-pool"), 0);
  EXPECT_NE(out_.str().find("entries 2"), std::string::npos);
}

TEST_F(CliTest, OrderAndFewShot) {
  ASSERT_EQ(run("gen"), 0);
  ASSERT_EQ(run("pretrain"), 0);
  ASSERT_EQ(run("train", {"--order=1,0", "--few-shot", "--shots=1", "--few-shot-iterations=2"}), 0)
      << err_.str();
  ASSERT_EQ(run("inspect-pool", {"--json"}), 0);
  const std::string s = out_.str();
  EXPECT_LT(s.find("domain1"), s.find("domain0"));
  EXPECT_NE(run("train", {"--order=1,1"}), 0);
  EXPECT_NE(err_.str().find("permutation"), std::string::npos) << err_.str();
  // eval with a different order no longer matches the pool
  EXPECT_NE(run("eval"), 0);
}

TEST_F(CliTest, SweepGridRows) {
  ASSERT_EQ(run("gen"), 0);
  ASSERT_EQ(run("pretrain"), 0);
  ASSERT_EQ(run("sweep", {"--iterations=1", "--axis", "depth=0,2,4", "--axis", "plen=1,2,4,8"}), 0)
      << err_.str();
  const auto csv = bytes(dir_ / "out" / "sweep.csv");
  const std::string s(csv.begin(), csv.end());
  std::size_t lines = 0;
  for (char c : s) lines += c == '\n';
  EXPECT_EQ(lines, 2u + 12u);  // comment, header, 12 grid points
  EXPECT_NE(s.find("depth,plen,transfer"), std::string::npos);
  EXPECT_NE(run("sweep", {"--axis", "depth=0,9"}), 0);
  EXPECT_NE(run("sweep", {"--axis", "width=1"}), 0);
}

TEST_F(CliTest, ErrorsNameTheProblem) {
  EXPECT_NE(run("train"), 0);  // no data yet
  EXPECT_NE(err_.str().find("manifest.json"), std::string::npos) << err_.str();
  ASSERT_EQ(run("gen"), 0);
  EXPECT_NE(run("pretrain", {"--heads=3"}), 0);
  EXPECT_NE(err_.str().find("heads"), std::string::npos) << err_.str();
  EXPECT_NE(run("train", {"--depth=notanumber"}), 0);
  EXPECT_NE(err_.str().find("--depth"), std::string::npos) << err_.str();
  ASSERT_EQ(run("pretrain", {"--target-accuracy=1.01"}), chordprompt::cli::kExitPretrainFailure);
  EXPECT_NE(err_.str().find("pretraining-failure"), std::string::npos);
}

TEST_F(CliTest, ConfigFileWithOverride) {
  const auto ini = dir_ / "run.ini";
  const std::string text = "seed = 11\niterations = 2\n";
  chordprompt::write_file(ini.string(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  ASSERT_EQ(run("gen", {"--config=" + ini.string()}), 0) << err_.str();
  const auto m = bytes(dir_ / "data" / "manifest.json");
  EXPECT_NE(std::string(m.begin(), m.end()).find("\"seed\": 11"), std::string::npos);
  ASSERT_EQ(run("gen", {"--config=" + ini.string(), "--seed=12"}), 0);
  const auto m2 = bytes(dir_ / "data" / "manifest.json");
  EXPECT_NE(std::string(m2.begin(), m2.end()).find("\"seed\": 12"), std::string::npos);
}

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "nirnl/nirnl.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string err;
};

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("nirnl_test_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Outcome cli(const std::string& args) {
  const auto err = scratch() / "stderr.txt";
  const std::string cmd = std::string(NIRNL_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(err);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::size_t data_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::size_t n = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, SynthCorruptSplit) {
  const auto d = scratch() / "d";
  ASSERT_EQ(cli("synth --out " + d.string() +
                " --classes 10 --n 2000 --dv 64 --dt 48 --separation 10 --noise-std 1 --seed 7")
                .code,
            0);
  EXPECT_NO_THROW(nirnl::load_dataset(d));
  ASSERT_EQ(cli("corrupt --data " + d.string() + " --rate 0.6 --seed 7").code, 0);
  EXPECT_EQ(data_lines(d / "flips.csv"), 1200u);
  ASSERT_EQ(cli("split --data " + d.string() + " --train 1800 --val 100 --test 100 --seed 7").code, 0);
  const auto s = nirnl::load_splits(d / "splits.json", 2000);
  EXPECT_EQ(s.train.size(), 1800u);
}

TEST(Cli, MissingConfigNamesFile) {
  const auto d = scratch() / "absent";
  const auto r = cli("train --data " + d.string() + " --config missing.cfg --out " + (scratch() / "o").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("missing.cfg"), std::string::npos) << r.err;
}

TEST(Cli, UnknownFlagPrintsUsage) {
  const auto r = cli("synth --bogus 3");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("synth"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
}

TEST(Cli, NoSubcommandFails) { EXPECT_NE(cli("").code, 0); }

TEST(Cli, TrainTwiceIsByteIdenticalAndEvalWritesReports) {
  const auto d = scratch() / "small";
  ASSERT_EQ(cli("synth --out " + d.string() + " --classes 4 --n 300 --dv 12 --dt 10 --separation 10 --noise-std 1 --seed 3").code, 0);
  ASSERT_EQ(cli("corrupt --data " + d.string() + " --rate 0.4 --seed 3").code, 0);
  ASSERT_EQ(cli("split --data " + d.string() + " --train 200 --val 50 --test 50 --seed 3").code, 0);
  const auto cfg = scratch() / "small.cfg";
  std::ofstream(cfg) << "seed=5\nepochs=4\nwarmup_epochs=2\nbatch_size=50\nlearning_rate=1e-3\nembed_dim=16\n"
                        "hidden_visual=32\nhidden_text=32\nk_neighbors=5\n";
  const auto o1 = scratch() / "run1", o2 = scratch() / "run2";
  ASSERT_EQ(cli("train --data " + d.string() + " --config " + cfg.string() + " --out " + o1.string()).code, 0);
  ASSERT_EQ(cli("train --data " + d.string() + " --config " + cfg.string() + " --out " + o2.string()).code, 0);
  EXPECT_EQ(slurp(o1 / "metrics.jsonl"), slurp(o2 / "metrics.jsonl"));
  EXPECT_EQ(data_lines(o1 / "metrics.jsonl") + 1, 4u);
  EXPECT_TRUE(fs::exists(o1 / "checkpoints" / "epoch_3" / "partition.csv"));
  EXPECT_FALSE(fs::exists(o1 / "checkpoints" / "epoch_1" / "partition.csv"));
  EXPECT_EQ(data_lines(o1 / "checkpoints" / "epoch_3" / "partition.csv"), 200u);
  EXPECT_EQ(data_lines(o1 / "partition_report.csv"), 2u);

  ASSERT_EQ(cli("eval --data " + d.string() + " --checkpoint " + (o1 / "best").string() + " --split test").code, 0);
  const auto rep = nlohmann::json::parse(slurp(o1 / "best" / "eval_report.json"));
  EXPECT_GT(rep["map_i2t"].get<double>(), 0.0);
  EXPECT_EQ(data_lines(o1 / "best" / "pr_curve.csv"), 11u);
}

TEST(Cli, EvalMissingCheckpointFails) {
  const auto d = scratch() / "tiny";
  ASSERT_EQ(cli("synth --out " + d.string() + " --classes 2 --n 20 --dv 3 --dt 3 --separation 5 --noise-std 1 --seed 1").code, 0);
  ASSERT_EQ(cli("split --data " + d.string() + " --train 10 --val 5 --test 5 --seed 1").code, 0);
  const auto r = cli("eval --data " + d.string() + " --checkpoint " + (scratch() / "nope").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("nope"), std::string::npos) << r.err;
}

// Runs the built alphacal binary and checks exit codes and output files.

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "alphacal/harness/config.hpp"
#include "alphacal/harness/csv.hpp"
#include "alphacal/harness/sweep.hpp"

namespace fs = std::filesystem;
using namespace alphacal;
using namespace alphacal::harness;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("alphacal_cli_" + std::to_string(::getpid()) + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(const std::string& args) const {
    const std::string cmd = std::string(ALPHACAL_CLI_PATH) + " " + args + " >" + path("stdout.txt") + " 2>" +
                            path("stderr.txt");
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  ExperimentConfig config() const {
    ExperimentConfig c;
    c.seed = 9;
    c.task.input_dim = 2;
    c.task.output_dim = 2;
    c.n_points = 600;
    c.dataset = path("data/points.csv");
    c.output_dir = path("out");
    c.hidden = {8};
    c.epochs = 3;
    c.batch_size = 64;
    c.k_eval = 8;
    c.k_val = 4;
    c.fine_tune.steps = 10;
    c.fine_tune.batch_size = 30;
    c.fine_tune.k = 2;
    c.trilts.max_iters = 100;
    c.alpha_grid = {0.0, 1.0};
    c.train_baselines = false;
    return c;
  }

  std::string write_config(const ExperimentConfig& c, const std::string& name = "config.json") const {
    write_text(path(name), config_to_json(c).dump(1));
    return path(name);
  }

  fs::path dir_;
};

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("train --no-such-flag"), 1);
  EXPECT_EQ(run("train --config " + path("absent.json")), 1);
  const std::string cfg = write_config(config());
  EXPECT_EQ(run("calibrate --config " + cfg), 1);
  EXPECT_EQ(run("calibrate --config " + cfg + " --method bogus"), 1);
  EXPECT_EQ(run("calibrate --config " + cfg + " --method none"), 1);
  EXPECT_EQ(run("train --config " + cfg + " --alpha abc"), 1);
}

TEST_F(Cli, HelpExitsZero) { EXPECT_EQ(run("--help"), 0); }

TEST_F(Cli, ConfigErrorsExitOne) {
  write_text(path("unknown.json"), R"({"seed": 1, "epochz": 3})");
  EXPECT_EQ(run("generate-data --config " + path("unknown.json")), 1);
  EXPECT_NE(read_text(path("stderr.txt")).find("epochz"), std::string::npos);
  write_text(path("bad.json"), "{ not json");
  EXPECT_EQ(run("generate-data --config " + path("bad.json")), 1);
  write_text(path("range.json"), R"({"epochs": 0})");
  EXPECT_EQ(run("generate-data --config " + path("range.json")), 1);
}

TEST_F(Cli, MissingAndMalformedFilesExitThree) {
  const std::string cfg = write_config(config());
  // No dataset generated yet.
  EXPECT_EQ(run("train --config " + cfg), 3);
  ASSERT_EQ(run("generate-data --config " + cfg), 0);
  EXPECT_EQ(run("evaluate --config " + cfg + " " + path("nope.json")), 3);
  write_text(path("broken.json"), "{\"layers\": [");
  EXPECT_EQ(run("evaluate --config " + cfg + " " + path("broken.json")), 3);
  write_text(path("shape.json"), R"({"layers": [{"mu_w": [[1, 2]], "rho_w": [[1]], "mu_b": [0], "rho_b": [0]}]})");
  EXPECT_EQ(run("evaluate --config " + cfg + " " + path("shape.json")), 3);
  write_text(path("curves.csv"), "nominal,empirical,method,alpha\n0.5,0.5,none,0\n0.6,oops,none,0\n");
  EXPECT_EQ(run("report --config " + cfg + " " + path("curves.csv")), 3);
  EXPECT_NE(read_text(path("stderr.txt")).find("line 3"), std::string::npos);
}

TEST_F(Cli, DivergenceExitsTwo) {
  ExperimentConfig c = config();
  c.learning_rate = 1e30;
  const std::string cfg = write_config(c);
  ASSERT_EQ(run("generate-data --config " + cfg), 0);
  EXPECT_EQ(run("train --config " + cfg), 2);
}

TEST_F(Cli, FullPipeline) {
  const std::string cfg = write_config(config());
  ASSERT_EQ(run("generate-data --config " + cfg), 0);
  EXPECT_TRUE(fs::exists(path("data/points.csv")));
  EXPECT_TRUE(fs::exists(meta_path_for(path("data/points.csv"))));

  ASSERT_EQ(run("train --config " + cfg + " --alpha 1"), 0);
  EXPECT_TRUE(fs::exists(path("out/model.json")));
  // one row per step: 420 training points in batches of 64, three epochs
  EXPECT_EQ(read_csv(path("out/loss.csv")).rows.size(), 21u);

  ASSERT_EQ(run("calibrate --config " + cfg + " --method sTS"), 0);
  ASSERT_EQ(run("calibrate --config " + cfg + " --method LL --alpha 0.5 --out " + path("ll.json")), 0);
  ASSERT_EQ(run("calibrate --config " + cfg + " --method TrilLLmean --alpha vi"), 0);
  EXPECT_TRUE(fs::exists(path("out/calibrator_sTS.json")));
  EXPECT_TRUE(fs::exists(path("out/calibrator_TrilLLmean.json")));

  ASSERT_EQ(run("evaluate --config " + cfg + " --calibrator " + path("ll.json")), 0);
  const CsvTable ev = read_csv(path("out/evaluation.csv"));
  ASSERT_EQ(ev.rows.size(), 1u);
  EXPECT_EQ(ev.rows[0][ev.column("method")], "LL");
  EXPECT_EQ(ev.rows[0][ev.column("alpha")], "0.5");

  ASSERT_EQ(run("sweep-alpha --config " + cfg), 0);
  const SweepResult r = results_from_table(read_csv(path("out/results.csv")));
  // none plus eight methods, two grid points each
  EXPECT_EQ(r.rows.size(), 18u);
  for (const auto& row : r.rows) EXPECT_EQ(row.status, "ok") << row.method << " " << row.alpha;
  const std::string first = read_text(path("out/results.csv"));

  ASSERT_EQ(run("report --config " + cfg), 0);
  EXPECT_TRUE(fs::exists(path("out/report/reliability_LLmu.svg")));
  EXPECT_TRUE(fs::exists(path("out/report/reliability_none.csv")));

  // Same seed, same bytes.
  ASSERT_EQ(run("sweep-alpha --config " + cfg + " --out " + path("again")), 0);
  EXPECT_EQ(read_text(path("again/results.csv")), first);
}

TEST_F(Cli, SeedFlagOverridesConfig) {
  const std::string cfg = write_config(config());
  ASSERT_EQ(run("generate-data --config " + cfg + " --out " + path("a.csv")), 0);
  ASSERT_EQ(run("generate-data --config " + cfg + " --seed 77 --out " + path("b.csv")), 0);
  ASSERT_EQ(run("generate-data --config " + cfg + " --out " + path("c.csv")), 0);
  EXPECT_NE(read_text(path("a.csv")), read_text(path("b.csv")));
  EXPECT_EQ(read_text(path("a.csv")), read_text(path("c.csv")));
}

}  // namespace

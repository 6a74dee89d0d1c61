#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "bcr/cli.hpp"
#include "bcr/config.hpp"
#include "bcr/datasets.hpp"

using namespace bcr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("bcr_cli_" + std::to_string(::getpid()) + "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "bcrmil");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    log_.str({});
    return run_cli(static_cast<int>(argv.size()), argv.data(), log_);
  }

  std::vector<json> log_lines() const {
    std::vector<json> out;
    std::istringstream in(log_.str());
    std::string line;
    while (std::getline(in, line)) out.push_back(json::parse(line));
    return out;
  }

  fs::path path(const std::string& rel) const { return dir_ / rel; }

  void synth(const std::string& out, std::size_t cases = 40, std::uint64_t seed = 1) {
    ASSERT_EQ(run({"synth", "--out", path(out).string(), "--cases", std::to_string(cases), "--dim", "6",
                   "--patches-min", "6", "--patches-max", "10", "--severity-max", "30", "--baseline-hazard",
                   "3.059023205018258e-07", "--seed", std::to_string(seed)}),
              0)
        << log_.str();
  }

  void write(const std::string& rel, const std::string& text) const { std::ofstream(path(rel)) << text; }

  fs::path dir_;
  std::stringstream log_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

int run_binary(const std::string& args, std::string* err) {
  const auto errfile = fs::temp_directory_path() / ("bcr_cli_err_" + std::to_string(::getpid()));
  const std::string cmd = std::string(BCRMIL_CLI_PATH) + " " + args + " >/dev/null 2>" + errfile.string();
  const int status = std::system(cmd.c_str());
  if (err) *err = slurp(errfile);
  fs::remove(errfile);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kSmallConfig =
    "# tiny run\n"
    "epochs_fast = 2\n"
    "epochs_slow = 4\n"
    "hidden = 4\n"
    "top_k = 3\n"
    "min_epoch_default = 2\n"
    "lr = 0.001\n";

}  // namespace

TEST_F(CliTest, SynthIsDeterministic) {
  synth("a");
  synth("b");
  const auto a = tree(path("a")), b = tree(path("b"));
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.count("manifest.csv"));
  EXPECT_TRUE(a.count("ground_truth.csv"));
  EXPECT_TRUE(a.count("run.json"));
  EXPECT_EQ(load_manifest(path("a/manifest.csv")).rows.size(), 40u);
}

TEST_F(CliTest, RunSidecarCarriesConfigHash) {
  write("cfg.txt", kSmallConfig);
  synth("d");
  ASSERT_EQ(run({"train-fast", "--manifest", path("d/manifest.csv").string(), "--out", path("fast").string(),
                 "--config", path("cfg.txt").string(), "--seed", "5"}),
            0)
      << log_.str();
  auto cfg = load_run_config(path("cfg.txt"));
  cfg.seed = 5;
  const json side = json::parse(slurp(path("fast/run.json")));
  EXPECT_EQ(side["command"], "train-fast");
  EXPECT_EQ(side["config_hash"], cfg.hash());
  EXPECT_EQ(side["outputs"], (json{"fast_report.json", "fast_weights.json"}));
  for (const auto& l : log_lines()) EXPECT_TRUE(l.contains("event"));
}

TEST_F(CliTest, PipelineSingleFoldPredictionIsExpOfNegativeRisk) {
  write("cfg.txt", kSmallConfig);
  synth("d", 50);
  const std::string manifest = path("d/manifest.csv").string(), cfg = path("cfg.txt").string();
  ASSERT_EQ(run({"train-fast", "--manifest", manifest, "--out", path("fast").string(), "--config", cfg}), 0) << log_.str();
  ASSERT_EQ(run({"make-masks", "--manifest", manifest, "--fast-weights", path("fast/fast_weights.json").string(), "--m",
                 "10,20", "--out", path("masks").string(), "--config", cfg}),
            0)
      << log_.str();
  EXPECT_TRUE(fs::exists(path("masks") / mask_file_name(10)));
  const auto masks20 = path("masks") / mask_file_name(20);
  ASSERT_TRUE(fs::exists(masks20));
  ASSERT_EQ(run({"train-slow", "--manifest", manifest, "--masks", masks20.string(), "--out", path("slow").string(),
                 "--config", cfg}),
            0)
      << log_.str();
  EXPECT_TRUE(fs::exists(path("slow/loss_curves.csv")));
  ASSERT_EQ(run({"predict", "--manifest", manifest, "--weights-dir", path("slow").string(), "--masks", masks20.string(),
                 "--split", "test", "--attention-out", path("att.csv").string(), "--out", path("pred").string(),
                 "--config", cfg}),
            0)
      << log_.str();

  std::ifstream in(path("pred/predictions.csv"));
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "case_id,mean_log_risk,ttr_years,fold_0");
  int rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string id, mean, ttr, fold;
    std::getline(ss, id, ',');
    std::getline(ss, mean, ',');
    std::getline(ss, ttr, ',');
    std::getline(ss, fold, ',');
    EXPECT_EQ(std::stod(ttr), std::exp(-std::stod(mean))) << line;
    EXPECT_EQ(std::stod(fold), std::stod(mean));
    ++rows;
  }
  EXPECT_EQ(rows, 10);
  EXPECT_TRUE(fs::exists(path("att.csv")));
}

TEST_F(CliTest, CrossValidatedSlowTrainingWritesFolds) {
  write("cfg.txt", kSmallConfig);
  synth("d", 30);
  const std::string manifest = path("d/manifest.csv").string();
  ASSERT_EQ(run({"train-slow", "--manifest", manifest, "--cv-folds", "3", "--out", path("cv").string(), "--config",
                 path("cfg.txt").string()}),
            0)
      << log_.str();
  for (int f = 0; f < 3; ++f) EXPECT_TRUE(fs::exists(path("cv/fold_0" + std::to_string(f) + ".json")));
  ASSERT_EQ(run({"predict", "--manifest", manifest, "--weights-dir", path("cv").string(), "--out", path("p").string(),
                 "--config", path("cfg.txt").string()}),
            0)
      << log_.str();
  std::ifstream in(path("p/predictions.csv"));
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "case_id,mean_log_risk,ttr_years,fold_0,fold_1,fold_2");
}

TEST_F(CliTest, UnknownConfigKeyIsRejected) {
  write("bad.txt", "top_k = 5\nlearning_rate = 0.1\n");
  synth("d", 20);
  EXPECT_EQ(run({"train-fast", "--manifest", path("d/manifest.csv").string(), "--out", path("f").string(), "--config",
                 path("bad.txt").string()}),
            1);
  const auto lines = log_lines();
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_EQ(lines[0]["event"], "error");
  EXPECT_EQ(lines[0]["kind"], "ValidationError");
  EXPECT_NE(lines[0]["message"].get<std::string>().find("learning_rate"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("f/run.json")));
}

TEST_F(CliTest, ConfigAcceptsJson) {
  write("cfg.json", R"({"top_k": 7, "attention_input": "risks", "T": 2})");
  const auto cfg = load_run_config(path("cfg.json"));
  EXPECT_EQ(cfg.top_k, 7);
  EXPECT_EQ(cfg.attention_input, AttentionInput::Risks);
  EXPECT_EQ(cfg.T, 2.0);
  EXPECT_THROW(parse_run_config("top_k = 3\ntop_k = 4\n"), ValidationError);
  EXPECT_THROW(parse_run_config("m_percent = 50\n"), ValidationError);
  EXPECT_THROW(parse_run_config("top_k\n"), ValidationError);
  EXPECT_NE(parse_run_config("seed = 1").hash(), parse_run_config("seed = 2").hash());
  EXPECT_EQ(parse_run_config("seed = 1\n").hash(), parse_run_config(R"({"seed": 1})").hash());
}

TEST_F(CliTest, MissingManifestIsAnError) {
  EXPECT_EQ(run({"train-fast", "--manifest", path("nope.csv").string(), "--out", path("f").string()}), 1);
  const auto lines = log_lines();
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_EQ(lines[0]["kind"], "ValidationError");
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({"train-fast", "--out", path("f").string()}), 1);
  ASSERT_EQ(log_lines().size(), 1u);
  EXPECT_EQ(log_lines()[0]["kind"], "UsageError");
  EXPECT_EQ(run({"fly"}), 1);
  EXPECT_EQ(log_lines()[0]["kind"], "UsageError");
  EXPECT_EQ(run({"synth", "--out", path("s").string(), "--hot-fraction", "1.5"}), 1);
  EXPECT_EQ(log_lines()[0]["kind"], "ArgumentError");
}

TEST_F(CliTest, GradcheckPasses) {
  EXPECT_EQ(run({"gradcheck", "--trials", "3", "--out", path("g").string()}), 0) << log_.str();
  const json report = json::parse(slurp(path("g/gradcheck.json")));
  EXPECT_FALSE(report.empty());
}

TEST(CliBinary, ExitCodesAndErrorLine) {
  std::string err;
  EXPECT_EQ(run_binary("--help", nullptr), 0);
  EXPECT_EQ(run_binary("train-slow --manifest /nonexistent/m.csv --out /tmp/bcr_never", &err), 1);
  std::istringstream in(err);
  std::string line, last;
  int n = 0;
  while (std::getline(in, line)) last = line, ++n;
  EXPECT_EQ(n, 1);
  const json j = json::parse(last);
  EXPECT_EQ(j["event"], "error");
  EXPECT_EQ(j["kind"], "ValidationError");
}

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(CONEPOSE_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string set_key(std::string text, const std::string& key, const std::string& value) {
  const std::regex line("(^|\\n)" + key + " = [^\\n]*");
  EXPECT_TRUE(std::regex_search(text, line)) << key;
  return std::regex_replace(text, line, "$1" + key + " = " + value, std::regex_constants::format_first_only);
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("conepose_cli_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::string text = slurp(CONEPOSE_DEFAULT_CONFIG);
    for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
             {"batch_size", "8"}, {"epochs", "3"}, {"learning_rate", "1e-4"}, {"widths", "[4, 4, 8]"},
             {"train_samples", "48"}, {"test_samples", "12"}, {"cones_per_bin", "3"}, {"depth_step", "4.0"},
             {"bbox_trials", "3"}, {"bbox_depths", "[6.0, 12.0]"}, {"kp_trials", "20"}, {"scene_cones", "8"},
             {"stereo_trials", "10"}})
      text = set_key(text, k, v);
    tiny_ = write_config("tiny.toml", text);
    annotated_ = write_config("annotated.toml", set_key(text, "keypoint_source", "\"annotated\""));
  }

  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string write_config(const std::string& name, const std::string& text) {
    const fs::path p = root_ / name;
    std::ofstream(p, std::ios::binary) << text;
    return p.string();
  }

  static std::string dir(const std::string& name) { return (root_ / name).string(); }

  static inline fs::path root_;
  static inline std::string tiny_;
  static inline std::string annotated_;
};

}  // namespace

TEST_F(Cli, NoArgumentsIsUsage) {
  const RunResult r = run_cli("");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("synth"), std::string::npos);
}

TEST_F(Cli, UnknownSubcommandIsUsage) {
  const RunResult r = run_cli("frobnicate --config " + tiny_);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("stereo-eval"), std::string::npos) << r.output;
}

TEST_F(Cli, MissingConfigFlagIsUsage) { EXPECT_EQ(run_cli("synth --out " + dir("x")).code, 1); }

TEST_F(Cli, HelpExitsZero) { EXPECT_EQ(run_cli("--help").code, 0); }

TEST_F(Cli, MissingKeyExitsTwoWithPath) {
  std::string text = slurp(tiny_);
  text = std::regex_replace(text, std::regex("\\ninlier_threshold = [^\\n]*"), "");
  const RunResult r = run_cli("exp-kpvar --config " + write_config("missing.toml", text) + " --out " + dir("m"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("ransac.inlier_threshold"), std::string::npos) << r.output;
}

TEST_F(Cli, UnknownKeyExitsTwo) {
  const RunResult r = run_cli("exp-kpvar --config " + write_config("extra.toml", slurp(tiny_) + "\n[ransac2]\nx = 1\n"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("ransac2.x"), std::string::npos) << r.output;
}

TEST_F(Cli, UnreadableConfigExitsTwo) { EXPECT_EQ(run_cli("synth --config " + dir("nope.toml")).code, 2); }

TEST_F(Cli, MissingModelExitsThree) {
  const RunResult r = run_cli("eval --config " + tiny_ + " --out " + dir("empty"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("error"), std::string::npos);
}

TEST_F(Cli, RerunIsByteIdentical) {
  for (const char* sub : {"estimate", "exp-depth", "exp-kpvar", "stereo-eval"}) {
    ASSERT_EQ(run_cli(std::string(sub) + " --config " + annotated_ + " --out " + dir("r1")).code, 0) << sub;
    ASSERT_EQ(run_cli(std::string(sub) + " --config " + annotated_ + " --out " + dir("r2")).code, 0) << sub;
  }
  int compared = 0;
  for (const auto& entry : fs::directory_iterator(dir("r1"))) {
    const std::string a = slurp(entry.path());
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, slurp(fs::path(dir("r2")) / entry.path().filename())) << entry.path();
    ++compared;
  }
  EXPECT_EQ(compared, 6);  // observations, skipped, depth rows, depth fit, kp variance, stereo
}

TEST_F(Cli, SeedOverrideChangesOutput) {
  ASSERT_EQ(run_cli("exp-depth --config " + annotated_ + " --out " + dir("s1")).code, 0);
  ASSERT_EQ(run_cli("exp-depth --config " + annotated_ + " --seed 99 --out " + dir("s2")).code, 0);
  EXPECT_NE(slurp(fs::path(dir("s1")) / "depth_accuracy.csv"), slurp(fs::path(dir("s2")) / "depth_accuracy.csv"));
}

TEST_F(Cli, SynthTrainEvalConsistency) {
  const std::string out = dir("pipeline");
  ASSERT_EQ(run_cli("synth --config " + tiny_ + " --out " + out).code, 0);
  EXPECT_TRUE(fs::exists(fs::path(out) / "train.cpds"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "test.cpds"));
  const RunResult train = run_cli("train --config " + tiny_ + " --out " + out);
  ASSERT_EQ(train.code, 0) << train.output;
  const RunResult eval = run_cli("eval --config " + tiny_ + " --out " + out);
  ASSERT_EQ(eval.code, 0) << eval.output;

  std::istringstream history(slurp(fs::path(out) / "history.csv"));
  std::string line, last;
  std::getline(history, line);
  EXPECT_EQ(line, "epoch,mean_loss");
  int rows = 0;
  while (std::getline(history, line)) {
    last = line;
    ++rows;
  }
  EXPECT_EQ(rows, 3);
  const double history_tail = std::stod(last.substr(last.find(',') + 1));

  std::istringstream evalcsv(slurp(fs::path(out) / "eval.csv"));
  std::getline(evalcsv, line);
  EXPECT_EQ(line, "split,mean_loss,max_keypoint_rms,cr_error_left,cr_error_right");
  std::getline(evalcsv, line);
  ASSERT_EQ(line.rfind("train,", 0), 0u) << line;
  const std::string loss_text = line.substr(6, line.find(',', 6) - 6);
  EXPECT_DOUBLE_EQ(std::stod(loss_text), history_tail);

  const RunResult bbox = run_cli("exp-bbox --config " + tiny_ + " --out " + out);
  ASSERT_EQ(bbox.code, 0) << bbox.output;
  std::istringstream bboxcsv(slurp(fs::path(out) / "bbox_perturbation.csv"));
  std::getline(bboxcsv, line);
  EXPECT_EQ(line, "level,true_z,depth_variance,depth_mean,valid_trials");
  rows = 0;
  while (std::getline(bboxcsv, line)) ++rows;
  EXPECT_EQ(rows, 8);
}

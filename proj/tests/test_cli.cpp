#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "mexfuse/config.hpp"
#include "mexfuse/jsonl.hpp"
#include "mexfuse/pipeline.hpp"

using namespace mexfuse;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path fresh(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mexfuse-cli-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Run cli(const std::string& args, const fs::path& scratch) {
  const fs::path o = scratch / "stdout.txt", e = scratch / "stderr.txt";
  const std::string cmd = std::string("\"") + MEXFUSE_CLI + "\" " + args + " >\"" + o.string() + "\" 2>\"" +
                          e.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(o);
  r.err = slurp(e);
  return r;
}

// Small enough that train + score finish in well under a second.
fs::path tiny_config(const fs::path& dir) {
  const fs::path p = dir / "tiny.json";
  std::ofstream(p) << R"({
    "seed": 3,
    "embedder": {"raw_visual_dim": 12, "visual_tokens": 3, "raw_text_dim": 10, "text_tokens": 4},
    "fusion": {"d_k": 8},
    "pipeline": {"epochs": 2, "window": 3, "train_windows": 8, "lr": 0.01},
    "dataset": {"n_frames": 5}
  })";
  return p;
}

}  // namespace

TEST(Cli, UsageExitCodes) {
  const auto dir = fresh("usage");
  EXPECT_EQ(cli("", dir).code, 2);
  EXPECT_EQ(cli("--help", dir).code, 0);
  EXPECT_EQ(cli("frobnicate", dir).code, 2);
  EXPECT_EQ(cli("train", dir).code, 2);  // --data required
  fs::remove_all(dir);
}

TEST(Cli, ShowDefaultsRoundTrips) {
  const auto dir = fresh("defaults");
  const auto r = cli("config show-defaults", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = Json::parse(r.out);
  EXPECT_EQ(j, RunConfig{}.to_json());
  EXPECT_EQ(RunConfig::from_json(j).hash(), RunConfig{}.hash());
  fs::remove_all(dir);
}

TEST(Cli, UnknownConfigKeyIsUsageError) {
  const auto dir = fresh("badkey");
  std::ofstream(dir / "c.json") << R"({"fusion": {"heads": 4}})";
  const auto r = cli("--config \"" + (dir / "c.json").string() + "\" config show", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("fusion.heads"), std::string::npos) << r.err;
  fs::remove_all(dir);
}

TEST(Cli, MissingFilesNamePath) {
  const auto dir = fresh("missing");
  const std::string cfg = (dir / "nope.json").string();
  auto r = cli("--config \"" + cfg + "\" gen", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(cfg), std::string::npos) << r.err;
  const std::string data = (dir / "no-data").string();
  r = cli("--out \"" + (dir / "o").string() + "\" score --data \"" + data + "\" --model \"" + data + "\"", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(data), std::string::npos) << r.err;
  fs::remove_all(dir);
}

TEST(Cli, MalformedInputReportsLine) {
  const auto dir = fresh("malformed");
  const auto cfg = tiny_config(dir);
  ASSERT_EQ(cli("--config \"" + cfg.string() + "\" --out \"" + (dir / "data").string() + "\" gen", dir).code, 0);
  {
    std::ofstream out(dir / "data" / "tasks.jsonl", std::ios::app);
    out << "{oops\n";
  }
  const auto r = cli("--config \"" + cfg.string() + "\" --out \"" + (dir / "m").string() + "\" train --data \"" +
                         (dir / "data").string() + "\"",
                     dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("tasks.jsonl:5:"), std::string::npos) << r.err;
  fs::remove_all(dir);
}

TEST(Cli, GenIsByteReproducible) {
  const auto dir = fresh("gen");
  const auto cfg = tiny_config(dir);
  const std::string base = "--config \"" + cfg.string() + "\" --out \"" + (dir / "d").string() + "\" gen";
  ASSERT_EQ(cli(base, dir).code, 0);
  std::map<std::string, std::string> first;
  for (const auto& e : fs::directory_iterator(dir / "d")) first[e.path().filename().string()] = slurp(e.path());
  fs::remove_all(dir / "d");
  ASSERT_EQ(cli(base, dir).code, 0);
  for (const auto& [name, bytes] : first) EXPECT_EQ(slurp(dir / "d" / name), bytes) << name;
  EXPECT_TRUE(first.count("run-manifest.json"));
  fs::remove_all(dir);
}

TEST(Cli, TrainScoreCalibrateChain) {
  const auto dir = fresh("chain");
  const std::string cfg = "--config \"" + tiny_config(dir).string() + "\" ";
  const std::string data = (dir / "data").string(), run = (dir / "run").string(), cal = (dir / "cal").string();
  ASSERT_EQ(cli(cfg + "--out \"" + data + "\" gen", dir).code, 0);
  auto r = cli(cfg + "--out \"" + run + "\" train --data \"" + data + "\"", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "run" / "model" / "model.json"));
  EXPECT_TRUE(fs::exists(dir / "run" / "loss.jsonl"));
  r = cli(cfg + "--workers 2 --out \"" + run + "\" score --data \"" + data + "\" --model \"" + run + "/model\"", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("precision"), std::string::npos);
  const auto scores = read_scores(dir / "run" / "scores.jsonl");
  EXPECT_EQ(scores.size(), 40u);
  EXPECT_TRUE(read_json(dir / "run" / "metrics.json").contains("recall"));
  const Json manifest = read_json(dir / "run" / "run-manifest.json");
  EXPECT_EQ(manifest["command"], "score");
  EXPECT_EQ(manifest["config_hash"].get<std::string>().size(), 16u);

  r = cli(cfg + "--cal-a 0 --cal-b 0 --out \"" + cal + "\" calibrate --scores \"" + run + "/scores.jsonl\" --data \"" +
              data + "\"",
          dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto identity = read_scores(dir / "cal" / "scores.jsonl");
  ASSERT_EQ(identity.size(), scores.size());
  for (const auto& c : identity) {
    EXPECT_EQ(c.refined_score, c.raw_score);
    EXPECT_EQ(c.kept, c.raw_score > 0.0);
  }
  // Default constants reproduce the score command's own calibration.
  r = cli(cfg + "--out \"" + cal + "\" calibrate --scores \"" + run + "/scores.jsonl\" --data \"" + data + "\"", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_scores(dir / "cal" / "scores.jsonl"), scores);
  fs::remove_all(dir);
}

TEST(Cli, GradcheckPasses) {
  const auto dir = fresh("gradcheck");
  const auto r = cli("--out \"" + dir.string() + "\" gradcheck", dir);
  ASSERT_EQ(r.code, 0) << r.out << r.err;
  const Json j = read_json(dir / "gradcheck.json");
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_LE(j["max_rel_error"].get<double>(), 1e-4);
  EXPECT_GT(j["checked"].get<std::size_t>(), 0u);
  fs::remove_all(dir);
}

TEST(Cli, BenchReportsDirection) {
  const auto dir = fresh("bench");
  std::ofstream(dir / "b.json") << R"({"bench": {"d_k": [32, 256]}})";
  const auto r = cli("--config \"" + (dir / "b.json").string() + "\" --out \"" + dir.string() + "\" bench", dir);
  ASSERT_EQ(r.code, 0) << r.out << r.err;
  const Json j = read_json(dir / "bench.json");
  EXPECT_EQ(j["rows"].size(), 6u);
  EXPECT_TRUE(j["reference"]["mex_params_smaller"].get<bool>());
  EXPECT_TRUE(j["reference"]["mex_peak_smaller"].get<bool>());
  EXPECT_LT(j["reference"]["param_ratio"].get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(dir / "bench-timing.json"));
  EXPECT_NE(r.out.find("0.8804"), std::string::npos);  // 81/92 printed next to ours
  fs::remove_all(dir);
}

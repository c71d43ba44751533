#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mexfuse/config.hpp"
#include "mexfuse/errors.hpp"
#include "mexfuse/random.hpp"

using namespace mexfuse;

namespace {

std::string error_of(const Json& j) {
  try {
    (void)RunConfig::from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, Defaults) {
  const RunConfig c;
  EXPECT_EQ(c.seed, 0u);
  EXPECT_EQ(c.workers, 1u);
  EXPECT_EQ(c.fusion.variant, FusionVariant::mex);
  EXPECT_EQ(c.fusion.d_k, 256u);
  EXPECT_FALSE(c.fusion.residual_add);
  EXPECT_EQ(c.embedder.raw_visual_dim, 768u);
  EXPECT_EQ(c.embedder.raw_text_dim, 1024u);
  EXPECT_EQ(c.pipeline.window, 8u);
  EXPECT_EQ(c.pipeline.epochs, 100u);
  EXPECT_EQ(c.pipeline.batch_size, 8u);
  EXPECT_EQ(c.pipeline.lr, 1e-5);
  EXPECT_EQ(c.pipeline.momentum, 1e-5);
  EXPECT_EQ(c.pipeline.threshold, 0.0);
  EXPECT_EQ(c.calibration.tau, 100.0);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, EmptyOverlayIsDefault) {
  EXPECT_EQ(RunConfig::from_json(Json::object()).to_json(), RunConfig{}.to_json());
  EXPECT_EQ(RunConfig::from_json(RunConfig{}.to_json()).hash(), RunConfig{}.hash());
}

TEST(Config, OverlaysNestedKeys) {
  const auto c = RunConfig::from_json(
      Json{{"seed", 9}, {"fusion", {{"variant", "cascade"}, {"d_k", 32}}}, {"embedder", {{"truncate_to", 8}}},
           {"pipeline", {{"lr", 0.5}}}, {"bench", {{"d_k", {16, 32}}}}});
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.fusion.variant, FusionVariant::cascade);
  EXPECT_EQ(c.fusion.d_k, 32u);
  EXPECT_EQ(c.embedder.truncate_to, 8u);
  EXPECT_EQ(c.pipeline.lr, 0.5);
  EXPECT_EQ(c.pipeline.epochs, 100u);
  EXPECT_EQ(c.bench.d_k, (std::vector<std::size_t>{16, 32}));
  EXPECT_EQ(c.embedder_config().fused_dim, 32u);
  EXPECT_EQ(c.embedder_config().seed, derive_seed(9, "embedder"));
  EXPECT_EQ(c.gradcheck_config().fusion.variant, FusionVariant::cascade);
  EXPECT_EQ(c.training().lr, 0.5);
}

TEST(Config, UnknownKeyNamesPath) {
  EXPECT_NE(error_of(Json{{"fusion", {{"dk", 3}}}}).find("fusion.dk"), std::string::npos);
  EXPECT_NE(error_of(Json{{"colour", 1}}).find("colour"), std::string::npos);
}

TEST(Config, WrongTypeNamesPath) {
  EXPECT_NE(error_of(Json{{"pipeline", {{"window", "eight"}}}}).find("pipeline.window"), std::string::npos);
  EXPECT_NE(error_of(Json{{"fusion", 3}}).find("fusion"), std::string::npos);
  EXPECT_FALSE(error_of(Json{{"fusion", {{"variant", "flash"}}}}).empty());
}

TEST(Config, ValidateRanges) {
  RunConfig c;
  c.workers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.pipeline.window = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.bench.d_k.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.calibration.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, HashStableAndSensitive) {
  RunConfig a, b;
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  b.seed = 1;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, LoadFromFileAndParseError) {
  const auto dir = std::filesystem::temp_directory_path() / "mexfuse-test-config";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "ok.json") << R"({"seed": 4, "fusion": {"d_k": 16}})";
    std::ofstream(dir / "bad.json") << "{ seed: 4 ";
  }
  EXPECT_EQ(RunConfig::load(dir / "ok.json").fusion.d_k, 16u);
  EXPECT_THROW((void)RunConfig::load(dir / "bad.json"), ConfigError);
  EXPECT_THROW((void)RunConfig::load(dir / "missing.json"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Config, ToyConfigIsValid) {
  const auto c = RunConfig::load(std::filesystem::path(MEXFUSE_SOURCE_DIR) / "configs" / "toy.json");
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.pipeline.epochs, 100u);
  EXPECT_EQ(c.pipeline.batch_size, 8u);
  EXPECT_EQ(c.pipeline.train_windows, 32u);
  EXPECT_EQ(c.dataset.n_tracks, 10u);
  EXPECT_EQ(c.dataset.n_prompts, 4u);
  EXPECT_EQ(c.dataset.n_concepts, 4u);
}

TEST(Seeds, DerivedStreamsDiffer) {
  EXPECT_NE(derive_seed(1, "model"), derive_seed(1, "windows"));
  EXPECT_NE(derive_seed(1, "model"), derive_seed(2, "model"));
  EXPECT_EQ(derive_seed(1, "model"), derive_seed(1, "model"));
}

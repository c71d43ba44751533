#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mexfuse/calibration.hpp"
#include "mexfuse/dataset.hpp"
#include "mexfuse/features.hpp"
#include "mexfuse/fusion.hpp"
#include "mexfuse/gradcheck.hpp"
#include "mexfuse/jsonl.hpp"
#include "mexfuse/pipeline.hpp"

namespace mexfuse {

struct PipelineSettings {
  std::size_t window = 8;
  double threshold = 0.0;
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double lr = 1e-5;
  double momentum = 1e-5;
  double margin = 0.0;
  std::size_t train_windows = 32;
};

struct BenchSettings {
  std::vector<std::size_t> d_k{64, 128, 256};
  std::size_t visual_tokens = 16;
  std::size_t text_tokens = 20;
  bool backward = false;
};

/// Everything a command needs. Sections mirror the JSON file:
///   seed, output_dir, workers, embedder.*, fusion.*, calibration.*,
///   pipeline.*, dataset.*, bench.*, gradcheck.*
/// Embedder fused_dim always follows fusion.d_k and every seed derives from
/// the top-level seed.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::size_t workers = 1;
  EmbedderConfig embedder;
  FusionConfig fusion;
  Activation activation = Activation::gelu;
  CalibrationParams calibration;
  PipelineSettings pipeline;
  DatasetConfig dataset;
  BenchSettings bench;
  GradcheckConfig gradcheck;

  [[nodiscard]] Json to_json() const;
  /// Overlays `overrides` on the defaults. Unknown keys and wrongly typed
  /// values raise ConfigError naming the dotted key path.
  static RunConfig from_json(const Json& overrides);
  static RunConfig load(const std::filesystem::path& path);

  /// Range checks after overlays and flags are applied.
  void validate() const;
  /// 16 hex digits of FNV-1a over the canonical JSON dump.
  [[nodiscard]] std::string hash() const;

  // Section views with seed, fused_dim and fusion settings filled in.
  [[nodiscard]] EmbedderConfig embedder_config() const;
  [[nodiscard]] DatasetConfig dataset_config() const;
  [[nodiscard]] GradcheckConfig gradcheck_config() const;
  [[nodiscard]] ScoringConfig scoring() const;
  [[nodiscard]] TrainConfig training() const;
};

}  // namespace mexfuse

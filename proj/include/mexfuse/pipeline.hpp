#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mexfuse/calibration.hpp"
#include "mexfuse/dataset.hpp"
#include "mexfuse/features.hpp"
#include "mexfuse/fusion.hpp"

namespace mexfuse {

/// Trainable part of the referring module: one projection MLP per modality
/// feeding the fusion block.
struct ReferringModel {
  ProjectionMlp global_mlp;
  ProjectionMlp local_mlp;
  ProjectionMlp prompt_mlp;
  FusionParams fusion;

  static ReferringModel init(const EmbedderConfig& embedder, const FusionConfig& fusion,
                             Activation activation, std::uint64_t seed);

  [[nodiscard]] std::size_t param_count() const;
  /// Stable (name, tensor) list: "mlp.<modality>.<w1|b1|w2|b2>", "fusion.<role>.<weight|bias>".
  [[nodiscard]] std::vector<std::pair<std::string, Tensor*>> parameters();
  void set_trainable(bool trainable);

  /// model.json plus one MEXT file per parameter.
  void save(const std::filesystem::path& dir) const;
  static ReferringModel load(const std::filesystem::path& dir);
};

/// Raw features for one (trajectory window, prompt) pair.
///   global: [frames, g, d_vis], local: [frames, t, d_vis], prompt: [1, l, d_text]
struct WindowFeatures {
  ModalityFeatures global;
  ModalityFeatures local;
  ModalityFeatures prompt;
};

struct WindowOutput {
  Tensor fused_pooled;   // [d_k]
  Tensor prompt_pooled;  // [d_k]
  Tensor cosine;         // scalar
};

/// Project, fuse every frame, ST-pool the fused outputs and compare with the
/// token-averaged projected prompt.
WindowOutput forward_window(const ReferringModel& model, const WindowFeatures& features);

/// Builds window features from a dataset through the synthetic encoders.
class WindowBuilder {
 public:
  WindowBuilder(const Dataset& data, const SyntheticEmbedder& embedder);

  /// Throws DegenerateInputError on an empty frame list.
  [[nodiscard]] WindowFeatures build(const Trajectory& track, const ReferringTask& task,
                                     std::span<const std::int64_t> frames) const;

 private:
  const Dataset* data_;
  const SyntheticEmbedder* embedder_;
};

/// Consecutive non-overlapping windows covering the trajectory; the last may be shorter.
std::vector<std::vector<std::int64_t>> split_windows(const Trajectory& track, std::size_t window);

struct ScoredCandidate {
  std::int64_t track_id = 0;
  std::string prompt_id;
  double raw_score = 0.0;
  double pseudo_freq = 0.0;
  double refined_score = 0.0;
  bool kept = false;

  friend bool operator==(const ScoredCandidate&, const ScoredCandidate&) = default;
};

struct ScoringConfig {
  std::size_t window = 8;
  double threshold = 0.0;
  CalibrationParams calibration;
  std::size_t workers = 1;
};

/// Scores every candidate of one task. The raw score is the mean window
/// cosine; p comes from the dataset's calibration stats (0 when absent) and
/// s' = s + a·p + b; kept ⇔ s' > threshold.
std::vector<ScoredCandidate> score_all(const Dataset& data, const SyntheticEmbedder& embedder,
                                       const ReferringTask& task, const ReferringModel& model,
                                       const ScoringConfig& config);

/// All tasks, in task order; parallel over `config.workers` threads with one
/// execution context each. The result does not depend on the worker count.
std::vector<ScoredCandidate> score_dataset(const Dataset& data, const SyntheticEmbedder& embedder,
                                           const ReferringModel& model, const ScoringConfig& config);

/// Recomputes p, s' and kept from raw scores.
void recalibrate(std::span<ScoredCandidate> candidates, const ExpressionStats* stats,
                 const CalibrationParams& params, double threshold);

/// Keeps candidates with s' > threshold, ordered by (prompt_id, descending s', track_id).
std::vector<ScoredCandidate> filter(std::span<const ScoredCandidate> candidates, double threshold);

struct RetrievalMetrics {
  double precision = 0.0;
  double recall = 0.0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
};

/// Kept-vs-label agreement over candidates that have a label. An empty kept
/// set has precision 1 only if nothing should have been kept.
RetrievalMetrics evaluate(std::span<const ScoredCandidate> candidates, const Dataset& data);

std::vector<Json> scores_to_jsonl(std::span<const ScoredCandidate> candidates);
std::vector<ScoredCandidate> read_scores(const std::filesystem::path& path);
void write_scores(const std::filesystem::path& path, std::span<const ScoredCandidate> candidates);

struct TrainingSample {
  std::int64_t track_id = 0;
  std::string prompt_id;
  std::vector<std::int64_t> frames;
  bool match = false;
};

/// Balanced, deterministic draw of `count` labelled windows. Even draws are
/// matches and odd draws non-matches where available; tracks are taken
/// round-robin per prompt and the window start is random.
std::vector<TrainingSample> build_training_windows(const Dataset& data, std::size_t count,
                                                   std::size_t window, std::uint64_t seed);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double lr = 1e-5;
  double momentum = 1e-5;
  /// Non-matches are penalised by max(0, cos - margin).
  double margin = 0.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

/// 1 - cos for matches, max(0, cos - margin) otherwise.
Tensor pair_loss(const Tensor& cosine, bool match, double margin);

/// Mini-batch SGD with momentum (v ← μv + g, θ ← θ - lr·v) over frozen
/// features. Throws TrainingError on a non-finite loss.
TrainResult train(ReferringModel& model, const Dataset& data, const SyntheticEmbedder& embedder,
                  std::span<const TrainingSample> samples, const TrainConfig& config);

}  // namespace mexfuse

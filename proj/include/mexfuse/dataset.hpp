#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mexfuse/calibration.hpp"
#include "mexfuse/features.hpp"

namespace mexfuse {

/// [x, y, w, h] in pixels.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const Box&, const Box&) = default;
};

struct TrackFrame {
  std::int64_t frame = 0;
  Box box;

  friend bool operator==(const TrackFrame&, const TrackFrame&) = default;
};

/// One tracked instance as produced by a frozen tracker.
struct Trajectory {
  std::int64_t track_id = 0;
  std::string entity_id;
  std::vector<TrackFrame> frames;

  /// Frame indices strictly increasing, box extents positive, at least one frame.
  void validate() const;
  [[nodiscard]] std::vector<std::int64_t> frame_indices() const;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct ReferringTask {
  std::string prompt_id;
  std::string text;
  std::string entity_id;
  std::vector<std::int64_t> candidates;

  friend bool operator==(const ReferringTask&, const ReferringTask&) = default;
};

struct MatchLabel {
  std::string prompt_id;
  std::int64_t track_id = 0;
  bool match = false;

  friend bool operator==(const MatchLabel&, const MatchLabel&) = default;
};

/// The video: global-frame features are embedded per frame under sequence_id.
struct FrameSequence {
  std::string sequence_id = "seq-0000";
  std::size_t n_frames = 0;

  friend bool operator==(const FrameSequence&, const FrameSequence&) = default;
};

struct Dataset {
  FrameSequence sequence;
  std::vector<Trajectory> trajectories;
  std::vector<ReferringTask> tasks;
  std::vector<MatchLabel> labels;
  ConceptManifest concepts;
  std::optional<ExpressionStats> calibration;

  /// Throws LookupError for unknown ids.
  [[nodiscard]] const Trajectory& track(std::int64_t track_id) const;
  [[nodiscard]] const ReferringTask& task(const std::string& prompt_id) const;
  [[nodiscard]] std::optional<bool> label(const std::string& prompt_id, std::int64_t track_id) const;

  /// Writes sequence.json, trajectories.jsonl, tasks.jsonl, labels.jsonl,
  /// concepts.jsonl and (when present) calibration.json into `dir`.
  void save(const std::filesystem::path& dir) const;
  /// Inverse of save(); labels, concepts and calibration files are optional.
  static Dataset load(const std::filesystem::path& dir);
};

// Single-file readers and writers for the JSON-lines interchange formats.
std::vector<Trajectory> read_trajectories(const std::filesystem::path& path);
void write_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& tracks);
std::vector<ReferringTask> read_tasks(const std::filesystem::path& path);
void write_tasks(const std::filesystem::path& path, const std::vector<ReferringTask>& tasks);
std::vector<MatchLabel> read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const std::vector<MatchLabel>& labels);

struct DatasetConfig {
  std::uint64_t seed = 0;
  std::size_t n_tracks = 10;
  std::size_t n_prompts = 4;
  std::size_t n_frames = 16;
  std::size_t n_concepts = 4;
  /// When set, exactly this many tracks match each prompt and leftover tracks
  /// get distractor concepts; otherwise track i has concept i mod n_concepts.
  std::optional<std::size_t> matches_per_prompt;
  /// Distinct training expressions in the calibration manifest.
  std::size_t train_expressions = 80;
  double image_width = 1242.0;
  double image_height = 375.0;

  void validate() const;
};

/// Deterministic oracle-mode dataset. Prompt j refers to concept j mod
/// n_concepts; every prompt lists all tracks as candidates and has at least
/// one match. The calibration manifest covers `train_expressions` training
/// expressions whose frequencies come from counting a synthetic annotation
/// list, with similarities taken from the embedder's pooled prompt features.
Dataset generate_synthetic_dataset(const DatasetConfig& config, const EmbedderConfig& embedder);

}  // namespace mexfuse

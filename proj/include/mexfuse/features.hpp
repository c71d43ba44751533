#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mexfuse/tensor.hpp"

namespace mexfuse {

enum class Modality { global_frame, local_track, prompt };

std::string_view to_string(Modality m) noexcept;
/// Throws ConfigError for unknown names.
Modality parse_modality(std::string_view name);

struct EmbedderConfig {
  std::uint64_t seed = 0;
  std::size_t raw_visual_dim = 768;
  std::size_t visual_tokens = 16;
  std::size_t raw_text_dim = 1024;
  std::size_t text_tokens = 20;
  std::size_t fused_dim = 256;
  std::optional<std::size_t> truncate_to;
  /// Per-entity deviation from the concept direction, relative to its norm.
  double entity_noise = 0.15;
  /// Per-token deviation, relative to the concept norm.
  double token_noise = 0.6;

  /// Throws ConfigError if any extent is zero or truncate_to exceeds a token count.
  void validate() const;
  [[nodiscard]] std::size_t raw_dim(Modality m) const noexcept;
  [[nodiscard]] std::size_t tokens(Modality m) const noexcept;
};

/// Embedded features of one modality: tokens has shape [n, s, d_raw].
struct ModalityFeatures {
  Modality modality = Modality::global_frame;
  Tensor tokens;
  std::string source_id;

  [[nodiscard]] std::size_t samples() const { return tokens.extent(0); }
  [[nodiscard]] std::size_t token_count() const { return tokens.extent(1); }
  [[nodiscard]] std::size_t dim() const { return tokens.extent(2); }
};

struct ConceptEntry {
  std::string entity_id;
  Modality modality = Modality::local_track;
  std::string concept_label;
};

/// Concept labels attached to entities; drives the embedder's oracle mode.
class ConceptManifest {
 public:
  void add(ConceptEntry entry);
  [[nodiscard]] std::optional<std::string> find(std::string_view entity_id, Modality m) const;
  [[nodiscard]] const std::vector<ConceptEntry>& entries() const noexcept { return entries_; }
  [[nodiscard]] bool empty() const noexcept { return entries_.empty(); }

  static ConceptManifest load_jsonl(const std::filesystem::path& path);
  void save_jsonl(const std::filesystem::path& path) const;

 private:
  std::vector<ConceptEntry> entries_;
  std::map<std::pair<std::string, Modality>, std::size_t, std::less<>> index_;
};

/// Deterministic stand-in for the frozen visual and text encoders.
///
/// Output is a pure function of (config, manifest, entity_id, modality,
/// sample index). Entities sharing a concept label are built from one
/// concept direction plus small entity- and token-level noise; concept
/// directions within a feature space are orthonormalised, so mean-pooled
/// features of equal concepts are nearly parallel and of distinct concepts
/// nearly orthogonal. Entities without a label are pure noise.
class SyntheticEmbedder {
 public:
  explicit SyntheticEmbedder(EmbedderConfig config, ConceptManifest concepts = {});

  /// Features for the given sample indices (e.g. frame numbers): [samples.size(), s, d_raw].
  [[nodiscard]] ModalityFeatures embed(std::string_view entity_id, Modality m,
                                       std::span<const std::int64_t> samples) const;
  [[nodiscard]] ModalityFeatures embed(std::string_view entity_id, Modality m) const;

  [[nodiscard]] const EmbedderConfig& config() const noexcept { return config_; }
  [[nodiscard]] const ConceptManifest& concepts() const noexcept { return concepts_; }

 private:
  [[nodiscard]] const std::vector<double>* concept_direction(Modality m,
                                                             const std::string& label) const;

  EmbedderConfig config_;
  ConceptManifest concepts_;
  // Unit-norm directions keyed by (is_text_space, concept label).
  std::map<std::pair<bool, std::string>, std::vector<double>> directions_;
};

/// Single-sample convenience over a manifest-free embedder.
ModalityFeatures embed_synthetic(std::string_view entity_id, Modality m,
                                 const EmbedderConfig& config);

/// Keep the first min(k, s) tokens. Throws DegenerateInputError for k == 0.
ModalityFeatures truncate(const ModalityFeatures& f, std::size_t k);

enum class Activation { gelu, tanh, identity };

std::string_view to_string(Activation a) noexcept;
Activation parse_activation(std::string_view name);
Tensor activate(Activation a, const Tensor& x);

/// linear -> activation -> linear, applied per token.
struct ProjectionMlp {
  Tensor w1, b1, w2, b2;
  Activation activation = Activation::gelu;

  /// Hidden width equals d_out. Weights ~ N(0, 1/d_in), zero biases.
  static ProjectionMlp init(std::size_t d_in, std::size_t d_out, Activation act,
                            std::uint64_t seed);

  [[nodiscard]] Tensor operator()(const Tensor& x) const;
  [[nodiscard]] std::size_t d_in() const { return w1.extent(0); }
  [[nodiscard]] std::size_t d_out() const { return w2.extent(1); }
  [[nodiscard]] std::size_t param_count() const;
  [[nodiscard]] std::vector<Tensor*> parameters();
};

/// [n, s, d_raw] -> [n, s, d_k]. Throws DimensionError on raw-dim mismatch.
Tensor project(const ModalityFeatures& f, const ProjectionMlp& mlp);

}  // namespace mexfuse

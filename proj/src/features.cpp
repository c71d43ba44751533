#include "mexfuse/features.hpp"

#include <cmath>
#include <set>

#include "mexfuse/errors.hpp"
#include "mexfuse/jsonl.hpp"
#include "mexfuse/random.hpp"

namespace mexfuse {

std::string_view to_string(Modality m) noexcept {
  switch (m) {
    case Modality::global_frame: return "global_frame";
    case Modality::local_track: return "local_track";
    case Modality::prompt: return "prompt";
  }
  return "?";
}

Modality parse_modality(std::string_view name) {
  if (name == "global_frame") return Modality::global_frame;
  if (name == "local_track") return Modality::local_track;
  if (name == "prompt") return Modality::prompt;
  throw ConfigError("unknown modality '" + std::string(name) + "'");
}

void EmbedderConfig::validate() const {
  if (raw_visual_dim == 0 || visual_tokens == 0 || raw_text_dim == 0 || text_tokens == 0 ||
      fused_dim == 0) {
    throw ConfigError("embedder: all dimensions must be positive");
  }
  if (truncate_to) {
    if (*truncate_to == 0) throw ConfigError("embedder: truncate_to must be at least 1");
    if (*truncate_to > visual_tokens && *truncate_to > text_tokens) {
      throw ConfigError("embedder: truncate_to exceeds every token count");
    }
  }
  if (!(entity_noise >= 0.0) || !(token_noise >= 0.0)) {
    throw ConfigError("embedder: noise levels must be non-negative");
  }
}

std::size_t EmbedderConfig::raw_dim(Modality m) const noexcept {
  return m == Modality::prompt ? raw_text_dim : raw_visual_dim;
}

std::size_t EmbedderConfig::tokens(Modality m) const noexcept {
  return m == Modality::prompt ? text_tokens : visual_tokens;
}

// ---------------------------------------------------------------------------

void ConceptManifest::add(ConceptEntry entry) {
  auto key = std::make_pair(entry.entity_id, entry.modality);
  if (index_.contains(key)) {
    throw ConfigError("concept manifest: duplicate entry for " + entry.entity_id + " (" +
                      std::string(to_string(entry.modality)) + ")");
  }
  index_.emplace(std::move(key), entries_.size());
  entries_.push_back(std::move(entry));
}

std::optional<std::string> ConceptManifest::find(std::string_view entity_id, Modality m) const {
  const auto it = index_.find(std::make_pair(std::string(entity_id), m));
  if (it == index_.end()) return std::nullopt;
  return entries_[it->second].concept_label;
}

ConceptManifest ConceptManifest::load_jsonl(const std::filesystem::path& path) {
  ConceptManifest out;
  read_jsonl(path, [&](const Json& row, std::size_t) {
    out.add({require_field<std::string>(row, "entity_id"),
             parse_modality(require_field<std::string>(row, "modality")),
             require_field<std::string>(row, "concept")});
  });
  return out;
}

void ConceptManifest::save_jsonl(const std::filesystem::path& path) const {
  std::vector<Json> rows;
  rows.reserve(entries_.size());
  for (const auto& e : entries_) {
    rows.push_back(Json{{"entity_id", e.entity_id},
                        {"modality", std::string(to_string(e.modality))},
                        {"concept", e.concept_label}});
  }
  write_jsonl(path, rows);
}

// ---------------------------------------------------------------------------

namespace {

bool is_text(Modality m) { return m == Modality::prompt; }

std::vector<std::vector<double>> orthonormal_directions(std::size_t count, std::size_t dim,
                                                        const std::vector<std::uint64_t>& seeds) {
  std::vector<std::vector<double>> basis;
  basis.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    auto v = gaussian_vector(dim, seeds[c]);
    // Two Gram-Schmidt passes keep the basis orthogonal to rounding.
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& u : basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += v[i] * u[i];
        for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * u[i];
      }
    }
    double norm = 0.0;
    for (const double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

}  // namespace

SyntheticEmbedder::SyntheticEmbedder(EmbedderConfig config, ConceptManifest concepts)
    : config_(std::move(config)), concepts_(std::move(concepts)) {
  config_.validate();
  for (const bool text : {false, true}) {
    std::set<std::string> labels;
    for (const auto& e : concepts_.entries()) {
      if (is_text(e.modality) == text) labels.insert(e.concept_label);
    }
    const std::size_t dim = text ? config_.raw_text_dim : config_.raw_visual_dim;
    if (labels.size() > dim) {
      throw ConfigError("embedder: " + std::to_string(labels.size()) +
                        " concepts do not fit in " + std::to_string(dim) + " dimensions");
    }
    std::vector<std::uint64_t> seeds;
    for (const auto& label : labels) {
      seeds.push_back(derive_seed(config_.seed, std::string(text ? "concept/text/" : "concept/visual/") + label));
    }
    auto basis = orthonormal_directions(labels.size(), dim, seeds);
    std::size_t i = 0;
    for (const auto& label : labels) directions_.emplace(std::make_pair(text, label), std::move(basis[i++]));
  }
}

const std::vector<double>* SyntheticEmbedder::concept_direction(Modality m,
                                                                const std::string& label) const {
  const auto it = directions_.find(std::make_pair(is_text(m), label));
  return it == directions_.end() ? nullptr : &it->second;
}

ModalityFeatures SyntheticEmbedder::embed(std::string_view entity_id, Modality m,
                                          std::span<const std::int64_t> samples) const {
  const std::size_t d = config_.raw_dim(m);
  const std::size_t s = config_.tokens(m);
  const double unit = 1.0 / std::sqrt(static_cast<double>(d));
  const double gain = std::sqrt(static_cast<double>(d));

  const std::uint64_t entity_seed =
      derive_seed(config_.seed, std::string(to_string(m)) + "/" + std::string(entity_id));
  const auto label = concepts_.find(entity_id, m);
  const std::vector<double>* direction = label ? concept_direction(m, *label) : nullptr;

  // Shared per-entity component: concept direction plus offset, or pure offset.
  std::vector<double> center = gaussian_vector(d, derive_seed(entity_seed, "entity"), unit);
  if (direction != nullptr) {
    for (std::size_t i = 0; i < d; ++i) center[i] = (*direction)[i] + config_.entity_noise * center[i];
  }

  std::vector<double> values;
  values.reserve(samples.size() * s * d);
  for (const std::int64_t sample : samples) {
    const auto noise = gaussian_vector(
        s * d, derive_seed(entity_seed, static_cast<std::uint64_t>(sample)), unit * config_.token_noise);
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t i = 0; i < d; ++i) values.push_back(gain * (center[i] + noise[t * d + i]));
  }
  return ModalityFeatures{m, Tensor::from_values({samples.size(), s, d}, std::move(values)),
                          std::string(entity_id)};
}

ModalityFeatures SyntheticEmbedder::embed(std::string_view entity_id, Modality m) const {
  const std::int64_t first = 0;
  return embed(entity_id, m, std::span<const std::int64_t>(&first, 1));
}

ModalityFeatures embed_synthetic(std::string_view entity_id, Modality m,
                                 const EmbedderConfig& config) {
  return SyntheticEmbedder(config).embed(entity_id, m);
}

ModalityFeatures truncate(const ModalityFeatures& f, std::size_t k) {
  if (k == 0) throw DegenerateInputError("truncate: token count must be at least 1");
  const std::size_t s = f.token_count();
  if (k >= s) return f;
  return ModalityFeatures{f.modality, narrow(f.tokens, 1, 0, k), f.source_id};
}

// ---------------------------------------------------------------------------

std::string_view to_string(Activation a) noexcept {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

Tensor activate(Activation a, const Tensor& x) {
  switch (a) {
    case Activation::gelu: return gelu(x);
    case Activation::tanh: return mexfuse::tanh(x);
    case Activation::identity: return x;
  }
  return x;
}

ProjectionMlp ProjectionMlp::init(std::size_t d_in, std::size_t d_out, Activation act,
                                  std::uint64_t seed) {
  ProjectionMlp mlp;
  mlp.activation = act;
  mlp.w1 = Tensor::from_values({d_in, d_out},
                               gaussian_vector(d_in * d_out, derive_seed(seed, "w1"),
                                               1.0 / std::sqrt(static_cast<double>(d_in))));
  mlp.b1 = Tensor::zeros({d_out});
  mlp.w2 = Tensor::from_values({d_out, d_out},
                               gaussian_vector(d_out * d_out, derive_seed(seed, "w2"),
                                               1.0 / std::sqrt(static_cast<double>(d_out))));
  mlp.b2 = Tensor::zeros({d_out});
  for (Tensor* p : mlp.parameters()) p->set_requires_grad(true);
  return mlp;
}

Tensor ProjectionMlp::operator()(const Tensor& x) const {
  return linear(activate(activation, linear(x, w1, b1)), w2, b2);
}

std::size_t ProjectionMlp::param_count() const {
  return w1.numel() + b1.numel() + w2.numel() + b2.numel();
}

std::vector<Tensor*> ProjectionMlp::parameters() { return {&w1, &b1, &w2, &b2}; }

Tensor project(const ModalityFeatures& f, const ProjectionMlp& mlp) {
  if (f.tokens.rank() != 3 || f.dim() != mlp.d_in()) {
    throw DimensionError("project: features " + shape_string(f.tokens.shape()) +
                         " do not match MLP input width " + std::to_string(mlp.d_in()));
  }
  return mlp(f.tokens);
}

}  // namespace mexfuse

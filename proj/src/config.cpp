#include "mexfuse/config.hpp"

#include <cstdint>
#include <cstdio>

#include "mexfuse/errors.hpp"
#include "mexfuse/random.hpp"

namespace mexfuse {

namespace {

Json optional_size(const std::optional<std::size_t>& v) { return v ? Json(*v) : Json(nullptr); }

std::optional<std::size_t> read_optional_size(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::size_t>();
}

// Literal JSON built in code stores positive integers as signed.
bool non_negative_integer(const Json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

bool compatible(const Json& def, const Json& value) {
  if (def.is_null()) return value.is_null() || non_negative_integer(value);
  if (def.is_number_unsigned()) return non_negative_integer(value);
  if (def.is_number()) return value.is_number();
  if (def.is_array()) {
    if (!value.is_array()) return false;
    for (const auto& v : value) {
      if (!non_negative_integer(v)) return false;
    }
    return true;
  }
  return def.type() == value.type();
}

// Copies `overrides` into `merged`, which starts out as the defaults.
void overlay(Json& merged, const Json& overrides, const std::string& prefix) {
  if (!overrides.is_object()) {
    throw ConfigError("config: " + (prefix.empty() ? std::string("top level") : "'" + prefix + "'") +
                      " must be an object");
  }
  for (const auto& [key, value] : overrides.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!merged.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    Json& slot = merged[key];
    if (slot.is_object()) {
      overlay(slot, value, path);
    } else if (!compatible(slot, value)) {
      throw ConfigError("config: '" + path + "' has the wrong type (got " + value.dump() + ")");
    } else {
      slot = value;
    }
  }
}

}  // namespace

Json RunConfig::to_json() const {
  return Json{
      {"seed", seed},
      {"output_dir", output_dir},
      {"workers", workers},
      {"embedder",
       {{"raw_visual_dim", embedder.raw_visual_dim},
        {"visual_tokens", embedder.visual_tokens},
        {"raw_text_dim", embedder.raw_text_dim},
        {"text_tokens", embedder.text_tokens},
        {"truncate_to", optional_size(embedder.truncate_to)},
        {"entity_noise", embedder.entity_noise},
        {"token_noise", embedder.token_noise}}},
      {"fusion",
       {{"variant", std::string(to_string(fusion.variant))},
        {"d_k", fusion.d_k},
        {"residual_add", fusion.residual_add},
        {"projection", std::string(to_string(fusion.projection))},
        {"activation", std::string(to_string(activation))}}},
      {"calibration", {{"tau", calibration.tau}, {"a", calibration.a}, {"b", calibration.b}}},
      {"pipeline",
       {{"window", pipeline.window},
        {"threshold", pipeline.threshold},
        {"epochs", pipeline.epochs},
        {"batch_size", pipeline.batch_size},
        {"lr", pipeline.lr},
        {"momentum", pipeline.momentum},
        {"margin", pipeline.margin},
        {"train_windows", pipeline.train_windows}}},
      {"dataset",
       {{"n_tracks", dataset.n_tracks},
        {"n_prompts", dataset.n_prompts},
        {"n_frames", dataset.n_frames},
        {"n_concepts", dataset.n_concepts},
        {"matches_per_prompt", optional_size(dataset.matches_per_prompt)},
        {"train_expressions", dataset.train_expressions},
        {"image_width", dataset.image_width},
        {"image_height", dataset.image_height}}},
      {"bench",
       {{"d_k", bench.d_k},
        {"visual_tokens", bench.visual_tokens},
        {"text_tokens", bench.text_tokens},
        {"backward", bench.backward}}},
      {"gradcheck",
       {{"d_k", gradcheck.fusion.d_k},
        {"global_tokens", gradcheck.global_tokens},
        {"local_tokens", gradcheck.local_tokens},
        {"prompt_tokens", gradcheck.prompt_tokens},
        {"raw_visual_dim", gradcheck.raw_visual_dim},
        {"raw_text_dim", gradcheck.raw_text_dim},
        {"frames", gradcheck.frames},
        {"step", gradcheck.step},
        {"tolerance", gradcheck.tolerance}}},
  };
}

RunConfig RunConfig::from_json(const Json& overrides) {
  Json j = RunConfig{}.to_json();
  overlay(j, overrides, "");

  RunConfig c;
  try {
    c.seed = j["seed"].get<std::uint64_t>();
    c.output_dir = j["output_dir"].get<std::string>();
    c.workers = j["workers"].get<std::size_t>();

    const Json& e = j["embedder"];
    c.embedder.raw_visual_dim = e["raw_visual_dim"].get<std::size_t>();
    c.embedder.visual_tokens = e["visual_tokens"].get<std::size_t>();
    c.embedder.raw_text_dim = e["raw_text_dim"].get<std::size_t>();
    c.embedder.text_tokens = e["text_tokens"].get<std::size_t>();
    c.embedder.truncate_to = read_optional_size(e["truncate_to"]);
    c.embedder.entity_noise = e["entity_noise"].get<double>();
    c.embedder.token_noise = e["token_noise"].get<double>();

    const Json& f = j["fusion"];
    c.fusion.variant = parse_variant(f["variant"].get<std::string>());
    c.fusion.d_k = f["d_k"].get<std::size_t>();
    c.fusion.residual_add = f["residual_add"].get<bool>();
    c.fusion.projection = parse_projection(f["projection"].get<std::string>());
    c.activation = parse_activation(f["activation"].get<std::string>());

    const Json& cal = j["calibration"];
    c.calibration = {cal["tau"].get<double>(), cal["a"].get<double>(), cal["b"].get<double>()};

    const Json& p = j["pipeline"];
    c.pipeline.window = p["window"].get<std::size_t>();
    c.pipeline.threshold = p["threshold"].get<double>();
    c.pipeline.epochs = p["epochs"].get<std::size_t>();
    c.pipeline.batch_size = p["batch_size"].get<std::size_t>();
    c.pipeline.lr = p["lr"].get<double>();
    c.pipeline.momentum = p["momentum"].get<double>();
    c.pipeline.margin = p["margin"].get<double>();
    c.pipeline.train_windows = p["train_windows"].get<std::size_t>();

    const Json& d = j["dataset"];
    c.dataset.n_tracks = d["n_tracks"].get<std::size_t>();
    c.dataset.n_prompts = d["n_prompts"].get<std::size_t>();
    c.dataset.n_frames = d["n_frames"].get<std::size_t>();
    c.dataset.n_concepts = d["n_concepts"].get<std::size_t>();
    c.dataset.matches_per_prompt = read_optional_size(d["matches_per_prompt"]);
    c.dataset.train_expressions = d["train_expressions"].get<std::size_t>();
    c.dataset.image_width = d["image_width"].get<double>();
    c.dataset.image_height = d["image_height"].get<double>();

    const Json& b = j["bench"];
    c.bench.d_k = b["d_k"].get<std::vector<std::size_t>>();
    c.bench.visual_tokens = b["visual_tokens"].get<std::size_t>();
    c.bench.text_tokens = b["text_tokens"].get<std::size_t>();
    c.bench.backward = b["backward"].get<bool>();

    const Json& g = j["gradcheck"];
    c.gradcheck.fusion.d_k = g["d_k"].get<std::size_t>();
    c.gradcheck.global_tokens = g["global_tokens"].get<std::size_t>();
    c.gradcheck.local_tokens = g["local_tokens"].get<std::size_t>();
    c.gradcheck.prompt_tokens = g["prompt_tokens"].get<std::size_t>();
    c.gradcheck.raw_visual_dim = g["raw_visual_dim"].get<std::size_t>();
    c.gradcheck.raw_text_dim = g["raw_text_dim"].get<std::size_t>();
    c.gradcheck.frames = g["frames"].get<std::size_t>();
    c.gradcheck.step = g["step"].get<double>();
    c.gradcheck.tolerance = g["tolerance"].get<double>();
  } catch (const Json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  Json j;
  try {
    j = read_json(path);
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  return from_json(j);
}

void RunConfig::validate() const {
  embedder_config().validate();
  dataset.validate();
  if (fusion.d_k == 0) throw ConfigError("config: fusion.d_k must be positive");
  if (workers == 0) throw ConfigError("config: workers must be at least 1");
  if (pipeline.window == 0) throw ConfigError("config: pipeline.window must be at least 1");
  if (pipeline.batch_size == 0) throw ConfigError("config: pipeline.batch_size must be at least 1");
  if (pipeline.train_windows == 0) throw ConfigError("config: pipeline.train_windows must be at least 1");
  if (!(pipeline.lr >= 0.0)) throw ConfigError("config: pipeline.lr must be non-negative");
  if (!(calibration.tau > 0.0)) throw ConfigError("config: calibration.tau must be positive");
  if (bench.d_k.empty()) throw ConfigError("config: bench.d_k must list at least one width");
  for (const auto d : bench.d_k) {
    if (d == 0) throw ConfigError("config: bench.d_k entries must be positive");
  }
  if (bench.visual_tokens == 0 || bench.text_tokens == 0) {
    throw ConfigError("config: bench token counts must be positive");
  }
  if (gradcheck.fusion.d_k == 0 || gradcheck.frames == 0 || gradcheck.global_tokens == 0 ||
      gradcheck.local_tokens == 0 || gradcheck.prompt_tokens == 0 || gradcheck.raw_visual_dim == 0 ||
      gradcheck.raw_text_dim == 0) {
    throw ConfigError("config: gradcheck dimensions must be positive");
  }
  if (!(gradcheck.step > 0.0)) throw ConfigError("config: gradcheck.step must be positive");
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json().dump())));
  return buf;
}

EmbedderConfig RunConfig::embedder_config() const {
  EmbedderConfig e = embedder;
  e.seed = derive_seed(seed, "embedder");
  e.fused_dim = fusion.d_k;
  return e;
}

DatasetConfig RunConfig::dataset_config() const {
  DatasetConfig d = dataset;
  d.seed = derive_seed(seed, "dataset");
  return d;
}

GradcheckConfig RunConfig::gradcheck_config() const {
  GradcheckConfig g = gradcheck;
  g.fusion.variant = fusion.variant;
  g.fusion.residual_add = fusion.residual_add;
  g.fusion.projection = fusion.projection;
  g.activation = activation;
  g.seed = derive_seed(seed, "gradcheck");
  return g;
}

ScoringConfig RunConfig::scoring() const {
  return ScoringConfig{pipeline.window, pipeline.threshold, calibration, workers};
}

TrainConfig RunConfig::training() const {
  return TrainConfig{pipeline.epochs, pipeline.batch_size, pipeline.lr, pipeline.momentum, pipeline.margin,
                     derive_seed(seed, "train")};
}

}  // namespace mexfuse

#include "mexfuse/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "mexfuse/errors.hpp"
#include "mexfuse/jsonl.hpp"
#include "mexfuse/random.hpp"

namespace mexfuse {

void Trajectory::validate() const {
  if (frames.empty()) throw DegenerateInputError("track " + std::to_string(track_id) + " has no frames");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (i > 0 && frames[i].frame <= frames[i - 1].frame) {
      throw ConfigError("track " + std::to_string(track_id) + ": frame indices must increase strictly");
    }
    if (!(frames[i].box.w > 0.0) || !(frames[i].box.h > 0.0)) {
      throw ConfigError("track " + std::to_string(track_id) + ": non-positive box extent at frame " +
                        std::to_string(frames[i].frame));
    }
  }
}

std::vector<std::int64_t> Trajectory::frame_indices() const {
  std::vector<std::int64_t> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(f.frame);
  return out;
}

const Trajectory& Dataset::track(std::int64_t track_id) const {
  const auto it = std::find_if(trajectories.begin(), trajectories.end(),
                               [&](const Trajectory& t) { return t.track_id == track_id; });
  if (it == trajectories.end()) throw LookupError("unknown track_id " + std::to_string(track_id));
  return *it;
}

const ReferringTask& Dataset::task(const std::string& prompt_id) const {
  const auto it = std::find_if(tasks.begin(), tasks.end(),
                               [&](const ReferringTask& t) { return t.prompt_id == prompt_id; });
  if (it == tasks.end()) throw LookupError("unknown prompt_id '" + prompt_id + "'");
  return *it;
}

std::optional<bool> Dataset::label(const std::string& prompt_id, std::int64_t track_id) const {
  for (const auto& l : labels) {
    if (l.prompt_id == prompt_id && l.track_id == track_id) return l.match;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

std::vector<Trajectory> read_trajectories(const std::filesystem::path& path) {
  std::vector<Trajectory> tracks;
  std::map<std::int64_t, std::size_t> index;
  read_jsonl(path, [&](const Json& row, std::size_t) {
    const auto id = require_field<std::int64_t>(row, "track_id");
    const auto frame = require_field<std::int64_t>(row, "frame");
    const auto box = require_field<std::vector<double>>(row, "box");
    auto entity = require_field<std::string>(row, "entity_id");
    if (box.size() != 4) throw std::invalid_argument("box must have 4 entries [x, y, w, h]");
    if (!(box[2] > 0.0) || !(box[3] > 0.0)) throw std::invalid_argument("box extents must be positive");
    auto [it, inserted] = index.emplace(id, tracks.size());
    if (inserted) tracks.push_back(Trajectory{id, entity, {}});
    Trajectory& t = tracks[it->second];
    if (t.entity_id != entity) throw std::invalid_argument("entity_id changes within track");
    if (!t.frames.empty() && frame <= t.frames.back().frame) {
      throw std::invalid_argument("frame indices must increase strictly within a track");
    }
    t.frames.push_back({frame, Box{box[0], box[1], box[2], box[3]}});
  });
  return tracks;
}

void write_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& tracks) {
  std::vector<Json> rows;
  for (const auto& t : tracks) {
    for (const auto& f : t.frames) {
      rows.push_back(Json{{"track_id", t.track_id},
                          {"frame", f.frame},
                          {"box", {f.box.x, f.box.y, f.box.w, f.box.h}},
                          {"entity_id", t.entity_id}});
    }
  }
  write_jsonl(path, rows);
}

std::vector<ReferringTask> read_tasks(const std::filesystem::path& path) {
  std::vector<ReferringTask> tasks;
  read_jsonl(path, [&](const Json& row, std::size_t) {
    tasks.push_back({require_field<std::string>(row, "prompt_id"), require_field<std::string>(row, "text"),
                     require_field<std::string>(row, "entity_id"),
                     require_field<std::vector<std::int64_t>>(row, "candidates")});
  });
  return tasks;
}

void write_tasks(const std::filesystem::path& path, const std::vector<ReferringTask>& tasks) {
  std::vector<Json> rows;
  for (const auto& t : tasks) {
    rows.push_back(Json{{"prompt_id", t.prompt_id},
                        {"text", t.text},
                        {"entity_id", t.entity_id},
                        {"candidates", t.candidates}});
  }
  write_jsonl(path, rows);
}

std::vector<MatchLabel> read_labels(const std::filesystem::path& path) {
  std::vector<MatchLabel> labels;
  read_jsonl(path, [&](const Json& row, std::size_t) {
    labels.push_back({require_field<std::string>(row, "prompt_id"),
                      require_field<std::int64_t>(row, "track_id"), require_field<bool>(row, "match")});
  });
  return labels;
}

void write_labels(const std::filesystem::path& path, const std::vector<MatchLabel>& labels) {
  std::vector<Json> rows;
  for (const auto& l : labels) {
    rows.push_back(Json{{"prompt_id", l.prompt_id}, {"track_id", l.track_id}, {"match", l.match}});
  }
  write_jsonl(path, rows);
}

void Dataset::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_json(dir / "sequence.json",
             Json{{"sequence_id", sequence.sequence_id}, {"n_frames", sequence.n_frames}});
  write_trajectories(dir / "trajectories.jsonl", trajectories);
  write_tasks(dir / "tasks.jsonl", tasks);
  write_labels(dir / "labels.jsonl", labels);
  concepts.save_jsonl(dir / "concepts.jsonl");
  if (calibration) calibration->save(dir / "calibration.json");
}

Dataset Dataset::load(const std::filesystem::path& dir) {
  Dataset d;
  const Json seq = read_json(dir / "sequence.json");
  try {
    d.sequence.sequence_id = require_field<std::string>(seq, "sequence_id");
    d.sequence.n_frames = require_field<std::size_t>(seq, "n_frames");
  } catch (const std::invalid_argument& e) {
    throw ParseError((dir / "sequence.json").string() + ": " + e.what());
  }
  d.trajectories = read_trajectories(dir / "trajectories.jsonl");
  d.tasks = read_tasks(dir / "tasks.jsonl");
  if (std::filesystem::exists(dir / "labels.jsonl")) d.labels = read_labels(dir / "labels.jsonl");
  if (std::filesystem::exists(dir / "concepts.jsonl")) {
    d.concepts = ConceptManifest::load_jsonl(dir / "concepts.jsonl");
  }
  if (std::filesystem::exists(dir / "calibration.json")) {
    d.calibration = ExpressionStats::load(dir / "calibration.json");
  }
  return d;
}

// ---------------------------------------------------------------------------

void DatasetConfig::validate() const {
  if (n_tracks == 0 || n_prompts == 0 || n_frames == 0 || n_concepts == 0) {
    throw ConfigError("dataset: counts must be positive");
  }
  if (matches_per_prompt) {
    if (*matches_per_prompt == 0) throw ConfigError("dataset: matches_per_prompt must be positive");
    const std::size_t used_concepts = std::min(n_prompts, n_concepts);
    if (*matches_per_prompt * used_concepts > n_tracks) {
      throw ConfigError("dataset: not enough tracks for matches_per_prompt");
    }
  } else if (n_tracks < std::min(n_prompts, n_concepts)) {
    throw ConfigError("dataset: every prompt concept needs at least one track");
  }
  if (train_expressions < std::min(n_prompts, n_concepts)) {
    throw ConfigError("dataset: train_expressions must cover every prompt concept");
  }
}

namespace {

std::string concept_name(std::size_t c) { return "concept-" + std::to_string(c); }

std::string pad(std::size_t v, int width) {
  std::string s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

std::vector<double> pooled_prompt(const SyntheticEmbedder& embedder, const std::string& entity) {
  const Tensor pooled = pool_avg(select(embedder.embed(entity, Modality::prompt).tokens, 0), 0);
  const auto v = pooled.values();
  return {v.begin(), v.end()};
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return std::clamp(dot / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace

Dataset generate_synthetic_dataset(const DatasetConfig& config, const EmbedderConfig& embedder_config) {
  config.validate();
  const NoGradGuard no_grad;
  std::mt19937_64 rng(derive_seed(config.seed, "dataset"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Dataset d;
  d.sequence = FrameSequence{"seq-" + pad(config.seed % 10000, 4), config.n_frames};

  // Concept assignment.
  std::vector<std::string> track_concept(config.n_tracks);
  if (config.matches_per_prompt) {
    const std::size_t used = std::min(config.n_prompts, config.n_concepts);
    const std::size_t k = *config.matches_per_prompt;
    for (std::size_t i = 0; i < config.n_tracks; ++i) {
      track_concept[i] = i < k * used ? concept_name(i % used) : "distractor-" + std::to_string(i - k * used);
    }
  } else {
    for (std::size_t i = 0; i < config.n_tracks; ++i) track_concept[i] = concept_name(i % config.n_concepts);
  }

  for (std::size_t i = 0; i < config.n_tracks; ++i) {
    Trajectory t;
    t.track_id = static_cast<std::int64_t>(i + 1);
    t.entity_id = "track-" + pad(i + 1, 3);
    double w = 40.0 + 120.0 * unit(rng);
    double h = 40.0 + 120.0 * unit(rng);
    double x = unit(rng) * (config.image_width - w);
    double y = unit(rng) * (config.image_height - h);
    const double vx = 8.0 * (unit(rng) - 0.5);
    const double vy = 4.0 * (unit(rng) - 0.5);
    for (std::size_t f = 0; f < config.n_frames; ++f) {
      t.frames.push_back({static_cast<std::int64_t>(f), Box{x, y, w, h}});
      x = std::clamp(x + vx, 0.0, config.image_width - w);
      y = std::clamp(y + vy, 0.0, config.image_height - h);
    }
    d.concepts.add({t.entity_id, Modality::local_track, track_concept[i]});
    d.trajectories.push_back(std::move(t));
  }

  std::vector<std::int64_t> all_ids;
  for (const auto& t : d.trajectories) all_ids.push_back(t.track_id);
  for (std::size_t j = 0; j < config.n_prompts; ++j) {
    const std::string c = concept_name(j % config.n_concepts);
    ReferringTask task{"prompt-" + pad(j + 1, 3), "objects of " + c, "text-" + pad(j + 1, 3), all_ids};
    d.concepts.add({task.entity_id, Modality::prompt, c});
    for (std::size_t i = 0; i < config.n_tracks; ++i) {
      d.labels.push_back({task.prompt_id, d.trajectories[i].track_id, track_concept[i] == c});
    }
    d.tasks.push_back(std::move(task));
  }

  // Calibration manifest: training expressions are the concepts in use plus fillers.
  const std::size_t used = std::min(config.n_prompts, config.n_concepts);
  std::vector<std::string> train_entities;
  std::vector<std::string> occurrences;
  std::uniform_int_distribution<std::size_t> filler_count(1, 4);
  for (std::size_t e = 0; e < config.train_expressions; ++e) {
    const bool real = e < used;
    const std::string entity = real ? "train-" + concept_name(e) : "train-filler-" + pad(e, 3);
    if (real) d.concepts.add({entity, Modality::prompt, concept_name(e)});
    std::size_t count = filler_count(rng);
    if (real) {
      count = static_cast<std::size_t>(
          std::count(track_concept.begin(), track_concept.end(), concept_name(e)));
    }
    occurrences.insert(occurrences.end(), count, entity);
    train_entities.push_back(entity);
  }
  const auto train = frequencies_from_counts(occurrences);  // sorted by id

  const SyntheticEmbedder embedder(embedder_config, d.concepts);
  std::vector<std::vector<double>> train_pooled;
  for (const auto& t : train) train_pooled.push_back(pooled_prompt(embedder, t.expr_id));
  std::vector<std::string> test_ids;
  std::vector<std::vector<double>> similarity;
  for (const auto& task : d.tasks) {
    const auto p = pooled_prompt(embedder, task.entity_id);
    std::vector<double> row;
    for (const auto& tp : train_pooled) row.push_back(cosine(p, tp));
    test_ids.push_back(task.prompt_id);
    similarity.push_back(std::move(row));
  }
  d.calibration.emplace(train, std::move(test_ids), std::move(similarity));
  return d;
}

}  // namespace mexfuse

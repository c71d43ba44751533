#include "mexfuse/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <thread>

#include "mexfuse/errors.hpp"
#include "mexfuse/jsonl.hpp"
#include "mexfuse/random.hpp"
#include "mexfuse/tensor_io.hpp"

namespace mexfuse {

ReferringModel ReferringModel::init(const EmbedderConfig& embedder, const FusionConfig& fusion,
                                    Activation activation, std::uint64_t seed) {
  embedder.validate();
  return ReferringModel{
      ProjectionMlp::init(embedder.raw_visual_dim, fusion.d_k, activation, derive_seed(seed, "mlp.global")),
      ProjectionMlp::init(embedder.raw_visual_dim, fusion.d_k, activation, derive_seed(seed, "mlp.local")),
      ProjectionMlp::init(embedder.raw_text_dim, fusion.d_k, activation, derive_seed(seed, "mlp.prompt")),
      FusionParams::init(fusion, derive_seed(seed, "fusion"))};
}

std::size_t ReferringModel::param_count() const {
  return global_mlp.param_count() + local_mlp.param_count() + prompt_mlp.param_count() +
         fusion.param_count();
}

std::vector<std::pair<std::string, Tensor*>> ReferringModel::parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  const auto add_mlp = [&](const std::string& name, ProjectionMlp& mlp) {
    out.emplace_back("mlp." + name + ".w1", &mlp.w1);
    out.emplace_back("mlp." + name + ".b1", &mlp.b1);
    out.emplace_back("mlp." + name + ".w2", &mlp.w2);
    out.emplace_back("mlp." + name + ".b2", &mlp.b2);
  };
  add_mlp("global", global_mlp);
  add_mlp("local", local_mlp);
  add_mlp("prompt", prompt_mlp);
  for (auto& [name, t] : fusion.parameters()) out.emplace_back("fusion." + name, t);
  return out;
}

void ReferringModel::set_trainable(bool trainable) {
  for (auto& [name, t] : parameters()) t->set_requires_grad(trainable);
}

void ReferringModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  auto& self = const_cast<ReferringModel&>(*this);
  Json tensors = Json::array();
  for (auto& [name, t] : self.parameters()) {
    const std::string file = name + ".mext";
    save_mext(dir / file, *t);
    tensors.push_back({{"name", name}, {"file", file}});
  }
  const FusionConfig& f = fusion.config();
  write_json(dir / "model.json",
             Json{{"fusion",
                   {{"variant", std::string(to_string(f.variant))},
                    {"d_k", f.d_k},
                    {"residual_add", f.residual_add},
                    {"projection", std::string(to_string(f.projection))}}},
                  {"activation", std::string(to_string(global_mlp.activation))},
                  {"raw_visual_dim", global_mlp.d_in()},
                  {"raw_text_dim", prompt_mlp.d_in()},
                  {"tensors", std::move(tensors)}});
}

ReferringModel ReferringModel::load(const std::filesystem::path& dir) {
  const Json meta = read_json(dir / "model.json");
  ReferringModel model;
  try {
    const Json& f = require_field<Json>(meta, "fusion");
    FusionConfig cfg;
    cfg.variant = parse_variant(require_field<std::string>(f, "variant"));
    cfg.d_k = require_field<std::size_t>(f, "d_k");
    cfg.residual_add = require_field<bool>(f, "residual_add");
    cfg.projection = parse_projection(require_field<std::string>(f, "projection"));
    EmbedderConfig emb;
    emb.raw_visual_dim = require_field<std::size_t>(meta, "raw_visual_dim");
    emb.raw_text_dim = require_field<std::size_t>(meta, "raw_text_dim");
    emb.fused_dim = cfg.d_k;
    model = init(emb, cfg, parse_activation(require_field<std::string>(meta, "activation")), 0);
  } catch (const std::invalid_argument& e) {
    throw ParseError((dir / "model.json").string() + ": " + e.what());
  }
  std::map<std::string, std::string> files;
  for (const auto& t : require_field<Json>(meta, "tensors")) {
    files.emplace(require_field<std::string>(t, "name"), require_field<std::string>(t, "file"));
  }
  for (auto& [name, param] : model.parameters()) {
    const auto it = files.find(name);
    if (it == files.end()) throw ParseError((dir / "model.json").string() + ": missing tensor " + name);
    Tensor loaded = load_mext(dir / it->second);
    if (loaded.shape() != param->shape()) {
      throw DimensionError("model: tensor " + name + " has shape " + shape_string(loaded.shape()) +
                           ", expected " + shape_string(param->shape()));
    }
    loaded.set_requires_grad(true);
    *param = std::move(loaded);
  }
  return model;
}

// ---------------------------------------------------------------------------

WindowOutput forward_window(const ReferringModel& model, const WindowFeatures& features) {
  const Tensor global = project(features.global, model.global_mlp);
  const Tensor local = project(features.local, model.local_mlp);
  const Tensor prompt = select(project(features.prompt, model.prompt_mlp), 0);
  const std::size_t frames = global.extent(0);
  if (frames == 0 || local.extent(0) != frames) {
    throw DimensionError("forward_window: global " + shape_string(global.shape()) + " and local " +
                         shape_string(local.shape()) + " frame counts differ or are empty");
  }
  std::vector<Tensor> fused;
  fused.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    fused.push_back(fuse(select(global, f), select(local, f), prompt, model.fusion).fused);
  }
  WindowOutput out;
  out.fused_pooled = st_pool(stack(fused));
  out.prompt_pooled = pool_avg(prompt, 0);
  out.cosine = cosine_similarity(out.fused_pooled, out.prompt_pooled);
  return out;
}

WindowBuilder::WindowBuilder(const Dataset& data, const SyntheticEmbedder& embedder)
    : data_(&data), embedder_(&embedder) {}

WindowFeatures WindowBuilder::build(const Trajectory& track, const ReferringTask& task,
                                    std::span<const std::int64_t> frames) const {
  if (frames.empty()) throw DegenerateInputError("window: no frames");
  WindowFeatures w{embedder_->embed(data_->sequence.sequence_id, Modality::global_frame, frames),
                   embedder_->embed(track.entity_id, Modality::local_track, frames),
                   embedder_->embed(task.entity_id, Modality::prompt)};
  if (const auto k = embedder_->config().truncate_to) {
    w.global = truncate(w.global, *k);
    w.local = truncate(w.local, *k);
    w.prompt = truncate(w.prompt, *k);
  }
  return w;
}

std::vector<std::vector<std::int64_t>> split_windows(const Trajectory& track, std::size_t window) {
  if (window == 0) throw DegenerateInputError("window length must be at least 1");
  if (track.frames.empty()) {
    throw DegenerateInputError("track " + std::to_string(track.track_id) + " has no frames");
  }
  const auto frames = track.frame_indices();
  std::vector<std::vector<std::int64_t>> out;
  for (std::size_t start = 0; start < frames.size(); start += window) {
    const std::size_t end = std::min(frames.size(), start + window);
    out.emplace_back(frames.begin() + static_cast<std::ptrdiff_t>(start),
                     frames.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

double task_pseudo_frequency(const ExpressionStats* stats, const std::string& prompt_id) {
  if (stats == nullptr) return 0.0;
  const auto j = stats->test_index(prompt_id);
  return j ? stats->pseudo_frequency_for(*j) : 0.0;
}

double raw_candidate_score(const Dataset& data, const WindowBuilder& builder, const ReferringTask& task,
                           std::int64_t track_id, const ReferringModel& model, std::size_t window) {
  const NoGradGuard no_grad;
  const Trajectory& track = data.track(track_id);
  const auto windows = split_windows(track, window);
  double total = 0.0;
  for (const auto& frames : windows) {
    total += forward_window(model, builder.build(track, task, frames)).cosine.item();
  }
  return total / static_cast<double>(windows.size());
}

}  // namespace

void recalibrate(std::span<ScoredCandidate> candidates, const ExpressionStats* stats,
                 const CalibrationParams& params, double threshold) {
  const ExpressionStats* effective = stats;
  std::optional<ExpressionStats> local;
  if (stats != nullptr && stats->params().tau != params.tau) {
    local = *stats;
    local->set_params(params);
    effective = &*local;
  }
  std::map<std::string, double> cache;
  for (auto& c : candidates) {
    auto it = cache.find(c.prompt_id);
    if (it == cache.end()) it = cache.emplace(c.prompt_id, task_pseudo_frequency(effective, c.prompt_id)).first;
    c.pseudo_freq = it->second;
    c.refined_score = refine(c.raw_score, c.pseudo_freq, params.a, params.b);
    c.kept = c.refined_score > threshold;
  }
}

std::vector<ScoredCandidate> score_all(const Dataset& data, const SyntheticEmbedder& embedder,
                                       const ReferringTask& task, const ReferringModel& model,
                                       const ScoringConfig& config) {
  if (config.window == 0) throw DegenerateInputError("window length must be at least 1");
  const WindowBuilder builder(data, embedder);
  std::vector<ScoredCandidate> out;
  out.reserve(task.candidates.size());
  for (const std::int64_t id : task.candidates) {
    ScoredCandidate c;
    c.track_id = id;
    c.prompt_id = task.prompt_id;
    c.raw_score = raw_candidate_score(data, builder, task, id, model, config.window);
    out.push_back(std::move(c));
  }
  recalibrate(out, data.calibration ? &*data.calibration : nullptr, config.calibration, config.threshold);
  return out;
}

std::vector<ScoredCandidate> score_dataset(const Dataset& data, const SyntheticEmbedder& embedder,
                                           const ReferringModel& model, const ScoringConfig& config) {
  if (config.window == 0) throw DegenerateInputError("window length must be at least 1");
  std::vector<ScoredCandidate> out;
  for (const auto& task : data.tasks) {
    for (const std::int64_t id : task.candidates) {
      (void)data.track(id);  // surface unknown ids before any work starts
      out.push_back(ScoredCandidate{id, task.prompt_id, 0.0, 0.0, 0.0, false});
    }
  }

  const WindowBuilder builder(data, embedder);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto work = [&] {
    ExecutionContext ctx;
    const ContextScope scope(ctx);
    for (std::size_t i = next++; i < out.size(); i = next++) {
      try {
        out[i].raw_score = raw_candidate_score(data, builder, data.task(out[i].prompt_id), out[i].track_id,
                                               model, config.window);
      } catch (...) {
        const std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, config.workers);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
  recalibrate(out, data.calibration ? &*data.calibration : nullptr, config.calibration, config.threshold);
  return out;
}

std::vector<ScoredCandidate> filter(std::span<const ScoredCandidate> candidates, double threshold) {
  std::vector<ScoredCandidate> kept;
  for (const auto& c : candidates) {
    if (c.refined_score > threshold) kept.push_back(c);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const ScoredCandidate& a, const ScoredCandidate& b) {
    if (a.prompt_id != b.prompt_id) return a.prompt_id < b.prompt_id;
    if (a.refined_score != b.refined_score) return a.refined_score > b.refined_score;
    return a.track_id < b.track_id;
  });
  return kept;
}

RetrievalMetrics evaluate(std::span<const ScoredCandidate> candidates, const Dataset& data) {
  RetrievalMetrics m;
  for (const auto& c : candidates) {
    const auto label = data.label(c.prompt_id, c.track_id);
    if (!label) continue;
    if (c.kept && *label) ++m.true_positives;
    if (c.kept && !*label) ++m.false_positives;
    if (!c.kept && *label) ++m.false_negatives;
  }
  const auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(m.true_positives, m.true_positives + m.false_positives);
  m.recall = ratio(m.true_positives, m.true_positives + m.false_negatives);
  return m;
}

std::vector<Json> scores_to_jsonl(std::span<const ScoredCandidate> candidates) {
  std::vector<Json> rows;
  rows.reserve(candidates.size());
  for (const auto& c : candidates) {
    rows.push_back(Json{{"prompt_id", c.prompt_id},
                        {"track_id", c.track_id},
                        {"s", c.raw_score},
                        {"p", c.pseudo_freq},
                        {"s_prime", c.refined_score},
                        {"kept", c.kept}});
  }
  return rows;
}

std::vector<ScoredCandidate> read_scores(const std::filesystem::path& path) {
  std::vector<ScoredCandidate> out;
  read_jsonl(path, [&](const Json& row, std::size_t) {
    out.push_back(ScoredCandidate{require_field<std::int64_t>(row, "track_id"),
                                  require_field<std::string>(row, "prompt_id"), require_field<double>(row, "s"),
                                  require_field<double>(row, "p"), require_field<double>(row, "s_prime"),
                                  require_field<bool>(row, "kept")});
  });
  return out;
}

void write_scores(const std::filesystem::path& path, std::span<const ScoredCandidate> candidates) {
  write_jsonl(path, scores_to_jsonl(candidates));
}

// ---------------------------------------------------------------------------

std::vector<TrainingSample> build_training_windows(const Dataset& data, std::size_t count,
                                                   std::size_t window, std::uint64_t seed) {
  if (window == 0) throw DegenerateInputError("window length must be at least 1");
  if (data.tasks.empty()) throw DegenerateInputError("training: dataset has no tasks");
  std::mt19937_64 rng(derive_seed(seed, "training-windows"));
  std::vector<TrainingSample> out;
  out.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    const ReferringTask& task = data.tasks[(w / 2) % data.tasks.size()];
    bool want_match = w % 2 == 0;
    std::vector<std::int64_t> pool[2];
    for (const std::int64_t id : task.candidates) {
      const auto label = data.label(task.prompt_id, id);
      if (label) pool[*label ? 1 : 0].push_back(id);
    }
    if (pool[want_match ? 1 : 0].empty()) want_match = !want_match;
    const auto& ids = pool[want_match ? 1 : 0];
    if (ids.empty()) throw DegenerateInputError("training: prompt " + task.prompt_id + " has no labels");
    // Cycle through the pool so negatives cover every distractor in turn.
    const std::size_t round = w / (2 * data.tasks.size());
    const std::int64_t id = ids[round % ids.size()];
    const auto frames = data.track(id).frame_indices();
    const std::size_t len = std::min(window, frames.size());
    const std::size_t start =
        std::uniform_int_distribution<std::size_t>(0, frames.size() - len)(rng);
    out.push_back(TrainingSample{id, task.prompt_id,
                                 {frames.begin() + static_cast<std::ptrdiff_t>(start),
                                  frames.begin() + static_cast<std::ptrdiff_t>(start + len)},
                                 want_match});
  }
  return out;
}

Tensor pair_loss(const Tensor& cosine, bool match, double margin) {
  return match ? affine(cosine, -1.0, 1.0) : relu(affine(cosine, 1.0, -margin));
}

TrainResult train(ReferringModel& model, const Dataset& data, const SyntheticEmbedder& embedder,
                  std::span<const TrainingSample> samples, const TrainConfig& config) {
  if (samples.empty()) throw DegenerateInputError("training: no samples");
  if (config.batch_size == 0) throw ConfigError("training: batch_size must be positive");

  std::vector<WindowFeatures> features;
  features.reserve(samples.size());
  {
    const NoGradGuard no_grad;
    const WindowBuilder builder(data, embedder);
    for (const auto& s : samples) features.push_back(builder.build(data.track(s.track_id), data.task(s.prompt_id), s.frames));
  }

  model.set_trainable(true);
  auto params = model.parameters();
  std::vector<std::vector<double>> velocity;
  for (auto& [name, t] : params) velocity.emplace_back(t->numel(), 0.0);

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(config.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<Tensor> losses;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& s = samples[order[i]];
        losses.push_back(pair_loss(forward_window(model, features[order[i]]).cosine, s.match, config.margin));
        epoch_total += losses.back().item();
      }
      const Tensor batch_loss = scale(sum(stack(losses)), 1.0 / static_cast<double>(losses.size()));
      if (!std::isfinite(batch_loss.item())) {
        throw TrainingError("training: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(result.steps));
      }
      batch_loss.backward();
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = *params[p].second;
        if (!t.has_grad()) continue;
        const auto g = t.grad();
        auto v = t.values_mut();
        auto& vel = velocity[p];
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (!std::isfinite(g[i])) throw TrainingError("training: non-finite gradient in " + params[p].first);
          vel[i] = config.momentum * vel[i] + g[i];
          v[i] -= config.lr * vel[i];
        }
        t.zero_grad();
      }
      ++result.steps;
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(samples.size()));
  }
  return result;
}

}  // namespace mexfuse

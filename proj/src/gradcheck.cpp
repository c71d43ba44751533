#include "mexfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mexfuse/context.hpp"
#include "mexfuse/errors.hpp"
#include "mexfuse/pipeline.hpp"
#include "mexfuse/random.hpp"

namespace mexfuse {

namespace {

class DTypeOverride {
 public:
  explicit DTypeOverride(DType dtype) : saved_(default_dtype()) { set_default_dtype(dtype); }
  ~DTypeOverride() { set_default_dtype(saved_); }
  DTypeOverride(const DTypeOverride&) = delete;
  DTypeOverride& operator=(const DTypeOverride&) = delete;

 private:
  DType saved_;
};

ModalityFeatures random_features(Modality m, Shape shape, std::uint64_t seed) {
  std::size_t n = 1;
  for (const auto e : shape) n *= e;
  return ModalityFeatures{m, Tensor::from_values(std::move(shape), gaussian_vector(n, seed)), ""};
}

// Smallest gap, over channels, between the largest and second-largest frame
// mean feeding the max pool. Central differences are meaningless near a tie.
double pool_margin(const ReferringModel& model, const WindowFeatures& w) {
  const NoGradGuard no_grad;
  const Tensor g = model.global_mlp(w.global.tokens);
  const Tensor l = model.local_mlp(w.local.tokens);
  const Tensor p = select(model.prompt_mlp(w.prompt.tokens), 0);
  std::vector<Tensor> means;
  for (std::size_t f = 0; f < g.extent(0); ++f) {
    means.push_back(pool_avg(fuse(select(g, f), select(l, f), p, model.fusion).fused, 0));
  }
  if (means.size() < 2) return INFINITY;
  double margin = INFINITY;
  for (std::size_t c = 0; c < means.front().numel(); ++c) {
    double top = -INFINITY, second = -INFINITY;
    for (const auto& m : means) {
      const double v = m.at(c);
      if (v > top) {
        second = top;
        top = v;
      } else if (v > second) {
        second = v;
      }
    }
    margin = std::min(margin, top - second);
  }
  return margin;
}

constexpr double kMinPoolMargin = 1e-3;
constexpr std::size_t kMaxDraws = 64;

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradcheckReport run_gradcheck(const GradcheckConfig& config) {
  if (!(config.step > 0.0)) throw ConfigError("gradcheck: step must be positive");
  if (config.frames == 0 || config.global_tokens == 0 || config.local_tokens == 0 || config.prompt_tokens == 0) {
    throw ConfigError("gradcheck: frame and token counts must be positive");
  }
  const DTypeOverride f64(DType::f64);
  ExecutionContext ctx;
  const ContextScope scope(ctx);

  EmbedderConfig emb;
  emb.raw_visual_dim = config.raw_visual_dim;
  emb.raw_text_dim = config.raw_text_dim;
  emb.visual_tokens = std::max(config.global_tokens, config.local_tokens);
  emb.text_tokens = config.prompt_tokens;
  emb.fused_dim = config.fusion.d_k;
  ReferringModel model = ReferringModel::init(emb, config.fusion, config.activation, config.seed);

  const auto draw = [&](std::uint64_t attempt) {
    const std::uint64_t s = derive_seed(config.seed, attempt);
    return WindowFeatures{
        random_features(Modality::global_frame, {config.frames, config.global_tokens, config.raw_visual_dim},
                        derive_seed(s, "gradcheck.global")),
        random_features(Modality::local_track, {config.frames, config.local_tokens, config.raw_visual_dim},
                        derive_seed(s, "gradcheck.local")),
        random_features(Modality::prompt, {1, config.prompt_tokens, config.raw_text_dim},
                        derive_seed(s, "gradcheck.prompt"))};
  };
  std::size_t draws = 1;
  WindowFeatures window = draw(0);
  while (pool_margin(model, window) < kMinPoolMargin) {
    if (draws == kMaxDraws) throw DegenerateInputError("gradcheck: every input draw lands on a max-pool tie");
    window = draw(draws++);
  }
  const auto loss = [&] { return affine(forward_window(model, window).cosine, -1.0, 1.0); };

  loss().backward();
  GradcheckReport report;
  report.input_draws = draws;
  for (auto& [name, param] : model.parameters()) {
    ParamGradcheck entry{name, param->numel(), 0.0, 0};
    const std::vector<double> analytic =
        param->has_grad() ? std::vector<double>(param->grad().begin(), param->grad().end())
                          : std::vector<double>(param->numel(), 0.0);
    const NoGradGuard no_grad;
    for (std::size_t i = 0; i < param->numel(); ++i) {
      const double original = param->values()[i];
      param->values_mut()[i] = original + config.step;
      const double plus = loss().item();
      param->values_mut()[i] = original - config.step;
      const double minus = loss().item();
      param->values_mut()[i] = original;
      const double numeric = (plus - minus) / (2.0 * config.step);
      const double err = relative_error(analytic[i], numeric);
      if (err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
      }
      ++report.checked;
    }
    if (entry.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst_param = name;
    }
    report.params.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= config.tolerance;
  return report;
}

}  // namespace mexfuse

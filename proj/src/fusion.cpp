#include "mexfuse/fusion.hpp"

#include <chrono>
#include <cmath>

#include "mexfuse/errors.hpp"
#include "mexfuse/random.hpp"

namespace mexfuse {

std::string_view to_string(FusionVariant v) noexcept {
  switch (v) {
    case FusionVariant::mex: return "mex";
    case FusionVariant::cascade: return "cascade";
    case FusionVariant::plain: return "plain";
  }
  return "?";
}

std::string_view to_string(ProjectionMode p) noexcept {
  switch (p) {
    case ProjectionMode::per_pair: return "per_pair";
    case ProjectionMode::shared: return "shared";
    case ProjectionMode::none: return "none";
  }
  return "?";
}

FusionVariant parse_variant(std::string_view name) {
  if (name == "mex") return FusionVariant::mex;
  if (name == "cascade") return FusionVariant::cascade;
  if (name == "plain") return FusionVariant::plain;
  throw ConfigError("unknown fusion variant '" + std::string(name) + "'");
}

ProjectionMode parse_projection(std::string_view name) {
  if (name == "per_pair") return ProjectionMode::per_pair;
  if (name == "shared") return ProjectionMode::shared;
  if (name == "none") return ProjectionMode::none;
  throw ConfigError("unknown projection mode '" + std::string(name) + "'");
}

std::vector<std::string_view> projection_roles(const FusionConfig& config) {
  if (config.projection == ProjectionMode::none) return {};
  switch (config.variant) {
    case FusionVariant::mex:
      if (config.projection == ProjectionMode::shared) {
        return {role::global, role::local, role::prompt, role::output};
      }
      return {role::global_query, role::local_key,    role::local_query, role::prompt_key,
              role::local_value,  role::prompt_value, role::output};
    case FusionVariant::cascade:
      return {role::stage1_query, role::stage1_key, role::stage1_value, role::stage1_output,
              role::stage2_query, role::stage2_key, role::stage2_value, role::stage2_output};
    case FusionVariant::plain:
      return {role::query, role::key, role::value, role::output};
  }
  return {};
}

std::size_t analytic_param_count(const FusionConfig& config) {
  const std::size_t d = config.d_k;
  const std::size_t per_linear = d * d + d;
  if (config.projection == ProjectionMode::none) return 0;
  switch (config.variant) {
    case FusionVariant::mex:
      // query/key per attention pair, one value per attended modality, one output.
      return config.projection == ProjectionMode::shared ? 3 * per_linear + per_linear
                                                         : 2 * 2 * per_linear + 2 * per_linear + per_linear;
    case FusionVariant::cascade:
      return 2 * (3 * per_linear + per_linear);
    case FusionVariant::plain:
      return 3 * per_linear + per_linear;
  }
  return 0;
}

// ---------------------------------------------------------------------------

FusionParams::FusionParams(FusionConfig config) : config_(config) {
  if (config_.d_k == 0) throw ConfigError("fusion: d_k must be positive");
}

FusionParams FusionParams::init(const FusionConfig& config, std::uint64_t seed) {
  FusionParams p(config);
  const std::size_t d = config.d_k;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  for (const std::string_view r : projection_roles(config)) {
    Linear lin{Tensor::from_values({d, d}, gaussian_vector(d * d, derive_seed(seed, r), stddev)),
               Tensor::zeros({d})};
    lin.weight.set_requires_grad(true);
    lin.bias.set_requires_grad(true);
    p.linears_.emplace(std::string(r), std::move(lin));
  }
  return p;
}

FusionParams FusionParams::identity(const FusionConfig& config) {
  FusionParams p(config);
  for (const std::string_view r : projection_roles(config)) {
    p.linears_.emplace(std::string(r), Linear{Tensor::identity(config.d_k), Tensor::zeros({config.d_k})});
  }
  return p;
}

bool FusionParams::has(std::string_view r) const { return linears_.find(r) != linears_.end(); }

Linear& FusionParams::at(std::string_view r) {
  const auto it = linears_.find(r);
  if (it == linears_.end()) throw LookupError("fusion: no projection for role '" + std::string(r) + "'");
  return it->second;
}

const Linear& FusionParams::at(std::string_view r) const {
  const auto it = linears_.find(r);
  if (it == linears_.end()) throw LookupError("fusion: no projection for role '" + std::string(r) + "'");
  return it->second;
}

Tensor FusionParams::project(std::string_view r, const Tensor& x) const {
  if (config_.projection == ProjectionMode::none) return x;
  return at(r)(x);
}

std::size_t FusionParams::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, lin] : linears_) n += lin.param_count();
  return n;
}

std::vector<std::pair<std::string, Tensor*>> FusionParams::parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, lin] : linears_) {
    out.emplace_back(name + ".weight", &lin.weight);
    out.emplace_back(name + ".bias", &lin.bias);
  }
  return out;
}

void FusionParams::set_trainable(bool trainable) {
  for (auto& [name, t] : parameters()) t->set_requires_grad(trainable);
}

// ---------------------------------------------------------------------------

namespace {

void require_matrix(const Tensor& t, const char* what, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": " + what + " must be a matrix, got " +
                         shape_string(t.shape()));
  }
}

void require_channels(std::initializer_list<std::pair<const char*, const Tensor*>> inputs,
                      const char* op) {
  const std::size_t width = inputs.begin()->second->extent(1);
  for (const auto& [name, t] : inputs) {
    require_matrix(*t, name, op);
    if (t->extent(1) != width) {
      std::string msg = std::string(op) + ": channel mismatch";
      for (const auto& [n, u] : inputs) msg += std::string(" ") + n + "=" + shape_string(u->shape());
      throw DimensionError(msg);
    }
    if (t->extent(0) == 0) throw DegenerateInputError(std::string(op) + ": " + name + " has no rows");
  }
}

/// Row-stochastic map softmax(q·kᵀ/√d).
Tensor attention_map(const Tensor& q, const Tensor& k) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.extent(1)));
  return softmax_rows(scale(matmul_nt(q, k), inv_sqrt_d));
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  require_matrix(q, "query", "attention");
  require_matrix(k, "key", "attention");
  require_matrix(v, "value", "attention");
  if (q.extent(1) != k.extent(1) || k.extent(0) != v.extent(0)) {
    throw DimensionError("attention: incompatible q=" + shape_string(q.shape()) +
                         " k=" + shape_string(k.shape()) + " v=" + shape_string(v.shape()));
  }
  if (q.extent(1) == 0) throw DegenerateInputError("attention: d_k must be positive");
  return matmul(attention_map(q, k), v);
}

FusionOutput mex_attention(const Tensor& global, const Tensor& local, const Tensor& prompt,
                           const FusionParams& params) {
  require_channels({{"global", &global}, {"local", &local}, {"prompt", &prompt}}, "mex_attention");
  const FusionConfig& cfg = params.config();

  Tensor q_global, k_local, q_local, v_local, k_prompt, v_prompt;
  if (cfg.projection == ProjectionMode::shared) {
    q_global = params.project(role::global, global);
    k_local = q_local = v_local = params.project(role::local, local);
    k_prompt = v_prompt = params.project(role::prompt, prompt);
  } else {
    q_global = params.project(role::global_query, global);
    k_local = params.project(role::local_key, local);
    q_local = params.project(role::local_query, local);
    k_prompt = params.project(role::prompt_key, prompt);
    v_local = params.project(role::local_value, local);
    v_prompt = params.project(role::prompt_value, prompt);
  }

  FusionOutput out;
  out.attn_it = attention_map(q_global, k_local);
  out.attn_tp = attention_map(q_local, k_prompt);
  out.attn_itp = matmul(out.attn_it, out.attn_tp);
  out.fused = params.project(role::output,
                             add(matmul(out.attn_it, v_local), matmul(out.attn_itp, v_prompt)));
  if (cfg.residual_add) out.fused = add(out.fused, global);
  out.ledger = current_context().ledger().snapshot();
  return out;
}

FusionOutput mex_attention(const Tensor& global, const Tensor& local, const Tensor& prompt) {
  FusionConfig cfg;
  cfg.variant = FusionVariant::mex;
  cfg.projection = ProjectionMode::none;
  cfg.d_k = global.rank() == 2 && global.extent(1) > 0 ? global.extent(1) : 1;
  return mex_attention(global, local, prompt, FusionParams(cfg));
}

FusionOutput cascade_attention(const Tensor& local, const Tensor& global, const Tensor& prompt,
                               const FusionParams& params) {
  require_channels({{"local", &local}, {"global", &global}, {"prompt", &prompt}}, "cascade_attention");

  FusionOutput out;
  out.attn_it = attention_map(params.project(role::stage1_query, local),
                              params.project(role::stage1_key, global));
  const Tensor stage1 =
      add(local, params.project(role::stage1_output,
                                matmul(out.attn_it, params.project(role::stage1_value, global))));

  out.attn_tp = attention_map(params.project(role::stage2_query, stage1),
                              params.project(role::stage2_key, prompt));
  out.fused =
      add(stage1, params.project(role::stage2_output,
                                 matmul(out.attn_tp, params.project(role::stage2_value, prompt))));
  out.ledger = current_context().ledger().snapshot();
  return out;
}

FusionOutput cascade_attention(const Tensor& local, const Tensor& global, const Tensor& prompt) {
  FusionConfig cfg;
  cfg.variant = FusionVariant::cascade;
  cfg.projection = ProjectionMode::none;
  cfg.d_k = local.rank() == 2 && local.extent(1) > 0 ? local.extent(1) : 1;
  return cascade_attention(local, global, prompt, FusionParams(cfg));
}

FusionOutput plain_attention(const Tensor& global, const Tensor& local, const FusionParams& params) {
  require_channels({{"global", &global}, {"local", &local}}, "plain_attention");
  FusionOutput out;
  out.attn_it = attention_map(params.project(role::query, global), params.project(role::key, local));
  out.fused = params.project(role::output, matmul(out.attn_it, params.project(role::value, local)));
  if (params.config().residual_add) out.fused = add(out.fused, global);
  out.ledger = current_context().ledger().snapshot();
  return out;
}

FusionOutput fuse(const Tensor& global, const Tensor& local, const Tensor& prompt,
                  const FusionParams& params) {
  switch (params.config().variant) {
    case FusionVariant::mex: return mex_attention(global, local, prompt, params);
    case FusionVariant::cascade: return cascade_attention(local, global, prompt, params);
    case FusionVariant::plain: return plain_attention(global, local, params);
  }
  throw ContractError("fuse: unknown variant");
}

Tensor st_pool(const Tensor& x) {
  if (x.rank() != 3) {
    throw DimensionError("st_pool: expected [frames, tokens, channels], got " + shape_string(x.shape()));
  }
  if (x.extent(0) == 0 || x.extent(1) == 0) {
    throw DegenerateInputError("st_pool: empty frame or token axis in " + shape_string(x.shape()));
  }
  return pool_max(pool_avg(x, 1), 0);
}

double score(const Tensor& fused_pooled, const Tensor& prompt_pooled) {
  const NoGradGuard no_grad;
  return cosine_similarity(fused_pooled, prompt_pooled).item();
}

ProfileResult profile(const FusionConfig& config, const ProfileDims& dims, bool with_backward,
                      std::uint64_t seed) {
  if (dims.d_k == 0 || dims.global_tokens == 0 || dims.local_tokens == 0 || dims.prompt_tokens == 0) {
    throw ConfigError("profile: all dimensions must be positive");
  }
  FusionConfig cfg = config;
  cfg.d_k = dims.d_k;

  const auto start = std::chrono::steady_clock::now();
  ProfileResult result;
  ExecutionContext ctx;
  {
    const ContextScope scope(ctx);
    FusionParams params = FusionParams::init(cfg, derive_seed(seed, "params"));
    const auto input = [&](std::size_t rows, std::string_view tag) {
      return Tensor::from_values({rows, dims.d_k},
                                 gaussian_vector(rows * dims.d_k, derive_seed(seed, tag)));
    };
    const Tensor global = input(dims.global_tokens, "global");
    const Tensor local = input(dims.local_tokens, "local");
    const Tensor prompt = input(dims.prompt_tokens, "prompt");

    FusionOutput out = fuse(global, local, prompt, params);
    if (with_backward) sum(out.fused).backward();
    const LedgerSnapshot snap = ctx.ledger().snapshot();
    result.param_count = params.param_count();
    result.peak_values = snap.peak_values;
    result.flops = snap.flops;
  }
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace mexfuse

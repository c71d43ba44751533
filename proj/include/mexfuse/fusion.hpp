#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mexfuse/context.hpp"
#include "mexfuse/tensor.hpp"

namespace mexfuse {

enum class FusionVariant { mex, cascade, plain };

/// How features become queries, keys and values.
///   per_pair: a separate d_k x d_k linear for every (modality, role) a variant uses.
///   shared:   one linear per modality, reused across roles (MEX only; cascade and
///             plain fall back to per_pair).
///   none:     projection-free, features are used as-is and no output projection.
enum class ProjectionMode { per_pair, shared, none };

std::string_view to_string(FusionVariant v) noexcept;
std::string_view to_string(ProjectionMode p) noexcept;
FusionVariant parse_variant(std::string_view name);
ProjectionMode parse_projection(std::string_view name);

struct FusionConfig {
  FusionVariant variant = FusionVariant::mex;
  std::size_t d_k = 256;
  bool residual_add = false;
  ProjectionMode projection = ProjectionMode::per_pair;
};

/// Affine map x·W + b with W of shape [d_in, d_out].
struct Linear {
  Tensor weight;
  Tensor bias;

  [[nodiscard]] Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  [[nodiscard]] std::size_t param_count() const { return weight.numel() + bias.numel(); }
};

/// Projection roles. Names double as parameter keys.
namespace role {
inline constexpr std::string_view global_query = "global.query";
inline constexpr std::string_view local_key = "local.key";
inline constexpr std::string_view local_query = "local.query";
inline constexpr std::string_view local_value = "local.value";
inline constexpr std::string_view prompt_key = "prompt.key";
inline constexpr std::string_view prompt_value = "prompt.value";
inline constexpr std::string_view output = "output";
// Shared-mode modality projections.
inline constexpr std::string_view global = "global";
inline constexpr std::string_view local = "local";
inline constexpr std::string_view prompt = "prompt";
// Cascade stages.
inline constexpr std::string_view stage1_query = "stage1.query";
inline constexpr std::string_view stage1_key = "stage1.key";
inline constexpr std::string_view stage1_value = "stage1.value";
inline constexpr std::string_view stage1_output = "stage1.output";
inline constexpr std::string_view stage2_query = "stage2.query";
inline constexpr std::string_view stage2_key = "stage2.key";
inline constexpr std::string_view stage2_value = "stage2.value";
inline constexpr std::string_view stage2_output = "stage2.output";
// Plain single attention.
inline constexpr std::string_view query = "query";
inline constexpr std::string_view key = "key";
inline constexpr std::string_view value = "value";
}  // namespace role

/// Role names registered for a configuration, in registration order.
std::vector<std::string_view> projection_roles(const FusionConfig& config);

/// Learnable projections of one fusion-block variant.
class FusionParams {
 public:
  /// Projection-free parameters (no registered linears).
  explicit FusionParams(FusionConfig config = {});

  /// Weights ~ N(0, 1/d_k), zero biases, all requiring grad.
  static FusionParams init(const FusionConfig& config, std::uint64_t seed);
  /// Identity weights and zero biases; handy for closed-form checks.
  static FusionParams identity(const FusionConfig& config);

  [[nodiscard]] const FusionConfig& config() const noexcept { return config_; }

  /// Applies the linear registered for `role`, or returns x unchanged when the
  /// role has no projection (ProjectionMode::none).
  [[nodiscard]] Tensor project(std::string_view role, const Tensor& x) const;
  [[nodiscard]] bool has(std::string_view role) const;
  [[nodiscard]] Linear& at(std::string_view role);
  [[nodiscard]] const Linear& at(std::string_view role) const;

  /// Sum over registered linears of d_in·d_out + d_out.
  [[nodiscard]] std::size_t param_count() const;
  /// (name, tensor) pairs, name = "<role>.weight" / "<role>.bias".
  [[nodiscard]] std::vector<std::pair<std::string, Tensor*>> parameters();
  void set_trainable(bool trainable);

 private:
  FusionConfig config_;
  std::map<std::string, Linear, std::less<>> linears_;
};

/// Closed-form census for a configuration; must equal FusionParams::param_count().
std::size_t analytic_param_count(const FusionConfig& config);

/// Result of one fusion pass on a single frame.
///
/// Attention maps by variant:
///   mex:     attn_it [g x t], attn_tp [t x l], attn_itp [g x l]
///   cascade: attn_it = stage-1 map [t x g], attn_tp = stage-2 map [t x l], attn_itp empty
///   plain:   attn_it [g x t], others empty
struct FusionOutput {
  Tensor fused;
  Tensor attn_it;
  Tensor attn_tp;
  Tensor attn_itp;
  LedgerSnapshot ledger;
};

/// softmax_rows(q·kᵀ / √d_k)·v, d_k taken from the channel width of q.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Three-way attention over global (g x d_k), local (t x d_k) and prompt (l x d_k) features:
///   p_it  = softmax(f(I)·f(T)ᵀ / √d_k)
///   p_tp  = softmax(f(T)·f(P)ᵀ / √d_k)
///   p_itp = p_it · p_tp
///   fused = out(p_it·f(T) + p_itp·f(P)) [+ global if residual_add]
FusionOutput mex_attention(const Tensor& global, const Tensor& local, const Tensor& prompt,
                           const FusionParams& params);
/// Projection-free form with residual_add = false.
FusionOutput mex_attention(const Tensor& global, const Tensor& local, const Tensor& prompt);

/// Two sequential cross-attentions, each adding its query input to the attended result:
///   s1 = local + out1(Attn(q1(local), k1(global), v1(global)))
///   s2 = s1    + out2(Attn(q2(s1),    k2(prompt), v2(prompt)))
FusionOutput cascade_attention(const Tensor& local, const Tensor& global, const Tensor& prompt,
                               const FusionParams& params);
FusionOutput cascade_attention(const Tensor& local, const Tensor& global, const Tensor& prompt);

/// Single cross-attention of global queries over local keys/values.
FusionOutput plain_attention(const Tensor& global, const Tensor& local, const FusionParams& params);

/// Dispatches on params.config().variant.
FusionOutput fuse(const Tensor& global, const Tensor& local, const Tensor& prompt,
                  const FusionParams& params);

/// [n_frames x s x d_k] -> [d_k]: mean over tokens, then max over frames.
Tensor st_pool(const Tensor& x);

/// Cosine similarity of pooled fused features and pooled prompt features.
double score(const Tensor& fused_pooled, const Tensor& prompt_pooled);

struct ProfileDims {
  std::size_t d_k = 256;
  std::size_t global_tokens = 16;
  std::size_t local_tokens = 16;
  std::size_t prompt_tokens = 20;
};

struct ProfileResult {
  std::size_t param_count = 0;
  std::uint64_t peak_values = 0;
  std::uint64_t flops = 0;
  double wall_seconds = 0.0;

  /// Equality over the deterministic counters only.
  [[nodiscard]] bool same_counts(const ProfileResult& other) const noexcept {
    return param_count == other.param_count && peak_values == other.peak_values &&
           flops == other.flops;
  }
};

/// One training-mode forward pass (and optionally backward) of the fusion
/// block in a fresh execution context. Parameters and inputs are allocated
/// inside that context, so peak_values covers weights, inputs, the retained
/// tape and transient activations.
ProfileResult profile(const FusionConfig& config, const ProfileDims& dims, bool with_backward = false,
                      std::uint64_t seed = 0);

}  // namespace mexfuse

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mexfuse/features.hpp"
#include "mexfuse/fusion.hpp"

namespace mexfuse {

struct GradcheckConfig {
  FusionConfig fusion{FusionVariant::mex, 8, false, ProjectionMode::per_pair};
  Activation activation = Activation::gelu;
  std::size_t global_tokens = 2;
  std::size_t local_tokens = 3;
  std::size_t prompt_tokens = 4;
  std::size_t raw_visual_dim = 6;
  std::size_t raw_text_dim = 5;
  std::size_t frames = 2;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct ParamGradcheck {
  std::string name;
  std::size_t numel = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradcheckReport {
  std::vector<ParamGradcheck> params;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst_param;
  bool passed = false;
  /// Inputs are redrawn while two frames tie (within 1e-3) at the max pool.
  std::size_t input_draws = 1;
};

/// |a - n| / max(|a|, |n|, floor): the floor keeps entries whose true
/// gradient is zero from dividing rounding noise by itself.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central differences against backward() for every parameter of a projection
/// + fusion + ST-pool model under the loss 1 - cos(fused, prompt). Always runs
/// in f64 regardless of the default dtype.
GradcheckReport run_gradcheck(const GradcheckConfig& config);

}  // namespace mexfuse

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mexfuse/jsonl.hpp"

namespace mexfuse {

struct CalibrationParams {
  double tau = 100.0;
  double a = 8.0;
  double b = -0.1;
};

/// w_i = exp(τ·x_i) / Σ_k exp(τ·x_k), evaluated with max subtraction.
/// Throws DegenerateInputError on an empty vector.
std::vector<double> normalized_weights(std::span<const double> similarities, double tau);

/// Σ_i w_i · p_i. Throws DimensionError on length mismatch.
double pseudo_frequency(std::span<const double> weights, std::span<const double> train_freqs);

/// s + a·p + b, no clamping.
constexpr double refine(double s, double p, double a, double b) noexcept { return s + a * p + b; }

struct TrainExpression {
  std::string expr_id;
  double freq = 0.0;
};

/// Normalised occurrence counts over a training manifest, sorted by expr_id.
std::vector<TrainExpression> frequencies_from_counts(std::span<const std::string> occurrences);

/// Training-expression distribution and test-to-train similarities.
///
/// similarity[j][i] is x_ij between test expression j and training expression i.
class ExpressionStats {
 public:
  ExpressionStats(std::vector<TrainExpression> train, std::vector<std::string> test_ids,
                  std::vector<std::vector<double>> similarity, CalibrationParams params = {});

  [[nodiscard]] const std::vector<TrainExpression>& train() const noexcept { return train_; }
  [[nodiscard]] const std::vector<std::string>& test_ids() const noexcept { return test_ids_; }
  [[nodiscard]] const std::vector<std::vector<double>>& similarity() const noexcept { return similarity_; }
  [[nodiscard]] const CalibrationParams& params() const noexcept { return params_; }
  void set_params(const CalibrationParams& p) noexcept { params_ = p; }

  /// Row index of a test expression, if present.
  [[nodiscard]] std::optional<std::size_t> test_index(const std::string& expr_id) const;
  /// p_j^ts for test expression j.
  [[nodiscard]] double pseudo_frequency_for(std::size_t j) const;
  /// p^ts for an expression id; throws LookupError if unknown.
  [[nodiscard]] double pseudo_frequency_for(const std::string& expr_id) const;

  /// {train: [{expr_id, freq}], test: [ids], similarity: [[x_ij]], tau, a, b}.
  /// `test` is optional on input; rows then map to ids "0", "1", ...
  static ExpressionStats from_json(const Json& j);
  [[nodiscard]] Json to_json() const;
  static ExpressionStats load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<TrainExpression> train_;
  std::vector<std::string> test_ids_;
  std::vector<std::vector<double>> similarity_;
  CalibrationParams params_;
  std::vector<double> train_freqs_;
};

}  // namespace mexfuse

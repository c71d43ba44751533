#include "mexfuse/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mexfuse/errors.hpp"

namespace mexfuse {

std::vector<double> normalized_weights(std::span<const double> similarities, double tau) {
  if (similarities.empty()) throw DegenerateInputError("normalized_weights: no similarities");
  double mx = -INFINITY;
  for (const double x : similarities) {
    if (!std::isfinite(x)) throw DegenerateInputError("normalized_weights: non-finite similarity");
    mx = std::max(mx, tau * x);
  }
  std::vector<double> w(similarities.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(tau * similarities[i] - mx);
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

double pseudo_frequency(std::span<const double> weights, std::span<const double> train_freqs) {
  if (weights.size() != train_freqs.size()) {
    throw DimensionError("pseudo_frequency: " + std::to_string(weights.size()) + " weights vs " +
                         std::to_string(train_freqs.size()) + " frequencies");
  }
  double p = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) p += weights[i] * train_freqs[i];
  return p;
}

std::vector<TrainExpression> frequencies_from_counts(std::span<const std::string> occurrences) {
  if (occurrences.empty()) throw DegenerateInputError("frequencies_from_counts: empty manifest");
  std::map<std::string, std::size_t> counts;
  for (const auto& id : occurrences) ++counts[id];
  std::vector<TrainExpression> out;
  out.reserve(counts.size());
  const double total = static_cast<double>(occurrences.size());
  for (const auto& [id, n] : counts) out.push_back({id, static_cast<double>(n) / total});
  return out;
}

ExpressionStats::ExpressionStats(std::vector<TrainExpression> train, std::vector<std::string> test_ids,
                                 std::vector<std::vector<double>> similarity, CalibrationParams params)
    : train_(std::move(train)),
      test_ids_(std::move(test_ids)),
      similarity_(std::move(similarity)),
      params_(params) {
  if (train_.empty()) throw DegenerateInputError("calibration: no training expressions");
  if (test_ids_.size() != similarity_.size()) {
    throw DimensionError("calibration: " + std::to_string(test_ids_.size()) + " test ids vs " +
                         std::to_string(similarity_.size()) + " similarity rows");
  }
  for (const auto& t : train_) {
    if (!(t.freq >= 0.0)) throw ConfigError("calibration: negative frequency for " + t.expr_id);
    train_freqs_.push_back(t.freq);
  }
  for (std::size_t j = 0; j < similarity_.size(); ++j) {
    if (similarity_[j].size() != train_.size()) {
      throw DimensionError("calibration: similarity row " + std::to_string(j) + " has " +
                           std::to_string(similarity_[j].size()) + " entries, expected " +
                           std::to_string(train_.size()));
    }
    for (const double x : similarity_[j]) {
      if (!std::isfinite(x)) throw ConfigError("calibration: non-finite similarity in row " + std::to_string(j));
    }
  }
}

std::optional<std::size_t> ExpressionStats::test_index(const std::string& expr_id) const {
  const auto it = std::find(test_ids_.begin(), test_ids_.end(), expr_id);
  if (it == test_ids_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - test_ids_.begin());
}

double ExpressionStats::pseudo_frequency_for(std::size_t j) const {
  if (j >= similarity_.size()) throw LookupError("calibration: no similarity row " + std::to_string(j));
  return pseudo_frequency(normalized_weights(similarity_[j], params_.tau), train_freqs_);
}

double ExpressionStats::pseudo_frequency_for(const std::string& expr_id) const {
  const auto j = test_index(expr_id);
  if (!j) throw LookupError("calibration: unknown test expression '" + expr_id + "'");
  return pseudo_frequency_for(*j);
}

ExpressionStats ExpressionStats::from_json(const Json& j) {
  std::vector<TrainExpression> train;
  for (const auto& row : require_field<Json>(j, "train")) {
    train.push_back({require_field<std::string>(row, "expr_id"), require_field<double>(row, "freq")});
  }
  auto similarity = require_field<std::vector<std::vector<double>>>(j, "similarity");
  std::vector<std::string> test_ids;
  if (j.contains("test")) {
    test_ids = require_field<std::vector<std::string>>(j, "test");
  } else {
    for (std::size_t r = 0; r < similarity.size(); ++r) test_ids.push_back(std::to_string(r));
  }
  CalibrationParams params;
  params.tau = j.value("tau", params.tau);
  params.a = j.value("a", params.a);
  params.b = j.value("b", params.b);
  return ExpressionStats(std::move(train), std::move(test_ids), std::move(similarity), params);
}

Json ExpressionStats::to_json() const {
  Json train = Json::array();
  for (const auto& t : train_) train.push_back({{"expr_id", t.expr_id}, {"freq", t.freq}});
  return Json{{"train", std::move(train)}, {"test", test_ids_}, {"similarity", similarity_},
              {"tau", params_.tau},        {"a", params_.a},    {"b", params_.b}};
}

ExpressionStats ExpressionStats::load(const std::filesystem::path& path) {
  const Json j = read_json(path);
  try {
    return from_json(j);
  } catch (const std::invalid_argument& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void ExpressionStats::save(const std::filesystem::path& path) const { write_json(path, to_json()); }

}  // namespace mexfuse

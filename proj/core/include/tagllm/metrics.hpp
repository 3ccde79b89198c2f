#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace tagllm {

double metric_mse(std::span<const double> preds, std::span<const double> targets);
double metric_mae(std::span<const double> preds, std::span<const double> targets);

struct PearsonResult {
  double value = 0.0;
  bool defined = false;  // false when either series has zero variance
};
PearsonResult metric_pearson(std::span<const double> preds, std::span<const double> targets);

// Matched positions / max(len), averaged over pairs.
double metric_token_accuracy(std::span<const std::vector<std::int32_t>> preds,
                             std::span<const std::vector<std::int32_t>> targets);
double metric_exact_match(std::span<const std::vector<std::int32_t>> preds,
                          std::span<const std::vector<std::int32_t>> targets);

double variance(std::span<const double> values);
double mean(std::span<const double> values);
double median(std::vector<double> values);

}  // namespace tagllm

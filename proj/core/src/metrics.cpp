#include "tagllm/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "tagllm/error.hpp"

namespace tagllm {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b, std::size_t min_len) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::dimension, "metric: prediction and target counts differ");
  }
  if (a.size() < min_len) {
    throw Error(ErrorCode::value, "metric: need at least " + std::to_string(min_len) + " values");
  }
}

}  // namespace

double mean(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::value, "mean of an empty series");
  double s = 0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double variance(std::span<const double> values) {
  const double m = mean(values);
  double s = 0;
  for (double v : values) s += (v - m) * (v - m);
  return s / static_cast<double>(values.size());
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorCode::value, "median of an empty series");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double metric_mse(std::span<const double> preds, std::span<const double> targets) {
  check_pair(preds, targets, 1);
  double s = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += (preds[i] - targets[i]) * (preds[i] - targets[i]);
  return s / static_cast<double>(preds.size());
}

double metric_mae(std::span<const double> preds, std::span<const double> targets) {
  check_pair(preds, targets, 1);
  double s = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - targets[i]);
  return s / static_cast<double>(preds.size());
}

PearsonResult metric_pearson(std::span<const double> preds, std::span<const double> targets) {
  check_pair(preds, targets, 2);
  const double mp = mean(preds), mt = mean(targets);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double x = preds[i] - mp, y = targets[i] - mt;
    sxy += x * y;
    sxx += x * x;
    syy += y * y;
  }
  if (sxx <= 0 || syy <= 0) return {0.0, false};
  return {sxy / std::sqrt(sxx * syy), true};
}

double metric_token_accuracy(std::span<const std::vector<std::int32_t>> preds,
                             std::span<const std::vector<std::int32_t>> targets) {
  if (preds.size() != targets.size() || preds.empty()) {
    throw Error(ErrorCode::dimension, "token accuracy needs aligned, non-empty lists");
  }
  double total = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto n = std::max(preds[i].size(), targets[i].size());
    if (n == 0) {
      total += 1.0;
      continue;
    }
    std::size_t hit = 0;
    for (std::size_t k = 0; k < std::min(preds[i].size(), targets[i].size()); ++k) {
      hit += preds[i][k] == targets[i][k];
    }
    total += static_cast<double>(hit) / static_cast<double>(n);
  }
  return total / static_cast<double>(preds.size());
}

double metric_exact_match(std::span<const std::vector<std::int32_t>> preds,
                          std::span<const std::vector<std::int32_t>> targets) {
  if (preds.size() != targets.size() || preds.empty()) {
    throw Error(ErrorCode::dimension, "exact match needs aligned, non-empty lists");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == targets[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

}  // namespace tagllm

#pragma once

// Finite-difference gradient checks in double precision. Each trial draws
// fresh inputs, reduces the op output against a random fixed weighting so
// every output element matters, and compares the analytic gradient of every
// input with central differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tagllm/numerics.hpp"
#include "tagllm/rng.hpp"

namespace tagllm::testing {

struct GradCheckResult {
  std::string op;
  int trials = 0;
  double worst_rel_error = 0;
};

using OpFn = std::function<Tensor64(const std::vector<Tensor64>&)>;
using InputFn = std::function<std::vector<Tensor64>(Rng&)>;

inline Tensor64 random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor64::from_data(std::move(shape), std::move(v), true);
}

// ||a - n|| / (||a|| + ||n||), with both norms tiny counted as agreement.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nn);
  if (denom < 1e-10) return 0.0;
  return std::sqrt(diff) / denom;
}

inline GradCheckResult grad_check(const std::string& name, const OpFn& op, const InputFn& inputs,
                                  int trials, std::uint64_t seed, double h = 1e-5) {
  GradCheckResult result{name, trials, 0.0};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    auto xs = inputs(rng);
    Tensor64 probe = op(xs);
    std::vector<double> w(probe.numel());
    for (auto& x : w) x = rng.normal();
    const Shape out_shape = probe.shape();
    auto loss_of = [&](const std::vector<Tensor64>& in) {
      auto out = op(in);
      return ops::sum(ops::mul(out, Tensor64::from_data(out_shape, w)));
    };
    for (auto& x : xs) x.clear_grad();
    backward(loss_of(xs));
    for (auto& x : xs) {
      if (!x.requires_grad()) continue;
      std::vector<double> analytic(x.numel(), 0.0);
      if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
      std::vector<double> numeric(x.numel());
      auto data = x.mutable_data();
      NoGradGuard guard;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + h;
        const double up = loss_of(xs).item();
        data[i] = saved - h;
        const double down = loss_of(xs).item();
        data[i] = saved;
        numeric[i] = (up - down) / (2 * h);
      }
      result.worst_rel_error = std::max(result.worst_rel_error, relative_error(analytic, numeric));
    }
  }
  return result;
}

inline std::vector<std::int32_t> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> ids(n);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(vocab));
  return ids;
}

// One check per differentiable op; shapes vary per trial.
inline std::vector<GradCheckResult> check_all_ops(int trials, std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  auto dims = [](Rng& rng, std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(lo),
                                              static_cast<std::int64_t>(hi)));
  };
  // Shapes are drawn inside the input generator and captured here so the op
  // closure sees the same trial's configuration.
  struct Trial {
    std::vector<std::int32_t> ids;
    std::vector<std::size_t> rows;
    std::vector<std::size_t> offsets;
    std::vector<double> mask;
    std::size_t a = 0, b = 0, heads = 1;
  };
  auto trial = std::make_shared<Trial>();

  out.push_back(grad_check(
      "matmul", [](const auto& x) { return ops::matmul(x[0], x[1]); },
      [&](Rng& r) {
        const auto m = dims(r, 1, 5), k = dims(r, 1, 5), n = dims(r, 1, 5);
        return std::vector{random_tensor(r, {m, k}), random_tensor(r, {k, n})};
      },
      trials, seed + 1));
  out.push_back(grad_check(
      "add", [](const auto& x) { return ops::add(x[0], x[1]); },
      [&](Rng& r) {
        const Shape s{dims(r, 1, 5), dims(r, 1, 5)};
        return std::vector{random_tensor(r, s), random_tensor(r, s)};
      },
      trials, seed + 2));
  out.push_back(grad_check(
      "add_bias", [](const auto& x) { return ops::add_bias(x[0], x[1]); },
      [&](Rng& r) {
        const auto m = dims(r, 1, 5), n = dims(r, 1, 5);
        return std::vector{random_tensor(r, {m, n}), random_tensor(r, {n})};
      },
      trials, seed + 3));
  out.push_back(grad_check(
      "mul", [](const auto& x) { return ops::mul(x[0], x[1]); },
      [&](Rng& r) {
        const Shape s{dims(r, 1, 5), dims(r, 1, 5)};
        return std::vector{random_tensor(r, s), random_tensor(r, s)};
      },
      trials, seed + 4));
  out.push_back(grad_check(
      "scale", [](const auto& x) { return ops::scale(x[0], -1.7); },
      [&](Rng& r) { return std::vector{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 6)})}; },
      trials, seed + 5));
  out.push_back(grad_check(
      "gelu", [](const auto& x) { return ops::gelu(x[0]); },
      [&](Rng& r) { return std::vector{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 6)}, 2.0)}; },
      trials, seed + 6));
  out.push_back(grad_check(
      "layer_norm", [](const auto& x) { return ops::layer_norm(x[0], x[1], x[2], 1e-5); },
      [&](Rng& r) {
        const auto m = dims(r, 1, 4), n = dims(r, 2, 6);
        return std::vector{random_tensor(r, {m, n}), random_tensor(r, {n}), random_tensor(r, {n})};
      },
      trials, seed + 7));
  out.push_back(grad_check(
      "embedding",
      [trial](const auto& x) { return ops::embedding(x[0], std::span<const std::int32_t>(trial->ids)); },
      [&, trial](Rng& r) {
        const auto v = dims(r, 1, 6), d = dims(r, 1, 4);
        trial->ids = random_ids(r, dims(r, 1, 8), v);  // repeats exercise scatter-add
        return std::vector{random_tensor(r, {v, d})};
      },
      trials, seed + 8));
  out.push_back(grad_check(
      "concat_rows",
      [](const auto& x) { return ops::concat_rows(std::span<const Tensor64>(x)); },
      [&](Rng& r) {
        const auto d = dims(r, 1, 4);
        std::vector<Tensor64> parts;
        for (std::size_t i = 0, n = dims(r, 1, 4); i < n; ++i)
          parts.push_back(random_tensor(r, {dims(r, 1, 3), d}));
        return parts;
      },
      trials, seed + 9));
  out.push_back(grad_check(
      "slice_rows", [trial](const auto& x) { return ops::slice_rows(x[0], trial->a, trial->b); },
      [&, trial](Rng& r) {
        const auto m = dims(r, 1, 6);
        trial->a = dims(r, 0, m - 1);
        trial->b = dims(r, trial->a + 1, m);
        return std::vector{random_tensor(r, {m, dims(r, 1, 4)})};
      },
      trials, seed + 10));
  out.push_back(grad_check(
      "select_rows",
      [trial](const auto& x) {
        return ops::select_rows(x[0], std::span<const std::size_t>(trial->rows));
      },
      [&, trial](Rng& r) {
        const auto m = dims(r, 1, 5);
        trial->rows.assign(dims(r, 1, 6), 0);
        for (auto& i : trial->rows) i = r.below(m);
        return std::vector{random_tensor(r, {m, dims(r, 1, 4)})};
      },
      trials, seed + 11));
  out.push_back(grad_check(
      "causal_attention",
      [trial](const auto& x) {
        return ops::causal_attention(x[0], x[1], x[2], trial->heads,
                                     std::span<const std::size_t>(trial->offsets));
      },
      [&, trial](Rng& r) {
        trial->heads = dims(r, 1, 2);
        const auto d = trial->heads * dims(r, 1, 3);
        trial->offsets = {0};
        for (std::size_t s = 0, n = dims(r, 1, 3); s < n; ++s)
          trial->offsets.push_back(trial->offsets.back() + dims(r, 1, 4));
        const auto rows = trial->offsets.back();
        return std::vector{random_tensor(r, {rows, d}), random_tensor(r, {rows, d}),
                           random_tensor(r, {rows, d})};
      },
      trials, seed + 12));
  for (std::size_t axis : {0u, 1u}) {
    out.push_back(grad_check(
        "softmax_axis" + std::to_string(axis),
        [axis](const auto& x) { return ops::softmax(x[0], axis); },
        [&](Rng& r) { return std::vector{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 5)}, 2.0)}; },
        trials, seed + 13 + axis));
  }
  out.push_back(grad_check(
      "cross_entropy",
      [trial](const auto& x) {
        return ops::cross_entropy(x[0], std::span<const std::int32_t>(trial->ids),
                                  std::span<const double>(trial->mask));
      },
      [&, trial](Rng& r) {
        const auto n = dims(r, 1, 5), v = dims(r, 2, 6);
        trial->ids = random_ids(r, n, v);
        trial->mask.assign(n, 0.0);
        for (auto& m : trial->mask) m = r.below(3) == 0 ? 0.0 : r.uniform(0.5, 2.0);
        trial->mask[r.below(n)] = 1.0;
        for (std::size_t i = 0; i < n; ++i)
          if (trial->mask[i] == 0.0) trial->ids[i] = -1;
        return std::vector{random_tensor(r, {n, v}, 2.0)};
      },
      trials, seed + 15));
  out.push_back(grad_check(
      "mse", [](const auto& x) { return ops::mse(x[0], x[1]); },
      [&](Rng& r) {
        const Shape s{dims(r, 1, 4), dims(r, 1, 4)};
        return std::vector{random_tensor(r, s), random_tensor(r, s)};
      },
      trials, seed + 16));
  out.push_back(grad_check(
      "sum", [](const auto& x) { return ops::sum(x[0]); },
      [&](Rng& r) { return std::vector{random_tensor(r, {dims(r, 1, 4), dims(r, 1, 4)})}; },
      trials, seed + 17));
  return out;
}

}  // namespace tagllm::testing

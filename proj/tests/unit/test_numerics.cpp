#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tagllm/error.hpp"
#include "tagllm/numerics.hpp"

using namespace tagllm;

namespace {

Tensor T(Shape s, std::vector<float> v, bool grad = false) {
  return Tensor::from_data(std::move(s), std::move(v), grad);
}

// Gives p the gradient g through an actual backward pass.
void set_grad(const Tensor& p, std::vector<float> g) {
  backward(ops::sum(ops::mul(p, T(p.shape(), std::move(g)))));
}

}  // namespace

TEST_CASE("every op matches central differences in double precision") {
  for (const auto& r : testing::check_all_ops(100, 7)) {
    CAPTURE(r.op);
    CHECK(r.trials >= 100);
    CHECK(r.worst_rel_error <= 1e-4);
  }
}

TEST_CASE("matmul small cases and shape guard") {
  auto a = T({2, 2}, {1, 2, 3, 4});
  auto b = T({2, 2}, {1, 0, 0, 1});
  auto c = ops::matmul(a, b);
  CHECK(std::vector<float>(c.data().begin(), c.data().end()) == std::vector<float>{1, 2, 3, 4});
  auto row = ops::matmul(T({1, 3}, {1, 2, 3}), T({3, 1}, {4, 5, 6}));
  CHECK(row.item() == doctest::Approx(32));
  CHECK_THROWS_AS(ops::matmul(T({2, 3}, std::vector<float>(6, 1)), T({2, 3}, std::vector<float>(6, 1))),
                  Error);
}

TEST_CASE("softmax rows sum to one") {
  auto s = ops::softmax(T({1, 2}, {0.f, std::log(3.f)}), 1);
  CHECK(s.data()[0] == doctest::Approx(0.25));
  CHECK(s.data()[1] == doctest::Approx(0.75));
  Rng rng(3);
  auto x = Tensor::zeros({7, 11});
  for (auto& v : x.mutable_data()) v = static_cast<float>(rng.normal(0, 5));
  auto p = ops::softmax(x, 1);
  for (std::size_t i = 0; i < 7; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 11; ++j) total += p.at(i, j);
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
}

TEST_CASE("cross entropy values") {
  std::vector<std::int32_t> t{1};
  std::vector<float> m{1};
  CHECK(ops::cross_entropy(T({1, 2}, {0.f, std::log(3.f)}), std::span<const std::int32_t>(t), std::span<const float>(m)).item() ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-5));
  CHECK(ops::cross_entropy(T({1, 2}, {-60.f, 60.f}), std::span<const std::int32_t>(t), std::span<const float>(m)).item() < 1e-6);
  std::vector<float> zero{0};
  CHECK_THROWS_AS(ops::cross_entropy(T({1, 2}, {0, 0}), std::span<const std::int32_t>(t), std::span<const float>(zero)), Error);
}

TEST_CASE("mse values") {
  CHECK(ops::mse(T({2}, {0, 2}), T({2}, {1, 1})).item() == doctest::Approx(1.0));
  CHECK(ops::mse(T({1}, {3.14f}), T({1}, {3.24f})).item() == doctest::Approx(0.01).epsilon(1e-4));
  CHECK(ops::mse(T({1}, {3.14f}), T({1}, {3.15f})).item() ==
        doctest::Approx(0.0001).epsilon(1e-3));
  CHECK(ops::mse(T({3}, {1, 2, 3}), T({3}, {1, 2, 3})).item() == 0.0f);
  CHECK_THROWS_AS(ops::mse(T({2}, {1, 2}), T({3}, {1, 2, 3})), Error);
}

TEST_CASE("backward on simple graphs") {
  auto x = T({3}, {1, 2, 3}, true);
  backward(ops::sum(x));
  for (float g : x.grad()) CHECK(g == 1.0f);

  // loss = mse(w x, y) with scalar w: d/dw = 2 x (w x - y)
  auto w = Tensor::from_data({1, 1}, {0.5f}, true);
  backward(ops::mse(ops::matmul(T({1, 1}, {3.f}), w), T({1, 1}, {4.f})));
  CHECK(w.grad()[0] == doctest::Approx(2 * 3 * (0.5 * 3 - 4)));

  auto frozen = T({2}, {1, 2}, false);
  auto live = T({2}, {3, 4}, true);
  backward(ops::sum(ops::mul(frozen, live)));
  CHECK_FALSE(frozen.has_grad());
  CHECK(live.has_grad());

  CHECK_THROWS_AS(backward(ops::mul(live, live)), Error);
}

TEST_CASE("no grad guard suppresses graph construction") {
  auto x = T({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    y = ops::scale(x, 2.0f);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("adamw update rule") {
  {
    auto p = T({1}, {1.0f}, true);
    AdamW<float> opt({0.1, 0.9, 0.999, 1e-8, 0.0});
    opt.add_param(p);
    set_grad(p, {1.0f});
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
  }
  {
    auto p = T({2}, {1.0f, -2.0f}, true);
    AdamW<float> opt({0.1, 0.9, 0.999, 1e-8, 0.0});
    opt.add_param(p);
    set_grad(p, {0.0f, 0.0f});
    opt.step();
    CHECK(p.data()[0] == 1.0f);
    CHECK(p.data()[1] == -2.0f);
  }
  {
    auto p = T({1}, {2.0f}, true);
    AdamW<float> opt({0.1, 0.9, 0.999, 1e-8, 0.5});
    opt.add_param(p);
    set_grad(p, {0.0f});
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(2.0 * (1 - 0.1 * 0.5)));
  }
  {
    // Absent gradients are skipped rather than treated as zero.
    auto a = T({1}, {1.0f}, true);
    auto b = T({1}, {1.0f}, true);
    AdamW<float> opt({0.1, 0.9, 0.999, 1e-8, 0.5});
    opt.add_param(a);
    opt.add_param(b);
    set_grad(a, {1.0f});
    opt.step();
    CHECK(b.data()[0] == 1.0f);
    CHECK(opt.slots()[1].steps == 0);
  }
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(0, 100, 0.1, 1e-3) == 0.0);
  CHECK(cosine_lr(10, 100, 0.1, 1e-3) == doctest::Approx(1e-3));
  CHECK(cosine_lr(100, 100, 0.1, 1e-3) == doctest::Approx(0.0));
  CHECK(cosine_lr(55, 100, 0.1, 1e-3) == doctest::Approx(0.5e-3));
  CHECK_THROWS_AS(cosine_lr(0, 0, 0.1, 1e-3), Error);
}

TEST_CASE("forward values are deterministic") {
  auto run = [] {
    Rng rng(42);
    auto x = Tensor::zeros({4, 6});
    for (auto& v : x.mutable_data()) v = static_cast<float>(rng.normal());
    auto g = Tensor::full({6}, 1.0f), b = Tensor::zeros({6});
    auto y = ops::gelu(ops::layer_norm(x, g, b, 1e-5));
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  CHECK(run() == run());
}

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "tagllm/error.hpp"
#include "tagllm/heads.hpp"
#include "tagllm/tags.hpp"
#include "tagllm/vocab.hpp"

using namespace tagllm;

namespace {

BackboneConfig tiny() {
  BackboneConfig c;
  c.embed_dim = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.context_len = 32;
  return c;
}

Tensor hidden_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  auto h = Tensor::zeros({n, d});
  for (auto& x : h.mutable_data()) x = static_cast<float>(rng.normal());
  return h;
}

Tensor param(const Backbone& model, const std::string& name) {
  for (const auto& [n, t] : model.named_parameters())
    if (n == name) return t;
  throw std::runtime_error("no parameter " + name);
}

}  // namespace

TEST_CASE("numeric readout") {
  auto h = hidden_rows(4, 8, 1);
  auto head = TaskHead::regression("r", 8);
  CHECK(predict_numeric(h, 2, head).item() == 0.0f);

  head.weight.mutable_data()[0] = 1.0f;  // e_1
  CHECK(predict_numeric(h, 2, head).item() == h.at(2, 0));
  CHECK_THROWS_AS(predict_numeric(h, 4, head), Error);
  CHECK_THROWS_AS(predict_numeric(h, 0, TaskHead::generation("g")), Error);
}

TEST_CASE("readout is linear in the hidden state") {
  auto head = TaskHead::regression("r", 8, 3);
  Rng rng(2);
  for (auto& w : head.weight.mutable_data()) w = static_cast<float>(rng.normal());
  auto a = hidden_rows(1, 8, 3), b = hidden_rows(1, 8, 4);
  auto ab = Tensor::zeros({1, 8});
  for (std::size_t j = 0; j < 8; ++j) ab.mutable_data()[j] = 2 * a.data()[j] - 3 * b.data()[j];
  auto pa = predict_numeric(a, 0, head), pb = predict_numeric(b, 0, head);
  auto pab = predict_numeric(ab, 0, head);
  for (std::size_t k = 0; k < 3; ++k)
    CHECK(pab.data()[k] == doctest::Approx(2 * pa.data()[k] - 3 * pb.data()[k]).epsilon(1e-5));
}

TEST_CASE("mse gradient of the head weight matches finite differences") {
  auto h = hidden_rows(3, 8, 5);
  auto head = TaskHead::regression("r", 8);
  Rng rng(6);
  for (auto& w : head.weight.mutable_data()) w = static_cast<float>(rng.normal(0, 0.3));
  const auto target = Tensor::from_data({1, 1}, {0.7f});
  auto loss = [&] { return ops::mse(predict_numeric(h, 1, head), target).item(); };
  head.weight.clear_grad();
  backward(ops::mse(predict_numeric(h, 1, head), target));
  std::vector<float> analytic(head.weight.grad().begin(), head.weight.grad().end());
  auto w = head.weight.mutable_data();
  NoGradGuard guard;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const float saved = w[i];
    w[i] = saved + 1e-2f;
    const double up = loss();
    w[i] = saved - 1e-2f;
    const double down = loss();
    w[i] = saved;
    CHECK(analytic[i] == doctest::Approx((up - down) / 2e-2).epsilon(1e-3).scale(1e-3));
  }
}

TEST_CASE("classification head outputs a distribution") {
  auto head = TaskHead::classification("c", 8, 4);
  Rng rng(7);
  for (auto& w : head.weight.mutable_data()) w = static_cast<float>(rng.normal());
  auto p = predict_numeric(hidden_rows(2, 8, 8), 1, head);
  double total = 0;
  for (float x : p.data()) total += x;
  CHECK(total == doctest::Approx(1.0));
  CHECK(head.parameter_count() == 32);
  CHECK(TaskHead::generation("g").parameter_count() == 0);
}

TEST_CASE("standardization") {
  auto head = TaskHead::regression("r", 8);
  std::vector<double> y{1, 2, 3, 4};
  head.fit_standardization(y);
  CHECK(head.target_mean == 2.5);
  CHECK(head.destandardize(head.standardize(3.3)) == doctest::Approx(3.3));
}

TEST_CASE("a constant-logit model repeats its favourite token") {
  Rng rng(9);
  Backbone model(tiny(), rng);
  // Final norm output becomes the constant e_1; out_proj row 0 selects 'q'.
  for (auto& x : param(model, "lnf.g").mutable_data()) x = 0.0f;
  auto b = param(model, "lnf.b").mutable_data();
  std::fill(b.begin(), b.end(), 0.0f);
  b[0] = 1.0f;
  auto proj = param(model, "out_proj").mutable_data();
  std::fill(proj.begin(), proj.end(), 0.0f);
  proj[vocab::id_of('q')] = 1.0f;
  auto out = greedy_decode(model, nullptr, as_input(vocab::encode("hi")), 6, vocab::kStop);
  CHECK(out == std::vector<std::int32_t>(6, vocab::id_of('q')));
}

TEST_CASE("decoding never emits tag ids and batching matches single prompts") {
  Rng rng(10);
  Backbone model(tiny(), rng);
  TagTable tags(model.vocab_size(), model.embed_dim());
  init_tag(tags, model, "t", TagKind::function, 3);
  std::vector<std::vector<InputToken>> prompts;
  for (std::string s : {"a", "bcd", "xyz!"}) {
    auto p = as_input(vocab::encode(s));
    for (std::int32_t r = 0; r < 3; ++r) p.push_back(InputToken::tag(tags.id_of("t"), r));
    prompts.push_back(p);
  }
  auto batch = greedy_decode_batch(model, &tags, prompts, 10, vocab::kStop);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    CHECK(batch[i] == greedy_decode(model, &tags, prompts[i], 10, vocab::kStop));
    for (auto id : batch[i]) CHECK(id < static_cast<std::int32_t>(model.vocab_size()));
  }
}

TEST_CASE("an overfit model reproduces a memorized pair") {
  const std::string prompt = "In:qtuv Out:", target = "zyxw";
  std::vector<std::vector<std::int32_t>> corpus(32, vocab::encode(prompt + target + '\n'));
  PretrainConfig train;
  train.steps = 150;
  train.batch_size = 4;
  train.lr = 1e-2;
  train.held_out_fraction = 0.0;
  auto result = pretrain(corpus, tiny(), train);
  auto out = greedy_decode(result.model, nullptr, as_input(vocab::encode(prompt)), 10, vocab::kStop);
  CHECK(vocab::decode(out) == target + '\n');
}

TEST_CASE("digit round trip") {
  auto a = digit_generation_roundtrip(3.14, 2);
  CHECK(a.text == "3.14");
  CHECK(a.parsed == doctest::Approx(3.14));
  auto b = digit_generation_roundtrip(-0.5, 2);
  CHECK(b.text == "-0.50");
  CHECK(b.parsed == -0.5);
  CHECK(vocab::decode(b.tokens) == "-0.50");

  auto ok = parse_generated_number(vocab::encode(std::string("1.25") + '\n'), 9.0);
  CHECK_FALSE(ok.failed);
  CHECK(ok.value == 1.25);
  auto bad = parse_generated_number(vocab::encode("1.2x"), 9.0);
  CHECK(bad.failed);
  CHECK(bad.value == 9.0);
}

TEST_CASE("per-digit cross entropy ignores digit order") {
  // The model predicts "3.14" with uniform confusion over the other symbols.
  const std::string predicted = "3.14";
  const std::string symbols = "0123456789.";
  auto logits = Tensor::zeros({4, vocab::kSize});
  for (std::size_t i = 0; i < 4; ++i) {
    for (char c : symbols) logits.mutable_data()[i * vocab::kSize + vocab::id_of(c)] = 1.0f;
    logits.mutable_data()[i * vocab::kSize + vocab::id_of(predicted[i])] = 4.0f;
  }
  std::vector<float> mask(4, 1.0f);
  auto ce = [&](const std::string& target) {
    auto ids = vocab::encode(target);
    return ops::cross_entropy(logits, std::span<const std::int32_t>(ids),
                              std::span<const float>(mask))
        .item();
  };
  CHECK(ce("3.24") == doctest::Approx(ce("3.15")));
  auto mse = [](double a, double b) { return (a - b) * (a - b); };
  CHECK(mse(3.14, 3.24) > 50 * mse(3.14, 3.15));
}

TEST_CASE("heads save and load") {
  auto r = TaskHead::regression("r", 8, 2);
  r.weight.mutable_data()[3] = 0.5f;
  r.target_mean = 1.5;
  r.target_std = 0.25;
  std::vector<TaskHead> heads{r, TaskHead::generation("g")};
  const auto dir = std::filesystem::temp_directory_path() / "tagllm_heads";
  std::filesystem::remove_all(dir);
  save_heads(dir, heads);
  auto back = load_heads(dir, 8);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "r");
  CHECK(back[0].d_t == 2);
  CHECK(back[0].target_mean == 1.5);
  CHECK(back[0].target_std == 0.25);
  CHECK(back[0].weight.data()[3] == 0.5f);
  CHECK(back[1].kind == HeadKind::generation);
  CHECK_THROWS_AS(load_heads(dir, 16), Error);
  std::filesystem::remove_all(dir);
}

#include <benchmark/benchmark.h>

#include <vector>

#include "tagllm/backbone.hpp"
#include "tagllm/heads.hpp"
#include "tagllm/rng.hpp"
#include "tagllm/tags.hpp"
#include "tagllm/vocab.hpp"

using namespace tagllm;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng, bool grad = false) {
  std::vector<float> v(rows * cols);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor::from_data({rows, cols}, std::move(v), grad);
}

std::vector<std::int32_t> random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::int32_t> ids(n);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.uniform() * static_cast<double>(vocab));
  return ids;
}

const BackboneConfig kReference{};

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  auto a = random_matrix(n, 64, rng);
  auto b = random_matrix(64, 256, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * 64 * 256));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(160)->Arg(640);

void BM_AttentionBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  auto q = random_matrix(n, 64, rng, true);
  auto k = random_matrix(n, 64, rng, true);
  auto v = random_matrix(n, 64, rng, true);
  const std::vector<std::size_t> offsets{0, n};
  for (auto _ : state) {
    auto loss = ops::sum(ops::causal_attention(q, k, v, 2, offsets));
    backward(loss);
  }
}
BENCHMARK(BM_AttentionBackward)->Arg(32)->Arg(160);

void BM_ForwardReference(benchmark::State& state) {
  Rng rng(3);
  Backbone model(kReference, rng);
  const auto ids = random_ids(kReference.context_len, kReference.vocab_size, rng);
  const auto input = as_input(ids);
  NoGradGuard guard;
  for (auto _ : state) {
    auto out = model.forward(model.embed(input));
    benchmark::DoNotOptimize(out.logits.data().data());
  }
}
BENCHMARK(BM_ForwardReference);

// One pretraining-sized step: 16 packed documents of 64 tokens, forward,
// loss and backward.
void BM_TrainStep(benchmark::State& state) {
  Rng rng(4);
  Backbone model(kReference, rng);
  std::vector<std::vector<InputToken>> docs;
  std::vector<std::int32_t> targets;
  for (int doc = 0; doc < 16; ++doc) {
    const auto ids = random_ids(65, kReference.vocab_size, rng);
    std::vector<InputToken> input;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      input.push_back(InputToken::token(ids[i]));
      targets.push_back(ids[i + 1]);
    }
    docs.push_back(std::move(input));
  }
  const std::vector<float> mask(targets.size(), 1.0f);
  for (auto _ : state) {
    auto packed = model.embed_batch(docs);
    auto out = model.forward(packed.embedded, packed.offsets);
    auto loss = ops::cross_entropy(out.logits, std::span<const std::int32_t>(targets),
                                   std::span<const float>(mask));
    backward(loss);
  }
}
BENCHMARK(BM_TrainStep);

void BM_GreedyDecode(benchmark::State& state) {
  Rng rng(5);
  Backbone model(kReference, rng);
  TagTable tags(kReference.vocab_size, kReference.embed_dim);
  init_tag(tags, model, "fn", TagKind::function, 10);
  const auto id = tags.id_of("fn");
  std::vector<InputToken> prompt = as_input(random_ids(40, kReference.vocab_size, rng));
  for (std::int32_t r = 0; r < 10; ++r) prompt.push_back(InputToken::tag(id, r));
  for (auto _ : state) {
    auto out = greedy_decode(model, &tags, prompt, 24, vocab::kStop);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_GreedyDecode);

}  // namespace
BENCHMARK_MAIN();

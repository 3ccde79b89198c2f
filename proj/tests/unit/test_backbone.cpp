#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "tagllm/backbone.hpp"
#include "tagllm/error.hpp"
#include "tagllm/tags.hpp"
#include "tagllm/vocab.hpp"

using namespace tagllm;

namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.embed_dim = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.context_len = 24;
  return c;
}

std::vector<InputToken> text_ids(std::string_view s) { return as_input(vocab::encode(s)); }

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double(std::abs(a[i] - b[i])));
  return worst;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = small_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.vocab_size = 10;
  Rng rng(0);
  CHECK_THROWS_AS(Backbone(c, rng), Error);
  CHECK(BackboneConfig::from_json(small_config().to_json()) == small_config());
}

TEST_CASE("forward shapes") {
  Rng rng(1);
  Backbone model(small_config(), rng);
  auto out = model.forward(model.embed(text_ids("hello")));
  CHECK(out.logits.shape() == Shape{5, 96});
  CHECK(out.hidden.shape() == Shape{5, 16});
}

TEST_CASE("embedding a tag plus tokens and the context limit") {
  Rng rng(2);
  Backbone model(small_config(), rng);
  TagTable tags(model.vocab_size(), model.embed_dim());
  init_tag(tags, model, "t", TagKind::domain, 3);
  const auto id = tags.id_of("t");
  std::vector<InputToken> seq{InputToken::tag(id, 0), InputToken::tag(id, 1), InputToken::tag(id, 2),
                              InputToken::token(vocab::id_of('a')),
                              InputToken::token(vocab::id_of('b'))};
  CHECK(model.embed(seq, &tags).shape() == Shape{5, 16});
  CHECK_THROWS_AS(model.embed(seq), Error);  // tag ids need the table

  std::vector<InputToken> too_long(25, InputToken::token(1));
  try {
    model.embed(too_long);
    FAIL("expected a dimension error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::dimension);
  }
}

TEST_CASE("logits are causal") {
  Rng rng(3);
  Backbone model(small_config(), rng);
  auto a = model.forward(model.embed(text_ids("abcdefgh"))).logits;
  auto b = model.forward(model.embed(text_ids("abcdXfgh"))).logits;
  const std::size_t V = model.vocab_size();
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(max_abs_diff(a.data().subspan(i * V, V), b.data().subspan(i * V, V)) == 0.0);
  }
  CHECK(max_abs_diff(a.data().subspan(4 * V, V), b.data().subspan(4 * V, V)) > 0.0);
}

TEST_CASE("packed batches match separate forwards") {
  Rng rng(4);
  Backbone model(small_config(), rng);
  std::vector<std::vector<InputToken>> seqs{text_ids("pack"), text_ids("ed batch"), text_ids("x")};
  auto packed = model.embed_batch(seqs);
  CHECK(packed.offsets == std::vector<std::size_t>{0, 4, 12, 13});
  auto joint = model.forward(packed.embedded, packed.offsets).logits;
  const std::size_t V = model.vocab_size();
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    auto alone = model.forward(model.embed(seqs[s])).logits;
    CHECK(max_abs_diff(alone.data(), joint.data().subspan(packed.offsets[s] * V, alone.numel())) <
          1e-5);
  }
}

TEST_CASE("parameter hash is deterministic and survives save/load") {
  Rng r1(9), r2(9), r3(10);
  Backbone a(small_config(), r1), b(small_config(), r2), c(small_config(), r3);
  CHECK(a.param_hash() == b.param_hash());
  CHECK(a.param_hash() != c.param_hash());
  const auto dir = std::filesystem::temp_directory_path() / "tagllm_backbone_roundtrip";
  std::filesystem::remove_all(dir);
  a.save(dir);
  CHECK(std::filesystem::exists(dir / "config.json"));
  CHECK(std::filesystem::exists(dir / "weights.bin"));
  CHECK(Backbone::load(dir).param_hash() == a.param_hash());
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(Backbone::load(dir), Error);
}

TEST_CASE("freezing clears requires_grad on every parameter") {
  Rng rng(5);
  Backbone model(small_config(), rng);
  model.set_trainable(false);
  for (const auto& [name, t] : model.named_parameters()) {
    CAPTURE(name);
    CHECK_FALSE(t.requires_grad());
  }
  std::size_t total = 0;
  for (const auto& [name, t] : model.named_parameters()) total += t.numel();
  CHECK(total == model.parameter_count());
}

TEST_CASE("pretraining beats the unigram entropy") {
  Rng rng(6);
  std::vector<std::vector<std::int32_t>> corpus;
  const std::string words[] = {"cat ", "dog ", "bird ", "fish "};
  for (int d = 0; d < 400; ++d) {
    std::string text;
    for (int w = 0; w < 4; ++w) text += words[rng.below(4)];
    corpus.push_back(vocab::encode(text));
  }
  std::map<std::int32_t, double> counts;
  double total = 0;
  for (const auto& doc : corpus)
    for (std::size_t i = 1; i < doc.size(); ++i) counts[doc[i]] += 1, total += 1;
  double entropy = 0;
  for (const auto& [id, n] : counts) entropy -= n / total * std::log(n / total);

  BackboneConfig config = small_config();
  PretrainConfig train;
  train.steps = 300;
  train.batch_size = 8;
  train.lr = 1e-2;
  train.held_out_fraction = 0.1;
  auto result = pretrain(corpus, config, train);
  CHECK(result.held_out_loss < entropy);
  CHECK(result.final_train_loss <= 0.8 * result.initial_loss);
  CHECK(result.held_out_docs == 40);
}

TEST_CASE("a one-layer model memorizes a repeating corpus") {
  std::vector<std::vector<std::int32_t>> corpus(50, vocab::encode("abcabcabcabcabcabc"));
  BackboneConfig config = small_config();
  config.n_layers = 1;
  PretrainConfig train;
  train.steps = 200;
  train.batch_size = 4;
  train.lr = 1e-2;
  train.held_out_fraction = 0.0;
  auto result = pretrain(corpus, config, train);
  CHECK(mean_token_nll(result.model, corpus) < 0.1);
}

TEST_CASE("pretraining is reproducible") {
  std::vector<std::vector<std::int32_t>> corpus(20, vocab::encode("reproducible text"));
  PretrainConfig train;
  train.steps = 10;
  train.batch_size = 2;
  auto a = pretrain(corpus, small_config(), train);
  auto b = pretrain(corpus, small_config(), train);
  CHECK(a.model.param_hash() == b.model.param_hash());
  CHECK(a.final_train_loss == b.final_train_loss);
}

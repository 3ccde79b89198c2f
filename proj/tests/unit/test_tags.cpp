#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "tagllm/backbone.hpp"
#include "tagllm/binio.hpp"
#include "tagllm/error.hpp"
#include "tagllm/tags.hpp"

using namespace tagllm;
namespace fs = std::filesystem;

namespace {

Backbone make_backbone(std::size_t d, std::uint64_t seed) {
  BackboneConfig c;
  c.embed_dim = d;
  c.n_heads = 1;
  c.n_layers = 1;
  c.context_len = 8;
  Rng rng(seed);
  return Backbone(c, rng);
}

// Overwrites the base embedding table row by row.
void fill_rows(const Backbone& model, const std::function<std::vector<float>(std::size_t)>& row) {
  Tensor table = model.token_embedding();  // aliases the model's table
  auto data = table.mutable_data();
  const std::size_t d = model.embed_dim();
  for (std::size_t v = 0; v < model.vocab_size(); ++v) {
    auto r = row(v);
    std::copy(r.begin(), r.end(), data.begin() + v * d);
  }
}

double row_norm(const Tensor& t, std::size_t r) {
  double s = 0;
  for (std::size_t j = 0; j < t.cols(); ++j) s += double(t.at(r, j)) * t.at(r, j);
  return std::sqrt(s);
}

bool tag_digest_equal(const TagSpec& a, const TagSpec& b) {
  return std::equal(a.embedding.data().begin(), a.embedding.data().end(),
                    b.embedding.data().begin(), b.embedding.data().end());
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("tagllm_tags_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("equal base rows give the same row back") {
  auto model = make_backbone(4, 1);
  fill_rows(model, [](std::size_t) { return std::vector<float>{0.3f, -1.2f, 0.5f, 2.0f}; });
  TagTable tags(model.vocab_size(), model.embed_dim());
  auto init = init_tag(tags, model, "t", TagKind::domain, 3);
  CHECK(init.report.scale == doctest::Approx(1.0));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(init.spec->embedding.at(r, j) == doctest::Approx((std::vector<float>{0.3f, -1.2f, 0.5f, 2.0f})[j]));
}

TEST_CASE("two orthogonal base rows") {
  auto model = make_backbone(2, 1);
  fill_rows(model, [](std::size_t v) {
    return v % 2 ? std::vector<float>{0, 1} : std::vector<float>{1, 0};
  });
  TagTable tags(model.vocab_size(), model.embed_dim());
  auto init = init_tag(tags, model, "t", TagKind::domain, 2);
  CHECK(init.report.mean_embedding[0] == doctest::Approx(0.5));
  CHECK(init.report.mean_embedding[1] == doctest::Approx(0.5));
  CHECK(init.report.scale == doctest::Approx(std::sqrt(2.0)));
  CHECK(init.spec->embedding.at(0, 0) == doctest::Approx(std::sqrt(2.0) / 2));
  CHECK(init.spec->embedding.at(1, 1) == doctest::Approx(std::sqrt(2.0) / 2));
  CHECK(row_norm(init.spec->embedding, 0) == doctest::Approx(1.0));
}

TEST_CASE("a zero mean embedding is rejected") {
  auto model = make_backbone(2, 1);
  fill_rows(model, [](std::size_t v) {
    return v % 2 ? std::vector<float>{-1, 0} : std::vector<float>{1, 0};
  });
  TagTable tags(model.vocab_size(), model.embed_dim());
  try {
    init_tag(tags, model, "t", TagKind::domain, 2);
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::numeric);
  }
  CHECK(tags.empty());
}

TEST_CASE("initialized rows carry the mean base norm") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = make_backbone(16, seed);
    TagTable tags(model.vocab_size(), model.embed_dim());
    auto init = init_tag(tags, model, "t", TagKind::function, 5);
    // Independent recomputation of the mean norm.
    const auto& table = model.token_embedding();
    double mean_norm = 0;
    for (std::size_t v = 0; v < table.rows(); ++v) mean_norm += row_norm(table, v);
    mean_norm /= double(table.rows());
    for (std::size_t r = 0; r < 5; ++r) {
      CHECK(std::abs(row_norm(init.spec->embedding, r) - mean_norm) <= 1e-5);
      for (std::size_t j = 0; j < 16; ++j)
        CHECK(init.spec->embedding.at(r, j) == init.spec->embedding.at(0, j));
    }
    CHECK(init.report.norm_of_mean * init.report.scale == doctest::Approx(init.report.mean_norm));
  }
}

TEST_CASE("ids, lookup and parameter counts") {
  auto model = make_backbone(4, 2);
  TagTable tags(model.vocab_size(), model.embed_dim());
  init_tag(tags, model, "a", TagKind::domain, 2);
  init_tag(tags, model, "b", TagKind::function, 3);
  CHECK(tags.id_of("a") == 96);
  CHECK(tags.id_of("b") == 97);
  CHECK(tags.by_id(97).name == "b");
  CHECK_THROWS_AS(tags.by_id(5), Error);
  CHECK_THROWS_AS(init_tag(tags, model, "a", TagKind::domain, 2), Error);
  CHECK_THROWS_AS(init_tag(tags, model, "c", TagKind::domain, 0), Error);
  CHECK(tags.trainable_parameter_count() == (2 + 3) * 4);
  tags.set_status("a", TagStatus::frozen);
  CHECK(tags.trainable_names() == std::vector<std::string>{"b"});
  CHECK_FALSE(tags.get("a").embedding.requires_grad());

  TagTable big(96, 4096);
  big.add(TagSpec{"x", TagKind::domain, 10, Tensor::zeros({10, 4096}, true), TagStatus::trainable, {}});
  CHECK(big.trainable_parameter_count() == 40960);
}

TEST_CASE("save and load round trip") {
  auto model = make_backbone(4, 3);
  TagTable tags(model.vocab_size(), model.embed_dim());
  init_tag(tags, model, "dom", TagKind::domain, 2);
  init_tag(tags, model, "fn", TagKind::function, 3);
  enrich_fork(tags, "dom", "task");
  set_status(tags, "dom", TagStatus::frozen);

  const auto a = scratch("a"), b = scratch("b");
  tags.save(a);
  auto loaded = TagTable::load(a, 4);
  loaded.save(b);
  CHECK(read_text(a / "tags.json") == read_text(b / "tags.json"));
  CHECK(sha256_file(a / "tags.bin") == sha256_file(b / "tags.bin"));
  CHECK(loaded.get("dom").status == TagStatus::frozen);
  CHECK(loaded.get("fn").status == TagStatus::trainable);
  CHECK(loaded.id_of("dom@task") == tags.id_of("dom@task"));
  CHECK(loaded.get("dom@task").lineage == tags.get("dom@task").lineage);

  try {
    TagTable::load(a, 8);
    FAIL("expected a dimension error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::dimension);
  }

  TagTable empty(96, 4);
  const auto e = scratch("empty");
  empty.save(e);
  CHECK(TagTable::load(e, 4).empty());
  for (const auto& d : {a, b, e}) fs::remove_all(d);
}

TEST_CASE("enrichment forks a copy") {
  auto model = make_backbone(4, 4);
  TagTable tags(model.vocab_size(), model.embed_dim());
  init_tag(tags, model, "dom", TagKind::domain, 2);
  init_tag(tags, model, "fn", TagKind::function, 2);
  auto& child = enrich_fork(tags, "dom", "qed");
  CHECK(child.name == "dom@qed");
  CHECK(child.kind == TagKind::domain);
  CHECK(child.lineage.back() == LineageRecord{2, "qed", "dom"});
  CHECK(tag_digest_equal(tags.get("dom"), tags.get("dom@qed")));
  // The copy owns its storage.
  tags.get("dom@qed").embedding.mutable_data()[0] += 1.0f;
  CHECK_FALSE(tag_digest_equal(tags.get("dom"), tags.get("dom@qed")));
  CHECK_THROWS_AS(enrich_fork(tags, "fn", "qed"), Error);
}

TEST_CASE("clones do not share embeddings") {
  auto model = make_backbone(4, 5);
  TagTable tags(model.vocab_size(), model.embed_dim());
  init_tag(tags, model, "dom", TagKind::domain, 2);
  auto copy = tags.clone();
  copy.get("dom").embedding.mutable_data()[0] = 42.0f;
  CHECK(tags.get("dom").embedding.data()[0] != 42.0f);
}

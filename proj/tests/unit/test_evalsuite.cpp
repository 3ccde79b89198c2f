#include <doctest.h>

#include <cmath>

#include "tagllm/domains.hpp"
#include "tagllm/error.hpp"
#include "tagllm/evalsuite.hpp"
#include "tagllm/vocab.hpp"

using namespace tagllm;

namespace {

Backbone tiny_backbone() {
  BackboneConfig c;
  c.embed_dim = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.context_len = 160;
  Rng rng(4);
  Backbone b(c, rng);
  b.set_trainable(false);
  return b;
}

TagTable stage1_tags(const Backbone& b, std::size_t p) {
  TagTable t(b.vocab_size(), b.embed_dim());
  for (const auto& name : {"protein", "molecule"}) {
    init_tag(t, b, name, TagKind::domain, p);
    t.set_status(name, TagStatus::frozen);
  }
  return t;
}

TaskSetup small_setup(const std::string& task_name, std::size_t p) {
  TaskSetup s;
  s.task = builtin_task(task_name);
  s.data = build_task_datasets(s.task, {16, 4, 6}, 2);
  s.plan = make_default_plan(2, task_name);
  s.plan.steps = 4;
  s.plan.batch_size = 2;
  s.plan.grad_accum = 1;
  s.plan.optimizer.lr = 1e-2;
  s.tag_length = p;
  return s;
}

std::vector<std::vector<std::int32_t>> seqs(std::initializer_list<const char*> texts) {
  std::vector<std::vector<std::int32_t>> out;
  for (const auto* t : texts) out.push_back(vocab::encode(t));
  return out;
}

}  // namespace

TEST_CASE("regression metrics") {
  std::vector<double> y{1, 2, 4, 7};
  CHECK(metric_mse(y, y) == 0.0);
  CHECK(metric_mae(y, y) == 0.0);
  CHECK(metric_pearson(y, y).value == doctest::Approx(1.0));
  std::vector<double> neg{-1, -2, -4, -7};
  CHECK(metric_pearson(neg, y).value == doctest::Approx(-1.0));
  std::vector<double> a{1, 2, 3}, flat{2, 2, 2};
  CHECK_FALSE(metric_pearson(a, flat).defined);
  CHECK(metric_mse(a, flat) == doctest::Approx(2.0 / 3.0));
  CHECK(metric_mae(a, flat) == doctest::Approx(2.0 / 3.0));

  Predictions p;
  p.values = a;
  p.targets = flat;
  auto [v, defined] = compute_metric(Metric::pearson, p);
  CHECK_FALSE(defined);
  (void)v;
}

TEST_CASE("sequence metrics") {
  auto same = seqs({"abc", "xy"});
  CHECK(metric_token_accuracy(same, same) == 1.0);
  CHECK(metric_exact_match(same, same) == 1.0);
  CHECK(metric_token_accuracy(seqs({"abc"}), seqs({"xyz"})) == 0.0);
  CHECK(metric_exact_match(seqs({"abc"}), seqs({"xyz"})) == 0.0);
  CHECK(metric_token_accuracy(seqs({"abc"}), seqs({"abd"})) == doctest::Approx(2.0 / 3.0));
  CHECK(metric_exact_match(seqs({"abc"}), seqs({"abd"})) == 0.0);
  CHECK(metric_token_accuracy(seqs({"ab"}), seqs({"abcd"})) == doctest::Approx(0.5));
}

TEST_CASE("similarity ratio") {
  CHECK(similarity_ratio("", "") == 1.0);
  CHECK(similarity_ratio("abc", "abc") == 1.0);
  CHECK(similarity_ratio("abc", "xyz") == 0.0);
  CHECK(similarity_ratio("abcd", "abed") == doctest::Approx(2.0 * 3 / 8));
}

TEST_CASE("nearest neighbour baseline") {
  auto task = builtin_task("qed");
  Dataset d;
  d.task = "qed";
  d.train = {{{"mol", "cccc"}, {"label", 1.0}},
             {{"mol", "nnnn"}, {"label", 2.0}},
             {{"mol", "cccc"}, {"label", 3.0}}};
  d.test = {{{"mol", "nnnn"}, {"label", 2.0}}, {{"mol", "cccc"}, {"label", 1.0}}};
  auto r = baseline_nearest_neighbor(task, d);
  CHECK(r.condition == "nearest_neighbor");
  CHECK(r.trainable_parameters == 0);
  CHECK(r.value == 0.0);  // exact hits, and the tie on "cccc" goes to index 0
  d.train.clear();
  CHECK_THROWS_AS(baseline_nearest_neighbor(task, d), Error);
}

TEST_CASE("condition audits reconcile") {
  auto backbone = tiny_backbone();
  const std::size_t p = 3, d = 16;
  auto base = stage1_tags(backbone, p);
  auto setup = small_setup("qed", p);

  auto full = run_condition(backbone, base, setup, Condition::full, 0);
  CHECK(full.condition == "full");
  CHECK(full.trainable_parameters == 2 * p * d + d);
  CHECK(full.extra.at("stage_trainable_parameters") == double(p * d + d));

  auto probe = baseline_linear_probe(backbone, base, setup, 0);
  CHECK(probe.condition == "linear_probing");
  CHECK(probe.trainable_parameters == d);

  auto prompt = baseline_prompt_tuning(backbone, base, setup, 0);
  CHECK(prompt.condition == "prompt_tuning");
  CHECK(prompt.trainable_parameters == full.trainable_parameters);

  auto text = baseline_text_domain_info(backbone, base, setup, 0);
  CHECK(text.condition == "text_domain_info");
  CHECK(text.trainable_parameters == p * d + d);

  auto enriched = run_condition(backbone, base, setup, Condition::enriched, 0);
  CHECK(enriched.trainable_parameters == 2 * p * d + d);
  auto nodomain = run_condition(backbone, base, setup, Condition::no_domain, 0);
  CHECK(nodomain.condition == "no_domain_tag");
  CHECK(nodomain.trainable_parameters == p * d + d);
  auto nofn = run_condition(backbone, base, setup, Condition::no_function, 0);
  CHECK(nofn.condition == "no_function_tag");
  CHECK(nofn.trainable_parameters == p * d + d);

  // The caller's stage-1 table is untouched by every condition.
  CHECK(base.size() == 2);
  CHECK_FALSE(base.contains("fn-qed"));
}

TEST_CASE("the digit-generation condition decodes numbers") {
  auto backbone = tiny_backbone();
  auto base = stage1_tags(backbone, 2);
  auto setup = small_setup("qed", 2);
  auto r = run_condition(backbone, base, setup, Condition::no_reg_head, 0);
  CHECK(r.condition == "no_reg_head");
  CHECK(r.parse_failures <= setup.data.test.size());
  for (const auto& e : r.audit) {
    const bool generation_head = e.component.rfind("head:", 0) == 0;
    if (generation_head) CHECK(e.parameters == 0);
  }
  CHECK(std::isfinite(r.value));
}

TEST_CASE("prompt-tuning init depends on the seed") {
  auto backbone = tiny_backbone();
  auto base = stage1_tags(backbone, 2);
  auto setup = small_setup("qed", 2);
  setup.plan.optimizer.lr = 0.0;
  ConditionArtifacts a, b;
  run_condition(backbone, base, setup, Condition::prompt_tuning, 1, &a);
  run_condition(backbone, base, setup, Condition::prompt_tuning, 2, &b);
  const auto& ea = a.tags->get("soft-prompt").embedding;
  const auto& eb = b.tags->get("soft-prompt").embedding;
  CHECK(ea.numel() == 2 * 2 * 16);
  CHECK_FALSE(std::equal(ea.data().begin(), ea.data().end(), eb.data().begin()));
}

TEST_CASE("ablation grid runs every condition and the full sweep") {
  auto backbone = tiny_backbone();
  auto base = stage1_tags(backbone, 2);
  auto setup = small_setup("combination", 2);
  setup.plan.steps = 2;
  AblationGrid grid;
  grid.seeds = {0, 1};
  auto result = run_ablation(backbone, base, setup, grid);
  CHECK(result.conditions.size() == grid.conditions.size() * 2);
  REQUIRE(result.sweep.size() == 5);
  const std::size_t ps[] = {1, 5, 10, 20, 50};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(result.sweep[i].tag_length == ps[i]);
    CHECK(result.sweep[i].condition == "full_p" + std::to_string(ps[i]));
  }
  CHECK(result.medians.size() == grid.conditions.size());
  for (const auto& r : result.conditions) CHECK_FALSE(r.audit.empty());
  const auto table = render_table(result.conditions, "ablation");
  CHECK(table.find("no_function_tag") != std::string::npos);
}

TEST_CASE("zero-shot composition guards and reports its control") {
  auto backbone = tiny_backbone();
  const auto family = cipher_family();
  TagTable tags(backbone.vocab_size(), backbone.embed_dim());
  for (std::size_t i = 0; i < family.size(); ++i)
    init_tag(tags, backbone, "lang-" + CipherFamily::language_name(i), TagKind::domain, 2);
  init_tag(tags, backbone, "fn-translate", TagKind::function, 2);
  std::vector<LanguagePair> trained{{0, 1}, {1, 2}};
  std::vector<LanguagePair> unseen{{6, 7}};
  auto data = build_translation_dataset(family, unseen, {4, 1, 4}, 3);

  try {
    zero_shot_composition_eval(backbone, tags, family, "fn-translate", {1, 2}, trained, data.test, 0);
    FAIL("expected the pair-exclusion guard");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config);
  }

  auto r = zero_shot_composition_eval(backbone, tags, family, "fn-translate", {6, 7}, trained,
                                      data.test, 0);
  CHECK(r.report.extra.at("chance") == doctest::Approx(1.0 / 8));
  CHECK(r.report.extra.count("control_token_accuracy") == 1);
  CHECK(r.report.extra.count("exact_match") == 1);
  CHECK(r.generated.size() == data.test.size());
  for (const auto& g : r.generated)
    for (auto id : g) CHECK(id < static_cast<std::int32_t>(backbone.vocab_size()));
}

TEST_CASE("eval reports round trip through json") {
  EvalReport r;
  r.task = "qed";
  r.condition = "full";
  r.metric = "mse";
  r.value = 0.125;
  r.extra["mae"] = 0.25;
  r.audit = {{"tag:fn-qed", 10}};
  r.trainable_parameters = 10;
  auto back = EvalReport::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
}

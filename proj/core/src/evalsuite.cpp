#include "tagllm/evalsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>

#include "tagllm/error.hpp"

namespace tagllm {

namespace {

constexpr std::pair<Condition, std::string_view> kConditionNames[] = {
    {Condition::full, "full"},
    {Condition::enriched, "enriched"},
    {Condition::no_domain, "no_domain_tag"},
    {Condition::no_function, "no_function_tag"},
    {Condition::no_reg_head, "no_reg_head"},
    {Condition::prompt_tuning, "prompt_tuning"},
    {Condition::linear_probe, "linear_probing"},
    {Condition::text_domain_info, "text_domain_info"},
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Template drop_tag(const Template& tmpl, const std::string& name) {
  Template out = tmpl;
  std::erase_if(out.segments, [&](const Segment& s) {
    return s.kind == SegmentKind::tag && s.text == name;
  });
  return out;
}

void require_domain_tags(const LabeledTask& task, const TagTable& tags) {
  for (const auto& d : task.domains) {
    if (!tags.contains(d)) {
      throw Error(ErrorCode::missing_artifact,
                  "stage-1 domain tag '" + d + "' is missing (task '" + task.name + "')");
    }
  }
}

std::string payload_text(const LabeledTask& task, const Json& record) {
  std::string s;
  for (const auto& f : task.payload_fields) s += record.at(f).get<std::string>();
  return s;
}

void add_regression_extras(EvalReport& r, const Predictions& p, const std::string& prefix) {
  r.extra[prefix + "mse"] = metric_mse(p.values, p.targets);
  r.extra[prefix + "mae"] = metric_mae(p.values, p.targets);
  const auto pr = metric_pearson(p.values, p.targets);
  if (pr.defined) r.extra[prefix + "pearson"] = pr.value;
  r.extra[prefix + "label_variance"] = variance(p.targets);
}

}  // namespace

std::string_view to_string(Condition c) {
  for (const auto& [k, name] : kConditionNames) {
    if (k == c) return name;
  }
  return "?";
}

Condition condition_from_string(std::string_view text) {
  for (const auto& [k, name] : kConditionNames) {
    if (name == text) return k;
  }
  throw Error(ErrorCode::config, "unknown condition '" + std::string(text) + "'");
}

Json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["condition"] = condition;
  j["metric"] = metric;
  j["value"] = value;
  j["defined"] = defined;
  j["extra"] = extra;
  j["parse_failures"] = parse_failures;
  j["audit"] = nlohmann::ordered_json::array();
  for (const auto& a : audit) j["audit"].push_back({{"component", a.component}, {"parameters", a.parameters}});
  j["trainable_parameters"] = trainable_parameters;
  j["seed"] = seed;
  j["tag_length"] = tag_length;
  j["runtime_seconds"] = runtime_seconds;
  return Json::parse(j.dump());
}

EvalReport EvalReport::from_json(const Json& j) {
  EvalReport r;
  try {
    r.task = j.at("task").get<std::string>();
    r.condition = j.at("condition").get<std::string>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    r.defined = j.value("defined", true);
    r.extra = j.value("extra", std::map<std::string, double>{});
    r.parse_failures = j.value("parse_failures", std::size_t{0});
    for (const auto& a : j.value("audit", Json::array())) {
      r.audit.push_back({a.at("component").get<std::string>(), a.at("parameters").get<std::size_t>()});
    }
    r.trainable_parameters = j.value("trainable_parameters", std::size_t{0});
    r.seed = j.value("seed", std::uint64_t{0});
    r.tag_length = j.value("tag_length", std::size_t{0});
    r.runtime_seconds = j.value("runtime_seconds", 0.0);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::format, std::string("eval report: ") + e.what());
  }
  return r;
}

std::pair<double, bool> compute_metric(Metric metric, const Predictions& p) {
  switch (metric) {
    case Metric::mse: return {metric_mse(p.values, p.targets), true};
    case Metric::mae: return {metric_mae(p.values, p.targets), true};
    case Metric::pearson: {
      const auto r = metric_pearson(p.values, p.targets);
      return {r.value, r.defined};
    }
    case Metric::token_accuracy: return {metric_token_accuracy(p.generated, p.expected), true};
    case Metric::exact_match: return {metric_exact_match(p.generated, p.expected), true};
  }
  throw Error(ErrorCode::value, "unknown metric");
}

std::string function_tag_name(std::string_view task) { return "fn-" + std::string(task); }

Template task_template(const LabeledTask& task, const std::string& function_tag,
                       const std::map<std::string, std::string>& domain_tags) {
  auto tag_of = [&](const std::string& domain) {
    auto it = domain_tags.find(domain);
    return it == domain_tags.end() ? domain : it->second;
  };
  std::map<std::string, std::string> b{{"function", function_tag}};
  const auto& tmpl = builtin_template(task.template_name);
  if (task.template_name == "scalar_property") {
    b["domain"] = tag_of(task.domains.at(0));
    b["x"] = task.payload_fields.at(0);
  } else if (task.template_name == "pair_combination") {
    b["domain"] = tag_of(task.domains.at(0));
    b["a"] = task.payload_fields.at(0);
    b["b"] = task.payload_fields.at(1);
  } else if (task.template_name == "cross_affinity") {
    b["domain_a"] = tag_of(task.domains.at(0));
    b["domain_b"] = tag_of(task.domains.at(1));
    b["a"] = task.payload_fields.at(0);
    b["b"] = task.payload_fields.at(1);
  }
  return instantiate(tmpl, b);
}

std::vector<AuditEntry> condition_audit(const Template& tmpl, const TagTable& tags,
                                        const TaskHead* head) {
  std::vector<AuditEntry> out;
  std::set<std::string> seen;
  for (const auto& s : tmpl.segments) {
    if (s.kind != SegmentKind::tag || !seen.insert(s.text).second) continue;
    const auto& spec = tags.get(s.text);
    out.push_back({"tag:" + spec.name, spec.length * tags.embed_dim()});
  }
  if (head != nullptr) out.push_back({"head:" + head->name, head->parameter_count()});
  return out;
}

// ---------------------------------------------------------------- conditions

EvalReport run_condition(Backbone& backbone, const TagTable& base_tags,
                         const TaskSetup& setup, Condition condition, std::uint64_t seed,
                         ConditionArtifacts* artifacts) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& task = setup.task;
  if (task.shape == TaskShape::translation) {
    throw Error(ErrorCode::config, "translation is evaluated by zero_shot_composition_eval");
  }
  require_domain_tags(task, base_tags);
  if (setup.data.train.empty() || setup.data.test.empty()) {
    throw Error(ErrorCode::value, "task '" + task.name + "' needs train and test records");
  }

  TagTable tags = base_tags.clone();
  const auto fn = function_tag_name(task.name);
  init_tag(tags, backbone, fn, TagKind::function, setup.tag_length);

  StagePlan plan = setup.plan;
  plan.stage = 2;
  plan.seed = seed;
  plan.tag_length = setup.tag_length;
  plan.trainable_tags = {fn};
  plan.trainable_heads = {task.name};
  plan.datasets = {task.name};
  plan.variant = "tag";

  std::vector<TaskHead> heads;
  if (condition == Condition::no_reg_head) {
    heads.push_back(TaskHead::generation(task.name));
    plan.numeric_as_digits = true;
  } else {
    heads.push_back(TaskHead::regression(task.name, backbone.embed_dim(), task.d_t));
    plan.numeric_as_digits = false;
  }

  Template tmpl = task_template(task, fn);
  switch (condition) {
    case Condition::full:
    case Condition::no_reg_head:
      break;
    case Condition::enriched: {
      std::map<std::string, std::string> forks;
      for (const auto& d : task.domains) {
        forks[d] = enrich_fork(tags, d, task.name).name;
        plan.trainable_tags.push_back(forks[d]);
      }
      tmpl = task_template(task, fn, forks);
      if (!(plan.lambda_m > 0)) plan.lambda_m = 1.0;
      break;
    }
    case Condition::no_domain:
      tmpl = without_tags(tmpl, tags, TagKind::domain);
      break;
    case Condition::no_function:
      tmpl = drop_tag(tmpl, fn);
      plan.trainable_tags.clear();
      plan.variant = "baseline";
      break;
    case Condition::prompt_tuning: {
      // One soft prompt as long as every tag of the tagged run together.
      std::size_t total = setup.tag_length;
      std::set<std::string> seen;
      for (const auto& s : tmpl.segments) {
        if (s.kind == SegmentKind::tag && s.text != fn && seen.insert(s.text).second) {
          total += tags.get(s.text).length;
        }
      }
      tmpl = drop_tag(without_tags(tmpl, tags, TagKind::domain), fn);
      Rng rng = Rng(seed).fork("prompt-init");
      const auto report = mean_embedding_report(backbone);
      const double stddev = report.mean_norm / std::sqrt(static_cast<double>(backbone.embed_dim()));
      const std::string prompt = "soft-prompt";
      init_random_tag(tags, prompt, TagKind::function, total, stddev, rng);
      tmpl = with_prefix_tag(tmpl, prompt);
      plan.trainable_tags = {prompt};
      plan.variant = "baseline";
      break;
    }
    case Condition::linear_probe:
      tmpl = drop_tag(without_tags(tmpl, tags, TagKind::domain), fn);
      plan.trainable_tags.clear();
      plan.variant = "baseline";
      break;
    case Condition::text_domain_info:
      tmpl = with_text_domain_info(tmpl, tags);
      break;
  }
  tmpl.name = task.name + ":" + std::string(to_string(condition));

  TaskData data{task.name, tmpl, setup.data.train, task.name};
  const auto train = train_stage2(backbone, tags, heads, data, plan);
  if (!train.backbone_unchanged()) {
    throw Error(ErrorCode::state, "backbone changed during condition '" +
                                      std::string(to_string(condition)) + "'");
  }

  RenderOptions options;
  options.numeric_as_digits = plan.numeric_as_digits;
  options.precision = plan.precision;
  options.max_len = backbone.config().context_len;
  const auto preds = predict(backbone, tags, heads[0], tmpl, setup.data.test, options);

  EvalReport r;
  r.task = task.name;
  r.condition = std::string(to_string(condition));
  r.metric = std::string(to_string(task.metric));
  std::tie(r.value, r.defined) = compute_metric(task.metric, preds);
  add_regression_extras(r, preds, "");
  r.parse_failures = preds.parse_failures;
  r.audit = condition_audit(tmpl, tags, &heads[0]);
  r.trainable_parameters = audit_total(r.audit);
  r.extra["stage_trainable_parameters"] = static_cast<double>(train.trainable_parameters);
  r.extra["steps"] = static_cast<double>(train.steps);
  r.seed = seed;
  r.tag_length = setup.tag_length;
  if (!setup.shifted_test.empty()) {
    const auto shifted = predict(backbone, tags, heads[0], tmpl, setup.shifted_test, options);
    r.extra["shifted_value"] = compute_metric(task.metric, shifted).first;
    add_regression_extras(r, shifted, "shifted_");
  }
  r.runtime_seconds = seconds_since(t0);
  if (artifacts != nullptr) {
    artifacts->tmpl = tmpl;
    artifacts->options = options;
    artifacts->heads = std::move(heads);
    artifacts->tags.emplace(std::move(tags));
    artifacts->train = train;
  }
  return r;
}

EvalReport evaluate_trained(const Backbone& backbone, const TagTable& tags, const TaskHead& head,
                            const LabeledTask& task, const Template& tmpl,
                            const RenderOptions& options, std::span<const Json> records) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto preds = predict(backbone, tags, head, tmpl, records, options);
  EvalReport r;
  r.task = task.name;
  r.condition = "trained";
  r.metric = std::string(to_string(task.metric));
  std::tie(r.value, r.defined) = compute_metric(task.metric, preds);
  if (!preds.values.empty()) add_regression_extras(r, preds, "");
  r.parse_failures = preds.parse_failures;
  r.audit = condition_audit(tmpl, tags, &head);
  r.trainable_parameters = audit_total(r.audit);
  r.runtime_seconds = seconds_since(t0);
  return r;
}

EvalReport baseline_prompt_tuning(Backbone& backbone, const TagTable& base_tags,
                                  const TaskSetup& setup, std::uint64_t seed) {
  return run_condition(backbone, base_tags, setup, Condition::prompt_tuning, seed);
}

EvalReport baseline_linear_probe(Backbone& backbone, const TagTable& base_tags,
                                 const TaskSetup& setup, std::uint64_t seed) {
  return run_condition(backbone, base_tags, setup, Condition::linear_probe, seed);
}

EvalReport baseline_text_domain_info(Backbone& backbone, const TagTable& base_tags,
                                     const TaskSetup& setup, std::uint64_t seed) {
  return run_condition(backbone, base_tags, setup, Condition::text_domain_info, seed);
}

double similarity_ratio(std::string_view a, std::string_view b) {
  if (a.empty() && b.empty()) return 1.0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return 2.0 * static_cast<double>(prev[b.size()]) / static_cast<double>(a.size() + b.size());
}

EvalReport baseline_nearest_neighbor(const LabeledTask& task, const Dataset& data) {
  const auto t0 = std::chrono::steady_clock::now();
  if (data.train.empty()) throw Error(ErrorCode::value, "nearest neighbor needs training records");
  if (task.shape == TaskShape::translation) {
    throw Error(ErrorCode::config, "nearest neighbor applies to regression tasks");
  }
  std::vector<std::string> keys;
  std::vector<double> labels;
  for (const auto& r : data.train) {
    keys.push_back(payload_text(task, r));
    labels.push_back(r.at("label").get<double>());
  }
  Predictions p;
  for (const auto& r : data.test) {
    const auto q = payload_text(task, r);
    std::size_t best = 0;
    double best_sim = -1;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      const double s = similarity_ratio(q, keys[i]);
      if (s > best_sim) {
        best_sim = s;
        best = i;
      }
    }
    p.values.push_back(labels[best]);
    p.targets.push_back(r.at("label").get<double>());
  }
  EvalReport rep;
  rep.task = task.name;
  rep.condition = "nearest_neighbor";
  rep.metric = std::string(to_string(task.metric));
  std::tie(rep.value, rep.defined) = compute_metric(task.metric, p);
  add_regression_extras(rep, p, "");
  rep.runtime_seconds = seconds_since(t0);
  return rep;
}

AblationResult run_ablation(Backbone& backbone, const TagTable& base_tags,
                            const TaskSetup& setup, const AblationGrid& grid) {
  require_domain_tags(setup.task, base_tags);
  AblationResult out;
  for (auto c : grid.conditions) {
    std::vector<double> values;
    for (auto seed : grid.seeds) {
      out.conditions.push_back(run_condition(backbone, base_tags, setup, c, seed));
      values.push_back(out.conditions.back().value);
    }
    out.medians[std::string(to_string(c))] = median(values);
  }
  for (auto p : grid.tag_lengths) {
    TaskSetup s = setup;
    s.tag_length = p;
    auto r = run_condition(backbone, base_tags, s, Condition::full, grid.sweep_seed);
    r.condition = "full_p" + std::to_string(p);
    out.sweep.push_back(std::move(r));
  }
  return out;
}

CompositionResult zero_shot_composition_eval(const Backbone& backbone, const TagTable& tags,
                                             const CipherFamily& family,
                                             const std::string& function_tag,
                                             LanguagePair unseen,
                                             std::span<const LanguagePair> trained_pairs,
                                             std::span<const Json> test_records,
                                             std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  if (std::find(trained_pairs.begin(), trained_pairs.end(), unseen) != trained_pairs.end()) {
    throw Error(ErrorCode::config, "pair " + CipherFamily::language_name(unseen.first) + "->" +
                                       CipherFamily::language_name(unseen.second) +
                                       " appears in the stage-3 training manifest");
  }
  if (test_records.empty()) throw Error(ErrorCode::value, "composition eval needs test records");
  const auto src = "lang-" + CipherFamily::language_name(unseen.first);
  const auto tgt = "lang-" + CipherFamily::language_name(unseen.second);
  for (const auto& name : {src, tgt, function_tag}) {
    if (!tags.contains(name)) throw Error(ErrorCode::missing_artifact, "tag '" + name + "' is missing");
  }
  for (const auto& r : test_records) {
    if (r.at("src_lang").get<std::string>() != CipherFamily::language_name(unseen.first) ||
        r.at("tgt_lang").get<std::string>() != CipherFamily::language_name(unseen.second)) {
      throw Error(ErrorCode::value, "composition test record is not from the held-out pair");
    }
    const auto want = family.translate(r.at("src_text").get<std::string>(), unseen.first, unseen.second);
    if (want != r.at("tgt_text").get<std::string>()) {
      throw Error(ErrorCode::value, "composition test record disagrees with the cipher oracle");
    }
  }

  const auto tmpl = instantiate(builtin_template("translate"), {{"function", function_tag}});
  const auto head = TaskHead::generation("translate");
  RenderOptions options;
  options.max_len = backbone.config().context_len;
  const auto preds = predict(backbone, tags, head, tmpl, test_records, options);

  // Control: both language tags replaced by untrained ones.
  TagTable control = tags.clone();
  init_tag(control, backbone, "fresh-src", TagKind::domain, tags.get(src).length);
  init_tag(control, backbone, "fresh-tgt", TagKind::domain, tags.get(tgt).length);
  Template ctl_tmpl = tmpl;
  for (auto& s : ctl_tmpl.segments) {
    if (s.kind != SegmentKind::tag) continue;
    if (s.text == "lang-{src_lang}") s.text = "fresh-src";
    if (s.text == "lang-{tgt_lang}") s.text = "fresh-tgt";
  }
  const auto ctl = predict(backbone, control, head, ctl_tmpl, test_records, options);

  CompositionResult out;
  auto& r = out.report;
  r.task = "translate";
  r.condition = "zero_shot_" + CipherFamily::language_name(unseen.first) +
                CipherFamily::language_name(unseen.second);
  r.metric = "token_accuracy";
  r.value = metric_token_accuracy(preds.generated, preds.expected);
  r.extra["exact_match"] = metric_exact_match(preds.generated, preds.expected);
  r.extra["control_token_accuracy"] = metric_token_accuracy(ctl.generated, ctl.expected);
  r.extra["control_exact_match"] = metric_exact_match(ctl.generated, ctl.expected);
  r.extra["chance"] = 1.0 / static_cast<double>(family.base.alphabet.size());
  r.extra["margin_over_chance"] = r.value - r.extra["chance"];
  r.extra["margin_over_control"] = r.value - r.extra["control_token_accuracy"];
  r.audit = condition_audit(instantiate(tmpl, {{"src_lang", CipherFamily::language_name(unseen.first)},
                                                {"tgt_lang", CipherFamily::language_name(unseen.second)}}),
                            tags, nullptr);
  r.trainable_parameters = audit_total(r.audit);
  r.seed = seed;
  r.tag_length = tags.get(function_tag).length;
  r.runtime_seconds = seconds_since(t0);
  out.generated = preds.generated;
  return out;
}

std::string render_table(std::span<const EvalReport> reports, const std::string& title) {
  std::string out = title + "\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-14s %-22s %-15s %12s %10s %5s %4s\n", "task", "condition",
                "metric", "value", "params", "seed", "p");
  out += line;
  for (const auto& r : reports) {
    const std::string value = r.defined ? std::to_string(r.value) : "undefined";
    std::snprintf(line, sizeof line, "%-14s %-22s %-15s %12s %10zu %5llu %4zu\n", r.task.c_str(),
                  r.condition.c_str(), r.metric.c_str(), value.c_str(), r.trainable_parameters,
                  static_cast<unsigned long long>(r.seed), r.tag_length);
    out += line;
  }
  return out;
}

}  // namespace tagllm

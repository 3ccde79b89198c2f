#include "tagllm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <set>
#include <sstream>

#include "tagllm/binio.hpp"
#include "tagllm/error.hpp"
#include "tagllm/heads.hpp"
#include "tagllm/tags.hpp"
#include "tagllm/templates.hpp"
#include "tagllm/vocab.hpp"

namespace fs = std::filesystem;

namespace tagllm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::string> pair_json(LanguagePair p) {
  return {CipherFamily::language_name(p.first), CipherFamily::language_name(p.second)};
}

LanguagePair pair_from_json(const Json& j, const CipherFamily& family) {
  if (!j.is_array() || j.size() != 2) {
    throw Error(ErrorCode::config, "a language pair is a two-element array like [\"A\",\"B\"]");
  }
  return {family.language_index(j[0].get<std::string>()),
          family.language_index(j[1].get<std::string>())};
}

std::string pair_label(LanguagePair p) {
  return CipherFamily::language_name(p.first) + "-" + CipherFamily::language_name(p.second);
}

std::vector<Json> text_records(std::span<const std::string> texts) {
  std::vector<Json> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back({{"text", t}});
  return out;
}

std::vector<std::string> texts_of(std::span<const Json> records) {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.at("text").get<std::string>());
  return out;
}

// Files under dir (recursively), excluding the manifest itself.
Json artifact_hashes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& f : files) out[fs::relative(f, dir).generic_string()] = sha256_file(f);
  return Json::parse(out.dump());
}

void write_manifest(const fs::path& dir, std::string_view command, const PipelineConfig& config,
                    Clock::time_point t0, const Json& extra = Json::object()) {
  nlohmann::ordered_json m;
  m["command"] = command;
  m["config_hash"] = config.hash();
  m["seed"] = config.seed;
  m["artifacts"] = artifact_hashes(dir);
  for (const auto& [k, v] : extra.items()) m[k] = v;
  m["wall_time_seconds"] = seconds_since(t0);
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

std::int64_t stage_steps(const PipelineConfig& c, const StagePlan& plan, std::string_view task) {
  if (plan.steps > 0) return plan.steps;
  const auto epochs = make_default_plan(plan.stage, task).epochs;
  return static_cast<std::int64_t>(std::llround(epochs * static_cast<double>(c.steps_per_epoch)));
}

TaskSetup load_setup(const PipelineConfig& c, const Workspace& ws, const std::string& name) {
  TaskSetup s;
  s.task = builtin_task(name);
  const auto dir = ws.data() / "tasks" / name;
  ws.require(dir / "train.jsonl", "gen-data");
  s.data.task = name;
  s.data.train = read_jsonl(dir / "train.jsonl");
  s.data.val = read_jsonl(dir / "val.jsonl");
  s.data.test = read_jsonl(dir / "test.jsonl");
  if (fs::exists(dir / "test_shifted.jsonl")) s.shifted_test = read_jsonl(dir / "test_shifted.jsonl");
  s.plan = c.stage2;
  s.plan.stage = 2;
  s.plan.steps = stage_steps(c, c.stage2, name);
  s.tag_length = c.tag_length;
  return s;
}

Backbone load_backbone(const Workspace& ws) {
  ws.require(ws.backbone() / "weights.bin", "pretrain");
  return Backbone::load(ws.backbone());
}

TagTable load_stage1_tags(const Workspace& ws, std::size_t d) {
  ws.require(ws.tags() / "tags.json", "train-domain-tag");
  return TagTable::load(ws.tags(), d);
}

void write_reports(const fs::path& path, std::span<const EvalReport> reports) {
  std::vector<Json> rows;
  for (const auto& r : reports) rows.push_back(r.to_json());
  write_jsonl(path, rows);
}

}  // namespace

// ---------------------------------------------------------------- config

PipelineConfig::PipelineConfig() {
  // Translation only becomes reliable after a late phase transition in
  // pretraining, hence the long schedule and the translation-heavy mix.
  // Tally documents teach the backbone to aggregate over a whole payload,
  // which the regression heads and the target-language tags both lean on.
  pretrain.steps = 10000;
  pretrain.lr = 3e-3;
  corpus.prose_weight = 0.2;
  corpus.monolingual_weight = 0.15;
  corpus.translation_weight = 0.4;
  corpus.tally_weight = 0.25;
  stage1 = make_default_plan(1, "domain");
  stage1.steps = 300;
  stage1.optimizer.lr = 1e-2;
  stage2 = make_default_plan(2, "descriptor");
  stage2.steps = 1500;
  stage2.optimizer.lr = 1e-2;
  stage3 = make_default_plan(3, "translate");
  stage3.steps = 1500;
  stage3.optimizer.lr = 1e-2;
  train_pairs = {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}};
}

Json PipelineConfig::to_json() const {
  nlohmann::ordered_json j;
  auto sizes = [](const DatasetSizes& s) {
    return nlohmann::ordered_json{{"train", s.train}, {"val", s.val}, {"test", s.test}};
  };
  auto plan = [](const StagePlan& p) {
    // Fields the pipeline fills per job are not part of the configuration.
    auto o = p.to_json();
    for (const char* k : {"stage", "variant", "trainable_tags", "trainable_heads", "frozen_tags",
                          "datasets", "seed", "tag_length"}) {
      o.erase(k);
    }
    return o;
  };
  j["seed"] = seed;
  j["backbone"] = backbone.to_json();
  auto pre = pretrain.to_json();
  pre.erase("seed");
  j["pretrain"] = pre;
  auto corp = corpus.to_json();
  corp.erase("seed");
  j["corpus"] = corp;
  j["domain_train_docs"] = domain_train_docs;
  j["domain_held_out_docs"] = domain_held_out_docs;
  j["language_train_docs"] = language_train_docs;
  j["language_held_out_docs"] = language_held_out_docs;
  j["tag_length"] = tag_length;
  j["steps_per_epoch"] = steps_per_epoch;
  j["stage1"] = plan(stage1);
  j["stage2"] = plan(stage2);
  j["stage3"] = plan(stage3);
  j["tasks"] = tasks;
  j["task_sizes"] = sizes(task_sizes);
  j["baselines"] = baselines;
  j["train_pairs"] = nlohmann::ordered_json::array();
  for (auto p : train_pairs) j["train_pairs"].push_back(pair_json(p));
  j["held_out_pair"] = pair_json(held_out_pair);
  j["translate_sizes"] = sizes(translate_sizes);
  nlohmann::ordered_json ab;
  ab["task"] = ablation_task;
  ab["conditions"] = nlohmann::ordered_json::array();
  for (auto c : grid.conditions) ab["conditions"].push_back(to_string(c));
  ab["seeds"] = grid.seeds;
  ab["tag_lengths"] = grid.tag_lengths;
  j["ablation"] = ab;
  return Json::parse(j.dump());
}

PipelineConfig PipelineConfig::from_json(const Json& input) {
  if (!input.is_object()) throw Error(ErrorCode::config, "configuration must be a JSON object");
  const PipelineConfig defaults;
  Json j = defaults.to_json();
  for (const auto& [k, v] : input.items()) {
    if (!j.contains(k)) throw Error(ErrorCode::config, "unknown configuration key '" + k + "'");
  }
  j.merge_patch(input);
  PipelineConfig c;
  const auto family = cipher_family();
  try {
    auto sizes = [](const Json& s) {
      return DatasetSizes{s.at("train").get<std::size_t>(), s.at("val").get<std::size_t>(),
                          s.at("test").get<std::size_t>()};
    };
    c.seed = j.at("seed").get<std::uint64_t>();
    c.backbone = BackboneConfig::from_json(j.at("backbone"));
    c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    c.corpus = GeneralCorpusConfig::from_json(j.at("corpus"));
    c.domain_train_docs = j.at("domain_train_docs").get<std::size_t>();
    c.domain_held_out_docs = j.at("domain_held_out_docs").get<std::size_t>();
    c.language_train_docs = j.at("language_train_docs").get<std::size_t>();
    c.language_held_out_docs = j.at("language_held_out_docs").get<std::size_t>();
    c.tag_length = j.at("tag_length").get<std::size_t>();
    c.steps_per_epoch = j.at("steps_per_epoch").get<std::int64_t>();
    c.stage1 = StagePlan::from_json(j.at("stage1"));
    c.stage2 = StagePlan::from_json(j.at("stage2"));
    c.stage3 = StagePlan::from_json(j.at("stage3"));
    c.stage1.stage = 1;
    c.stage2.stage = 2;
    c.stage3.stage = 3;
    c.tasks = j.at("tasks").get<std::vector<std::string>>();
    for (const auto& t : c.tasks) {
      if (builtin_task(t).shape == TaskShape::translation) {
        throw Error(ErrorCode::config, "'translate' is configured through train_pairs, not tasks");
      }
    }
    c.task_sizes = sizes(j.at("task_sizes"));
    c.baselines = j.at("baselines").get<std::vector<std::string>>();
    for (const auto& b : c.baselines) {
      if (b != "nearest_neighbor") condition_from_string(b);
    }
    c.train_pairs.clear();
    for (const auto& p : j.at("train_pairs")) c.train_pairs.push_back(pair_from_json(p, family));
    c.held_out_pair = pair_from_json(j.at("held_out_pair"), family);
    c.translate_sizes = sizes(j.at("translate_sizes"));
    const auto& ab = j.at("ablation");
    c.ablation_task = ab.at("task").get<std::string>();
    c.grid.conditions.clear();
    for (const auto& name : ab.at("conditions")) {
      c.grid.conditions.push_back(condition_from_string(name.get<std::string>()));
    }
    c.grid.seeds = ab.at("seeds").get<std::vector<std::uint64_t>>();
    c.grid.tag_lengths = ab.at("tag_lengths").get<std::vector<std::size_t>>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::config, std::string("configuration: ") + e.what());
  }
  c.backbone.validate();
  if (c.tag_length == 0) throw Error(ErrorCode::config, "tag_length must be positive");
  if (c.steps_per_epoch <= 0) throw Error(ErrorCode::config, "steps_per_epoch must be positive");
  if (c.train_pairs.empty()) throw Error(ErrorCode::config, "train_pairs must not be empty");
  if (std::find(c.train_pairs.begin(), c.train_pairs.end(), c.held_out_pair) != c.train_pairs.end()) {
    throw Error(ErrorCode::config, "held_out_pair also appears in train_pairs");
  }
  return c;
}

std::string PipelineConfig::hash() const {
  const auto text = to_json().dump();
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                  text.size()));
}

std::uint64_t PipelineConfig::derived_seed(std::string_view label) const {
  return splitmix64(seed ^ fnv1a64(label));
}

std::vector<std::string> PipelineConfig::stage1_domains() const {
  std::vector<std::string> out{"protein", "molecule"};
  for (std::size_t i = 0; i < kCipherLanguages; ++i) {
    out.push_back("lang-" + CipherFamily::language_name(i));
  }
  return out;
}

void apply_override(Json& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw Error(ErrorCode::config, "override must look like key.path=value: '" +
                                       std::string(assignment) + "'");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* node = &config;
  std::stringstream ss(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(ss, key, '.')) {
    if (key.empty()) throw Error(ErrorCode::config, "empty key in override '" + path + "'");
    keys.push_back(key);
  }
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->is_object()) throw Error(ErrorCode::config, "override path '" + path + "' crosses a non-object");
    node = &(*node)[keys[i]];
    if (node->is_null()) *node = Json::object();
  }
  if (!node->is_object()) throw Error(ErrorCode::config, "override path '" + path + "' crosses a non-object");
  (*node)[keys.back()] = std::move(value);
}

void Workspace::require(const fs::path& file, std::string_view producer) const {
  if (!fs::exists(file)) {
    throw Error(ErrorCode::missing_artifact, "missing " + file.string() + " (run '" +
                                                 std::string(producer) + "' first)");
  }
}

// ---------------------------------------------------------------- steps

Json cmd_gen_data(const PipelineConfig& c, const Workspace& ws) {
  const auto t0 = Clock::now();
  const auto dir = ws.data();
  fs::create_directories(dir / "domains");
  const auto family = cipher_family();

  auto corpus_cfg = c.corpus;
  corpus_cfg.seed = c.derived_seed("corpus");
  const auto general = gen_general_corpus(corpus_cfg, family);
  write_jsonl(dir / "general.jsonl", text_records(general));

  auto write_domain = [&](const std::string& name, const DomainSpec& spec, std::size_t n_train,
                          std::size_t n_held) {
    const auto docs = gen_corpus(spec, n_train + n_held, c.derived_seed("domain:" + name));
    const std::vector<std::string> train(docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(n_train));
    const std::vector<std::string> held(docs.begin() + static_cast<std::ptrdiff_t>(n_train), docs.end());
    write_jsonl(dir / "domains" / (name + ".jsonl"), text_records(train));
    write_jsonl(dir / "domains" / (name + ".heldout.jsonl"), text_records(held));
    write_json(dir / "domains" / (name + ".spec.json"), spec.to_json());
  };
  write_domain("protein", protein_domain(), c.domain_train_docs, c.domain_held_out_docs);
  write_domain("molecule", molecule_domain(), c.domain_train_docs, c.domain_held_out_docs);
  for (std::size_t i = 0; i < family.size(); ++i) {
    write_domain("lang-" + CipherFamily::language_name(i), family.language_domain(i),
                 c.language_train_docs, c.language_held_out_docs);
  }

  Json summary = {{"general_documents", general.size()}};
  for (const auto& name : c.tasks) {
    const auto task = builtin_task(name);
    const auto seed = c.derived_seed("task:" + name);
    const auto data = build_task_datasets(task, c.task_sizes, seed);
    const auto tdir = dir / "tasks" / name;
    fs::create_directories(tdir);
    write_jsonl(tdir / "train.jsonl", data.train);
    write_jsonl(tdir / "val.jsonl", data.val);
    write_jsonl(tdir / "test.jsonl", data.test);
    if (name == "affinity") {
      // Same seed: train and val coincide, only the test draw is shifted.
      const auto shifted = build_task_datasets(task, c.task_sizes, seed, true);
      write_jsonl(tdir / "test_shifted.jsonl", shifted.test);
    }
    write_json(tdir / "task.json", task.to_json());
    std::vector<double> labels;
    for (const auto& r : data.test) labels.push_back(r.at("label").get<double>());
    summary["label_variance"][name] = variance(labels);
  }

  const auto tdir = dir / "translate";
  fs::create_directories(tdir);
  const auto translate = build_translation_dataset(family, c.train_pairs, c.translate_sizes,
                                                   c.derived_seed("translate"));
  write_jsonl(tdir / "train.jsonl", translate.train);
  write_jsonl(tdir / "val.jsonl", translate.val);
  write_jsonl(tdir / "test.jsonl", translate.test);
  const LanguagePair held[] = {c.held_out_pair};
  const auto zero_shot = build_translation_dataset(
      family, held, {1, 1, c.translate_sizes.test}, c.derived_seed("translate:held_out"));
  write_jsonl(tdir / "zero_shot.jsonl", zero_shot.test);

  write_manifest(dir, "gen-data", c, t0);
  return summary;
}

Json cmd_pretrain(const PipelineConfig& c, const Workspace& ws) {
  const auto t0 = Clock::now();
  ws.require(ws.data() / "general.jsonl", "gen-data");
  const auto texts = texts_of(read_jsonl(ws.data() / "general.jsonl"));
  std::vector<std::vector<std::int32_t>> docs;
  docs.reserve(texts.size());
  for (const auto& t : texts) docs.push_back(encode_document(t));

  auto train = c.pretrain;
  train.seed = c.derived_seed("pretrain");
  const auto result = pretrain(docs, c.backbone, train);
  const auto dir = ws.backbone();
  result.model.save(dir);

  nlohmann::ordered_json report;
  report["initial_loss"] = result.initial_loss;
  report["final_train_loss"] = result.final_train_loss;
  report["held_out_loss"] = result.held_out_loss;
  report["train_docs"] = result.train_docs;
  report["held_out_docs"] = result.held_out_docs;
  report["steps"] = train.steps;
  report["parameter_count"] = result.model.parameter_count();
  report["param_hash"] = result.model.param_hash();
  write_json(dir / "report.json", Json::parse(report.dump()));
  std::vector<Json> curve;
  for (const auto& [step, loss] : result.curve) curve.push_back({{"step", step}, {"loss", loss}});
  write_jsonl(dir / "metrics.jsonl", curve);
  write_manifest(dir, "pretrain", c, t0);
  return Json::parse(report.dump());
}

Json cmd_train_domain_tag(const PipelineConfig& c, const Workspace& ws) {
  const auto t0 = Clock::now();
  auto backbone = load_backbone(ws);
  const auto V = backbone.vocab_size(), d = backbone.embed_dim();
  TagTable tags(V, d);
  Json summary = Json::object();
  for (const auto& name : c.stage1_domains()) {
    const auto corpus_path = ws.data() / "domains" / (name + ".jsonl");
    const auto held_path = ws.data() / "domains" / (name + ".heldout.jsonl");
    ws.require(corpus_path, "gen-data");
    ws.require(held_path, "gen-data");
    const auto corpus = texts_of(read_jsonl(corpus_path));
    const auto held = texts_of(read_jsonl(held_path));

    init_tag(tags, backbone, name, TagKind::domain, c.tag_length);
    StagePlan plan = c.stage1;
    plan.stage = 1;
    plan.trainable_tags = {name};
    plan.trainable_heads.clear();
    plan.datasets = {name};
    plan.tag_length = c.tag_length;
    plan.seed = c.derived_seed("stage1:" + name);
    auto report = train_stage1(backbone, tags, name, corpus, plan);
    tags.set_status(name, TagStatus::frozen);

    TagTable fresh(V, d);
    init_tag(fresh, backbone, name, TagKind::domain, c.tag_length);
    const double nll_trained = domain_nll(backbone, tags, name, held);
    const double nll_fresh = domain_nll(backbone, fresh, name, held);
    report.final_metric = {{"heldout_nll_trained", nll_trained},
                           {"heldout_nll_fresh", nll_fresh},
                           {"heldout_ppl_trained", std::exp(nll_trained)},
                           {"heldout_ppl_fresh", std::exp(nll_fresh)},
                           {"ppl_reduction", 1.0 - std::exp(nll_trained - nll_fresh)}};
    report.write(ws.tags() / "stage1" / name);
    summary[name] = report.final_metric;
    summary[name]["backbone_unchanged"] = report.backbone_unchanged();
    summary[name]["frozen_tags_unchanged"] = report.frozen_tags_unchanged();
  }
  tags.save(ws.tags());
  write_manifest(ws.tags(), "train-domain-tag", c, t0);
  return summary;
}

Json cmd_train_function_tag(const PipelineConfig& c, const Workspace& ws) {
  const auto t0 = Clock::now();
  auto backbone = load_backbone(ws);
  const auto base = load_stage1_tags(ws, backbone.embed_dim());
  Json summary = Json::object();

  for (const auto& name : c.tasks) {
    const auto tt = Clock::now();
    const auto setup = load_setup(c, ws, name);
    ConditionArtifacts art;
    auto rep = run_condition(backbone, base, setup, Condition::full, c.seed, &art);
    rep.condition = "tag_llm";
    art.train.final_metric = rep.to_json();
    const auto dir = ws.task(name);
    art.tags->save(dir);
    save_heads(dir, art.heads);
    write_json(dir / "template.json", {{"template", art.tmpl.to_json()},
                                       {"numeric_as_digits", art.options.numeric_as_digits},
                                       {"precision", art.options.precision}});
    art.train.write(dir);
    write_manifest(dir, "train-function-tag", c, tt);
    summary[name] = {{"metric", rep.metric},
                     {"value", rep.value},
                     {"backbone_unchanged", art.train.backbone_unchanged()},
                     {"frozen_tags_unchanged", art.train.frozen_tags_unchanged()},
                     {"trainable_parameters", rep.trainable_parameters}};
  }

  // Stage 3: one function tag over every training pair, language tags frozen.
  const auto tt = Clock::now();
  const auto ddir = ws.data() / "translate";
  ws.require(ddir / "train.jsonl", "gen-data");
  const auto records = read_jsonl(ddir / "train.jsonl");
  TagTable tags = base.clone();
  const auto fn = function_tag_name("translate");
  init_tag(tags, backbone, fn, TagKind::function, c.tag_length);
  const auto tmpl = instantiate(builtin_template("translate"), {{"function", fn}});
  std::vector<TaskData> datasets;
  for (auto p : c.train_pairs) {
    TaskData td{"translate:" + pair_label(p), tmpl, {}, "translate"};
    for (const auto& r : records) {
      if (r.at("src_lang") == CipherFamily::language_name(p.first) &&
          r.at("tgt_lang") == CipherFamily::language_name(p.second)) {
        td.train.push_back(r);
      }
    }
    datasets.push_back(std::move(td));
  }
  std::vector<TaskHead> heads{TaskHead::generation("translate")};
  StagePlan plan = c.stage3;
  plan.stage = 3;
  plan.variant = "tag";
  plan.trainable_tags = {fn};
  plan.trainable_heads = {"translate"};
  plan.lambda_m = 0;
  plan.tag_length = c.tag_length;
  plan.seed = c.derived_seed("stage3:translate");
  plan.steps = stage_steps(c, c.stage3, "translate");
  for (const auto& td : datasets) plan.datasets.push_back(td.name);
  auto report = train_stage3(backbone, tags, heads, datasets, plan);

  RenderOptions options;
  options.max_len = backbone.config().context_len;
  const auto test = read_jsonl(ddir / "test.jsonl");
  const auto preds = predict(backbone, tags, heads[0], tmpl, test, options);
  report.final_metric = {{"token_accuracy", metric_token_accuracy(preds.generated, preds.expected)},
                         {"exact_match", metric_exact_match(preds.generated, preds.expected)}};
  const auto dir = ws.task("translate");
  tags.save(dir);
  save_heads(dir, heads);
  write_json(dir / "template.json", {{"template", tmpl.to_json()}});
  report.write(dir);
  Json pairs = Json::array();
  for (auto p : c.train_pairs) pairs.push_back(pair_json(p));
  write_manifest(dir, "train-function-tag", c, tt, {{"train_pairs", pairs}});
  summary["translate"] = report.final_metric;
  summary["translate"]["backbone_unchanged"] = report.backbone_unchanged();
  summary["translate"]["frozen_tags_unchanged"] = report.frozen_tags_unchanged();
  (void)t0;
  return summary;
}

Json cmd_eval(const PipelineConfig& c, const Workspace& ws) {
  const auto t0 = Clock::now();
  auto backbone = load_backbone(ws);
  const auto base = load_stage1_tags(ws, backbone.embed_dim());
  std::vector<EvalReport> reports;
  Json summary = Json::object();
  for (const auto& name : c.tasks) {
    const auto setup = load_setup(c, ws, name);
    const auto dir = ws.task(name);
    ws.require(dir / "tags.json", "train-function-tag");
    const auto tags = TagTable::load(dir, backbone.embed_dim());
    const auto heads = load_heads(dir, backbone.embed_dim());
    const auto tj = read_json(dir / "template.json");
    const auto tmpl = Template::from_json(tj.at("template"));
    RenderOptions options;
    options.numeric_as_digits = tj.value("numeric_as_digits", false);
    options.precision = tj.value("precision", 2);
    options.max_len = backbone.config().context_len;
    const auto* head = find_head(std::span<const TaskHead>(heads), name);
    if (head == nullptr) throw Error(ErrorCode::missing_artifact, "no head '" + name + "' in " + dir.string());

    auto rep = evaluate_trained(backbone, tags, *head, setup.task, tmpl, options, setup.data.test);
    rep.condition = "tag_llm";
    rep.seed = c.seed;
    rep.tag_length = c.tag_length;
    if (!setup.shifted_test.empty()) {
      const auto shifted = evaluate_trained(backbone, tags, *head, setup.task, tmpl, options,
                                            setup.shifted_test);
      rep.extra["shifted_value"] = shifted.value;
      for (const auto& [k, v] : shifted.extra) rep.extra["shifted_" + k] = v;
    }
    summary[name]["tag_llm"] = rep.value;
    summary[name]["label_variance"] = rep.extra.at("label_variance");
    if (rep.extra.count("shifted_value") != 0) summary[name]["shifted"] = rep.extra.at("shifted_value");
    reports.push_back(rep);

    for (const auto& b : c.baselines) {
      EvalReport br = b == "nearest_neighbor"
                          ? baseline_nearest_neighbor(setup.task, setup.data)
                          : run_condition(backbone, base, setup, condition_from_string(b), c.seed);
      br.seed = c.seed;
      summary[name][b] = br.value;
      reports.push_back(std::move(br));
    }
  }
  const auto dir = ws.eval();
  fs::create_directories(dir);
  write_reports(dir / "report.jsonl", reports);
  write_text(dir / "table.txt", render_table(reports, "Task results (test split)"));
  write_manifest(dir, "eval", c, t0);
  return summary;
}

Json cmd_ablate(const PipelineConfig& c, const Workspace& ws) {
  const auto t0 = Clock::now();
  auto backbone = load_backbone(ws);
  const auto base = load_stage1_tags(ws, backbone.embed_dim());
  const auto setup = load_setup(c, ws, c.ablation_task);
  auto grid = c.grid;
  grid.sweep_seed = c.seed;
  const auto result = run_ablation(backbone, base, setup, grid);

  const auto dir = ws.ablate();
  fs::create_directories(dir);
  write_reports(dir / "report.jsonl", result.conditions);
  write_reports(dir / "sweep.jsonl", result.sweep);
  write_text(dir / "table.txt",
             render_table(result.conditions, "Ablation on " + c.ablation_task) + "\n" +
                 render_table(result.sweep, "Tag-length sweep on " + c.ablation_task));
  write_manifest(dir, "ablate", c, t0);

  Json summary;
  summary["task"] = c.ablation_task;
  summary["medians"] = result.medians;
  for (const auto& r : result.conditions) {
    summary["values"][r.condition].push_back(r.value);
  }
  for (const auto& r : result.sweep) summary["sweep"][std::to_string(r.tag_length)] = r.value;
  return summary;
}

Json cmd_compose(const PipelineConfig& c, const Workspace& ws) {
  const auto t0 = Clock::now();
  auto backbone = load_backbone(ws);
  const auto dir = ws.task("translate");
  ws.require(dir / "tags.json", "train-function-tag");
  ws.require(dir / "manifest.json", "train-function-tag");
  const auto family = cipher_family();
  const auto tags = TagTable::load(dir, backbone.embed_dim());
  std::vector<LanguagePair> trained;
  for (const auto& p : read_json(dir / "manifest.json").at("train_pairs")) {
    trained.push_back(pair_from_json(p, family));
  }
  ws.require(ws.data() / "translate" / "zero_shot.jsonl", "gen-data");
  const auto records = read_jsonl(ws.data() / "translate" / "zero_shot.jsonl");
  const auto result = zero_shot_composition_eval(backbone, tags, family, function_tag_name("translate"),
                                                 c.held_out_pair, trained, records, c.seed);
  const auto out = ws.compose();
  fs::create_directories(out);
  write_json(out / "report.json", result.report.to_json());
  std::vector<Json> samples;
  for (std::size_t i = 0; i < std::min<std::size_t>(20, records.size()); ++i) {
    samples.push_back({{"src_text", records[i].at("src_text")},
                       {"expected", records[i].at("tgt_text")},
                       {"generated", vocab::decode(result.generated[i])}});
  }
  write_jsonl(out / "samples.jsonl", samples);
  write_text(out / "table.txt", render_table(std::span<const EvalReport>(&result.report, 1),
                                             "Zero-shot composition"));
  write_manifest(out, "compose", c, t0);
  Json summary = result.report.extra;
  summary["token_accuracy"] = result.report.value;
  return summary;
}

Json cmd_run_all(const PipelineConfig& c, const Workspace& ws) {
  Json s;
  s["gen-data"] = cmd_gen_data(c, ws);
  s["pretrain"] = cmd_pretrain(c, ws);
  s["train-domain-tag"] = cmd_train_domain_tag(c, ws);
  s["train-function-tag"] = cmd_train_function_tag(c, ws);
  s["eval"] = cmd_eval(c, ws);
  s["ablate"] = cmd_ablate(c, ws);
  s["compose"] = cmd_compose(c, ws);
  return s;
}

// ---------------------------------------------------------------- inspect

namespace {

double row_norm(std::span<const float> row) {
  double s = 0;
  for (float v : row) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

void inspect_tags(std::ostringstream& out, const fs::path& dir, const Backbone* backbone) {
  const auto meta = read_json(dir / "tags.json");
  const auto d = meta.at("embed_dim").get<std::size_t>();
  const auto tags = TagTable::load(dir, d);
  out << "tag table: vocab_size " << tags.vocab_size() << ", embed_dim " << d << ", "
      << tags.size() << " tags\n";
  if (backbone != nullptr) {
    out << "  base mean embedding norm " << mean_embedding_report(*backbone).mean_norm << "\n";
  }
  for (const auto& spec : tags.specs()) {
    const auto data = spec.embedding.data();
    double lo = 1e300, hi = 0;
    bool identical = true;
    for (std::size_t r = 0; r < spec.length; ++r) {
      const auto row = data.subspan(r * d, d);
      const double n = row_norm(row);
      lo = std::min(lo, n);
      hi = std::max(hi, n);
      if (r > 0 && !std::equal(row.begin(), row.end(), data.begin())) identical = false;
    }
    out << "  " << spec.name << " id " << tags.id_of(spec.name) << " " << to_string(spec.kind)
        << " " << to_string(spec.status) << " shape " << spec.length << "x" << d << " row norm "
        << lo << ".." << hi << " rows " << (identical ? "identical" : "distinct") << " digest "
        << tag_digest(spec).substr(0, 16) << "\n";
    for (const auto& l : spec.lineage) {
      out << "    lineage: stage " << l.stage << " task '" << l.task << "'"
          << (l.parent.empty() ? "" : " parent '" + l.parent + "'") << "\n";
    }
  }
}

}  // namespace

std::string cmd_inspect(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::missing_artifact, "missing " + path.string());
  std::ostringstream out;
  out.precision(6);
  bool found = false;
  std::optional<Backbone> backbone;
  if (fs::exists(path / "weights.bin")) {
    backbone.emplace(Backbone::load(path));
  } else if (fs::exists(path.parent_path() / "backbone" / "weights.bin")) {
    backbone.emplace(Backbone::load(path.parent_path() / "backbone"));
  } else if (fs::exists(path.parent_path().parent_path() / "backbone" / "weights.bin")) {
    backbone.emplace(Backbone::load(path.parent_path().parent_path() / "backbone"));
  }
  if (fs::exists(path / "weights.bin")) {
    found = true;
    out << "backbone: " << backbone->config().to_json().dump() << "\n";
    for (const auto& [name, t] : backbone->named_parameters()) {
      out << "  " << name << " " << shape_string(t.shape()) << "\n";
    }
    out << "  parameters " << backbone->parameter_count() << "\n";
    out << "  param_hash " << backbone->param_hash() << "\n";
  }
  if (fs::exists(path / "tags.json")) {
    found = true;
    inspect_tags(out, path, backbone ? &*backbone : nullptr);
  }
  if (fs::exists(path / "heads.json")) {
    found = true;
    const auto j = read_json(path / "heads.json");
    out << "heads:\n";
    for (const auto& h : j.at("heads")) {
      out << "  " << h.at("name").get<std::string>() << " " << h.at("kind").get<std::string>()
          << " d_t " << h.at("d_t") << " loss " << h.at("loss").get<std::string>() << "\n";
    }
  }
  if (fs::exists(path / "report.json")) {
    found = true;
    out << "report: " << read_json(path / "report.json").dump(2) << "\n";
  }
  if (fs::exists(path / "manifest.json")) {
    found = true;
    const auto m = read_json(path / "manifest.json");
    out << "manifest: command " << m.at("command").get<std::string>() << ", seed " << m.at("seed")
        << ", config " << m.at("config_hash").get<std::string>().substr(0, 16) << ", "
        << m.at("artifacts").size() << " files\n";
  }
  if (!found) {
    throw Error(ErrorCode::missing_artifact, path.string() + " holds no recognizable artifacts");
  }
  return out.str();
}

}  // namespace tagllm

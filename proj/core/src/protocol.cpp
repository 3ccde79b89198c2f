#include "tagllm/protocol.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "tagllm/binio.hpp"
#include "tagllm/error.hpp"
#include "tagllm/vocab.hpp"

namespace tagllm {

namespace {

bool contains(const std::vector<std::string>& v, std::string_view x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

bool is_enrichment_fork(const TagSpec& spec) {
  return !spec.lineage.empty() && spec.lineage.back().stage == 2 &&
         !spec.lineage.back().parent.empty();
}

}  // namespace

void StagePlan::validate(const TagTable& tags) const {
  auto fail = [&](const std::string& msg) {
    throw Error(ErrorCode::config, "stage " + std::to_string(stage) + " plan: " + msg);
  };
  if (stage < 1 || stage > 3) fail("stage must be 1, 2 or 3");
  if (variant != "tag" && variant != "baseline") fail("variant must be 'tag' or 'baseline'");
  if (batch_size == 0 || grad_accum == 0) fail("batch_size and grad_accum must be positive");
  if (optimizer.lr < 0 || lambda_f < 0 || lambda_m < 0) fail("negative rate or loss weight");
  if (steps < 0 || epochs < 0) fail("negative step budget");
  if (std::set<std::string>(trainable_tags.begin(), trainable_tags.end()).size() !=
      trainable_tags.size()) {
    fail("trainable tags repeat");
  }
  std::size_t n_domain = 0, n_function = 0;
  for (const auto& name : trainable_tags) {
    if (!tags.contains(name)) fail("trainable tag '" + name + "' is not registered");
    if (contains(frozen_tags, name)) fail("tag '" + name + "' is both trainable and frozen");
    const auto& spec = tags.get(name);
    if (spec.kind == TagKind::domain) {
      ++n_domain;
      if (stage == 2 && !is_enrichment_fork(spec)) {
        fail("domain tag '" + name + "' may only train in stage 2 as an enrichment fork");
      }
    } else {
      ++n_function;
    }
  }
  switch (stage) {
    case 1:
      if (n_domain != 1 || n_function != 0) fail("exactly one domain tag must be trainable");
      if (lambda_f != 0) fail("lambda_f must be 0");
      if (!trainable_heads.empty()) fail("no head trains in stage 1");
      if (!(lambda_m > 0)) fail("lambda_m must be positive");
      break;
    case 2:
      if (variant == "tag" && n_function != 1) fail("exactly one function tag must be trainable");
      if (variant == "baseline" && n_function > 1) fail("at most one soft prompt may train");
      if (trainable_heads.size() != 1) fail("exactly one head must be trainable");
      if (n_domain > 0 && !(lambda_m > 0)) fail("lambda_m must be positive when enriching");
      break;
    case 3:
      if (n_domain != 0) fail("domain tags must be frozen");
      if (variant == "tag" && n_function != 1) fail("exactly one function tag must be trainable");
      if (lambda_m != 0) fail("lambda_m must be 0");
      if (trainable_heads.empty()) fail("at least one head must be trainable");
      break;
  }
}

std::int64_t StagePlan::resolved_steps(std::size_t train_examples) const {
  if (steps > 0) return steps;
  const double per_step = static_cast<double>(batch_size * grad_accum);
  const auto n = static_cast<std::int64_t>(
      std::ceil(epochs * static_cast<double>(train_examples) / per_step));
  return std::max<std::int64_t>(1, n);
}

Json StagePlan::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["variant"] = variant;
  j["trainable_tags"] = trainable_tags;
  j["trainable_heads"] = trainable_heads;
  j["frozen_tags"] = frozen_tags;
  j["datasets"] = datasets;
  j["lambda_f"] = lambda_f;
  j["lambda_m"] = lambda_m;
  j["optimizer"] = {{"name", "adamw"},
                    {"lr", optimizer.lr},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"eps", optimizer.eps},
                    {"weight_decay", optimizer.weight_decay}};
  j["schedule"] = {{"name", "cosine"}, {"warmup_fraction", warmup_fraction}};
  j["epochs"] = epochs;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["grad_accum"] = grad_accum;
  j["tag_length"] = tag_length;
  j["seed"] = seed;
  j["log_every"] = log_every;
  j["numeric_as_digits"] = numeric_as_digits;
  j["precision"] = precision;
  return Json::parse(j.dump());
}

StagePlan StagePlan::from_json(const Json& j) {
  StagePlan p;
  try {
    p.stage = j.value("stage", p.stage);
    p.variant = j.value("variant", p.variant);
    p.trainable_tags = j.value("trainable_tags", p.trainable_tags);
    p.trainable_heads = j.value("trainable_heads", p.trainable_heads);
    p.frozen_tags = j.value("frozen_tags", p.frozen_tags);
    p.datasets = j.value("datasets", p.datasets);
    p.lambda_f = j.value("lambda_f", p.lambda_f);
    p.lambda_m = j.value("lambda_m", p.lambda_m);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      if (o.value("name", std::string("adamw")) != "adamw") {
        throw Error(ErrorCode::config, "only the adamw optimizer is supported");
      }
      p.optimizer.lr = o.value("lr", p.optimizer.lr);
      p.optimizer.beta1 = o.value("beta1", p.optimizer.beta1);
      p.optimizer.beta2 = o.value("beta2", p.optimizer.beta2);
      p.optimizer.eps = o.value("eps", p.optimizer.eps);
      p.optimizer.weight_decay = o.value("weight_decay", p.optimizer.weight_decay);
    }
    if (j.contains("schedule")) {
      p.warmup_fraction = j.at("schedule").value("warmup_fraction", p.warmup_fraction);
    }
    p.epochs = j.value("epochs", p.epochs);
    p.steps = j.value("steps", p.steps);
    p.batch_size = j.value("batch_size", p.batch_size);
    p.grad_accum = j.value("grad_accum", p.grad_accum);
    p.tag_length = j.value("tag_length", p.tag_length);
    p.seed = j.value("seed", p.seed);
    p.log_every = j.value("log_every", p.log_every);
    p.numeric_as_digits = j.value("numeric_as_digits", p.numeric_as_digits);
    p.precision = j.value("precision", p.precision);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::config, std::string("stage plan: ") + e.what());
  }
  return p;
}

StagePlan make_default_plan(int stage, std::string_view task) {
  StagePlan p;
  p.stage = stage;
  p.datasets = {std::string(task)};
  p.lambda_f = stage == 1 ? 0.0 : 1.0;
  p.lambda_m = stage == 3 ? 0.0 : 1.0;
  // Training epochs per task family.
  if (task == "translate") {
    p.epochs = 1;
  } else if (task == "descriptor" || task == "affinity") {
    p.epochs = 4;
  } else if (task == "qed" || task == "combination") {
    p.epochs = 2;
  } else {
    p.epochs = 1;
  }
  return p;
}

// ---------------------------------------------------------------- reports

Json TrainReport::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["job"] = job;
  j["seed"] = seed;
  j["steps"] = steps;
  j["trainable_parameters"] = trainable_parameters;
  j["audit"] = nlohmann::ordered_json::array();
  for (const auto& a : audit) j["audit"].push_back({{"component", a.component}, {"parameters", a.parameters}});
  j["backbone_hash_before"] = backbone_hash_before;
  j["backbone_hash_after"] = backbone_hash_after;
  j["backbone_unchanged"] = backbone_unchanged();
  j["frozen_tag_digest_before"] = frozen_tag_digest_before;
  j["frozen_tag_digest_after"] = frozen_tag_digest_after;
  j["frozen_tags_unchanged"] = frozen_tags_unchanged();
  if (!records.empty()) {
    j["first_loss"] = records.front().loss;
    j["last_loss"] = records.back().loss;
  }
  j["final_metric"] = final_metric;
  j["runtime_seconds"] = runtime_seconds;
  return Json::parse(j.dump());
}

void TrainReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_json(dir / "report.json", to_json());
  std::string lines;
  for (const auto& r : records) {
    nlohmann::ordered_json e{{"step", r.step}, {"task", r.task}, {"loss", r.loss},
                             {"l_f", r.l_f},   {"l_m", r.l_m},   {"lr", r.lr}};
    lines += e.dump() + "\n";
  }
  write_text(dir / "metrics.jsonl", lines);
}

std::vector<AuditEntry> audit_parameters(const StagePlan& plan, const TagTable& tags,
                                         std::span<const TaskHead> heads) {
  std::vector<AuditEntry> out;
  for (const auto& name : plan.trainable_tags) {
    const auto& spec = tags.get(name);
    out.push_back({"tag:" + name, spec.length * tags.embed_dim()});
  }
  for (const auto& name : plan.trainable_heads) {
    const auto* h = find_head(heads, name);
    if (h == nullptr) throw Error(ErrorCode::config, "plan names unknown head '" + name + "'");
    out.push_back({"head:" + name, h->parameter_count()});
  }
  return out;
}

std::size_t audit_total(std::span<const AuditEntry> audit) {
  std::size_t n = 0;
  for (const auto& a : audit) n += a.parameters;
  return n;
}

std::string tag_digest(const TagSpec& spec) {
  const auto data = spec.embedding.data();
  const auto* raw = reinterpret_cast<const std::uint8_t*>(data.data());
  return sha256_hex(std::span<const std::uint8_t>(raw, data.size() * sizeof(float)));
}

TaskHead* find_head(std::vector<TaskHead>& heads, std::string_view name) {
  for (auto& h : heads) {
    if (h.name == name) return &h;
  }
  return nullptr;
}

const TaskHead* find_head(std::span<const TaskHead> heads, std::string_view name) {
  for (const auto& h : heads) {
    if (h.name == name) return &h;
  }
  return nullptr;
}

// ---------------------------------------------------------------- training

namespace {

struct PreparedTask {
  const TaskData* data;
  TaskHead* head;  // null for stage 1
  std::vector<RenderedExample> examples;
};

struct BatchLoss {
  Tensor total;
  double l_f = 0, l_m = 0;
};

BatchLoss batch_loss(const Backbone& backbone, const TagTable& tags, const PreparedTask& task,
                     std::span<const std::size_t> picks, const StagePlan& plan, bool use_lm) {
  std::vector<std::vector<InputToken>> seqs;
  std::vector<std::int32_t> next;
  std::vector<float> lm_mask, target_mask;
  std::vector<std::size_t> readout;
  std::vector<float> numeric;
  std::vector<std::int32_t> classes;
  std::size_t base = 0;
  for (auto i : picks) {
    const auto& ex = task.examples[i];
    seqs.push_back(ex.ids);
    next.insert(next.end(), ex.next_ids.begin(), ex.next_ids.end());
    lm_mask.insert(lm_mask.end(), ex.lm_mask.begin(), ex.lm_mask.end());
    target_mask.insert(target_mask.end(), ex.target_mask.begin(), ex.target_mask.end());
    readout.push_back(base + ex.readout_index);
    base += ex.ids.size();
    if (task.head != nullptr && task.head->kind == HeadKind::regression) {
      for (double y : ex.numeric_target) numeric.push_back(static_cast<float>(task.head->standardize(y)));
    } else if (task.head != nullptr && task.head->kind == HeadKind::classification) {
      classes.push_back(static_cast<std::int32_t>(ex.numeric_target.at(0)));
    }
  }
  const auto packed = backbone.embed_batch(seqs, &tags);
  const auto hidden = backbone.hidden_states(packed.embedded, packed.offsets);

  const bool generation = task.head != nullptr && task.head->kind == HeadKind::generation &&
                          plan.lambda_f > 0;
  Tensor logits;
  if (use_lm || generation) logits = backbone.project(hidden);

  BatchLoss out;
  std::vector<Tensor> terms;
  if (use_lm) {
    const auto lm = ops::cross_entropy(logits, std::span<const std::int32_t>(next),
                                       std::span<const float>(lm_mask));
    out.l_m = lm.item();
    terms.push_back(ops::scale(lm, static_cast<float>(plan.lambda_m)));
  }
  if (task.head != nullptr && plan.lambda_f > 0) {
    Tensor lf;
    if (generation) {
      lf = ops::cross_entropy(logits, std::span<const std::int32_t>(next),
                              std::span<const float>(target_mask));
    } else {
      const auto pred = ops::matmul(ops::select_rows(hidden, std::span<const std::size_t>(readout)),
                                    task.head->weight);
      if (task.head->kind == HeadKind::regression) {
        lf = ops::mse(pred, Tensor::from_data(pred.shape(), numeric));
      } else {
        const std::vector<float> ones(classes.size(), 1.0f);
        lf = ops::cross_entropy(pred, std::span<const std::int32_t>(classes),
                                std::span<const float>(ones));
      }
    }
    out.l_f = lf.item();
    terms.push_back(ops::scale(lf, static_cast<float>(plan.lambda_f)));
  }
  if (terms.empty()) throw Error(ErrorCode::config, "plan yields no loss terms");
  out.total = terms.size() == 1 ? terms[0] : ops::add(terms[0], terms[1]);
  return out;
}

void check_routing(const Backbone& backbone, const TagTable& tags,
                   std::span<const TaskHead> heads, const TaskHead* active_head,
                   const StagePlan& plan) {
  for (const auto& [name, t] : backbone.named_parameters()) {
    if (t.has_grad()) throw Error(ErrorCode::state, "backbone parameter '" + name + "' has a gradient");
  }
  for (const auto& spec : tags.specs()) {
    if (spec.embedding.has_grad() && !contains(plan.trainable_tags, spec.name)) {
      throw Error(ErrorCode::state, "frozen tag '" + spec.name + "' received a gradient");
    }
  }
  for (const auto& h : heads) {
    if (!h.weight.defined() || !h.weight.has_grad()) continue;
    if (&h != active_head || !contains(plan.trainable_heads, h.name)) {
      throw Error(ErrorCode::state, "head '" + h.name + "' received a gradient outside its task");
    }
  }
}

}  // namespace

TrainReport run_stage(Backbone& backbone, TagTable& tags, std::vector<TaskHead>& heads,
                      std::span<const TaskData> tasks, const StagePlan& plan) {
  const auto t0 = std::chrono::steady_clock::now();
  plan.validate(tags);
  if (tasks.empty()) throw Error(ErrorCode::config, "stage has no datasets");
  if (tags.embed_dim() != backbone.embed_dim()) {
    throw Error(ErrorCode::dimension, "tag table and backbone disagree on embed_dim");
  }

  TrainReport report;
  report.stage = plan.stage;
  report.seed = plan.seed;

  backbone.set_trainable(false);
  report.backbone_hash_before = backbone.param_hash();
  for (const auto& spec : tags.specs()) {
    const bool train = contains(plan.trainable_tags, spec.name);
    tags.set_status(spec.name, train ? TagStatus::trainable : TagStatus::frozen);
    tags.get(spec.name).embedding.clear_grad();
    if (!train) report.frozen_tag_digest_before[spec.name] = tag_digest(spec);
  }
  for (auto& h : heads) {
    if (!h.weight.defined()) continue;
    h.weight.set_requires_grad(contains(plan.trainable_heads, h.name));
    h.weight.clear_grad();
  }

  const bool use_lm = plan.lambda_m > 0 &&
                      std::any_of(plan.trainable_tags.begin(), plan.trainable_tags.end(),
                                  [&](const std::string& n) {
                                    return tags.get(n).kind == TagKind::domain;
                                  });

  RenderOptions options;
  options.numeric_as_digits = plan.numeric_as_digits;
  options.precision = plan.precision;
  options.max_len = backbone.config().context_len;

  std::vector<PreparedTask> prepared;
  std::size_t total_examples = 0;
  for (const auto& t : tasks) {
    if (t.train.empty()) throw Error(ErrorCode::value, "dataset '" + t.name + "' is empty");
    PreparedTask p{&t, nullptr, {}};
    if (!t.head.empty()) {
      p.head = find_head(heads, t.head);
      if (p.head == nullptr) throw Error(ErrorCode::config, "task '" + t.name + "' has no head '" + t.head + "'");
    } else if (plan.lambda_f > 0) {
      throw Error(ErrorCode::config, "task '" + t.name + "' needs a head when lambda_f > 0");
    }
    for (const auto& r : t.train) p.examples.push_back(render(t.tmpl, r, tags, options));
    if (use_lm) {
      bool any = false;
      for (const auto& ex : p.examples) {
        any = any || std::any_of(ex.lm_mask.begin(), ex.lm_mask.end(), [](float m) { return m > 0; });
      }
      if (!any) {
        throw Error(ErrorCode::value,
                    "l_M is undefined: template '" + t.tmpl.name + "' has no payload positions");
      }
    }
    total_examples += p.examples.size();
    prepared.push_back(std::move(p));
  }

  // Standardization constants come from the training labels of each head.
  for (auto& h : heads) {
    if (!contains(plan.trainable_heads, h.name)) continue;
    std::vector<double> ys;
    for (const auto& p : prepared) {
      if (p.head != &h) continue;
      for (const auto& ex : p.examples) {
        if (!ex.numeric_target.empty()) ys.push_back(ex.numeric_target[0]);
      }
    }
    if (!ys.empty() && h.kind != HeadKind::classification) h.fit_standardization(ys);
  }

  report.audit = audit_parameters(plan, tags, heads);
  report.trainable_parameters = audit_total(report.audit);

  AdamW<float> opt(plan.optimizer);
  for (const auto& name : plan.trainable_tags) opt.add_param(tags.get(name).embedding);
  for (const auto& name : plan.trainable_heads) {
    auto* h = find_head(heads, name);
    if (h->weight.defined()) opt.add_param(h->weight);
  }

  const auto steps = plan.resolved_steps(total_examples);
  report.steps = steps;
  Rng rng = Rng(plan.seed).fork("stage" + std::to_string(plan.stage));
  std::vector<double> mix;
  for (const auto& p : prepared) mix.push_back(static_cast<double>(p.examples.size()));

  for (std::int64_t step = 0; step < steps; ++step) {
    const auto k = prepared.size() == 1 ? 0 : rng.categorical(mix);
    const auto& task = prepared[k];
    StepRecord rec;
    rec.step = step;
    rec.task = task.data->name;
    for (std::size_t micro = 0; micro < plan.grad_accum; ++micro) {
      std::vector<std::size_t> picks(plan.batch_size);
      for (auto& i : picks) i = rng.below(task.examples.size());
      auto loss = batch_loss(backbone, tags, task, picks, plan, use_lm);
      const double inv = 1.0 / static_cast<double>(plan.grad_accum);
      rec.loss += loss.total.item() * inv;
      rec.l_f += loss.l_f * inv;
      rec.l_m += loss.l_m * inv;
      backward(ops::scale(loss.total, static_cast<float>(inv)));
    }
    check_routing(backbone, tags, heads, task.head, plan);
    rec.lr = cosine_lr(step, steps, plan.warmup_fraction, plan.optimizer.lr);
    if (opt.slots().size() > 0) {
      const bool any_grad = std::any_of(opt.slots().begin(), opt.slots().end(),
                                        [](const auto& s) { return s.param.has_grad(); });
      if (any_grad) opt.step(rec.lr);
    }
    opt.zero_grad();
    if (plan.log_every > 0 && (step % plan.log_every == 0 || step + 1 == steps)) {
      report.records.push_back(rec);
    }
  }

  report.backbone_hash_after = backbone.param_hash();
  for (const auto& spec : tags.specs()) {
    if (report.frozen_tag_digest_before.count(spec.name) != 0) {
      report.frozen_tag_digest_after[spec.name] = tag_digest(spec);
    }
  }
  report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

TrainReport train_stage1(Backbone& backbone, TagTable& tags, const std::string& domain_tag,
                         std::span<const std::string> corpus, const StagePlan& plan) {
  if (plan.stage != 1) throw Error(ErrorCode::config, "train_stage1 needs a stage-1 plan");
  if (corpus.empty()) throw Error(ErrorCode::value, "stage 1 needs an in-domain corpus");
  if (plan.trainable_tags != std::vector<std::string>{domain_tag}) {
    throw Error(ErrorCode::config, "stage-1 plan must train exactly '" + domain_tag + "'");
  }
  TaskData task;
  task.name = domain_tag + ":lm";
  task.tmpl = instantiate(builtin_template("domain_lm"), {{"domain", domain_tag}});
  for (const auto& s : corpus) task.train.push_back({{"text", s}});
  std::vector<TaskHead> no_heads;
  auto report = run_stage(backbone, tags, no_heads, std::span<const TaskData>(&task, 1), plan);
  report.job = "stage1:" + domain_tag;
  return report;
}

TrainReport train_stage2(Backbone& backbone, TagTable& tags, std::vector<TaskHead>& heads,
                         const TaskData& task, const StagePlan& plan) {
  if (plan.stage != 2) throw Error(ErrorCode::config, "train_stage2 needs a stage-2 plan");
  auto report = run_stage(backbone, tags, heads, std::span<const TaskData>(&task, 1), plan);
  report.job = "stage2:" + task.name;
  return report;
}

TrainReport train_stage3(Backbone& backbone, TagTable& tags, std::vector<TaskHead>& heads,
                         std::span<const TaskData> tasks, const StagePlan& plan) {
  if (plan.stage != 3) throw Error(ErrorCode::config, "train_stage3 needs a stage-3 plan");
  for (const auto& name : plan.trainable_tags) {
    if (tags.get(name).kind == TagKind::domain) {
      throw Error(ErrorCode::config, "stage 3: domain tag '" + name + "' is marked trainable");
    }
  }
  if (tasks.size() < 2) {
    const auto& segs = tasks.empty() ? std::vector<Segment>{} : tasks[0].tmpl.segments;
    const auto domain_tags = std::count_if(segs.begin(), segs.end(), [](const Segment& s) {
      return s.kind == SegmentKind::tag;
    });
    if (domain_tags < 3) {
      throw Error(ErrorCode::config, "stage 3 needs >= 2 datasets or >= 2 domains per input");
    }
  }
  auto report = run_stage(backbone, tags, heads, tasks, plan);
  report.job = "stage3";
  return report;
}

double domain_nll(const Backbone& backbone, const TagTable& tags, const std::string& domain_tag,
                  std::span<const std::string> docs) {
  NoGradGuard no_grad;
  if (docs.empty()) throw Error(ErrorCode::value, "domain_nll: no documents");
  const auto tmpl = instantiate(builtin_template("domain_lm"), {{"domain", domain_tag}});
  double total = 0, count = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t begin = 0; begin < docs.size(); begin += kChunk) {
    std::vector<std::vector<InputToken>> seqs;
    std::vector<std::int32_t> next;
    std::vector<float> mask;
    for (std::size_t i = begin; i < std::min(docs.size(), begin + kChunk); ++i) {
      const auto ex = render(tmpl, Json{{"text", docs[i]}}, tags);
      seqs.push_back(ex.ids);
      next.insert(next.end(), ex.next_ids.begin(), ex.next_ids.end());
      mask.insert(mask.end(), ex.lm_mask.begin(), ex.lm_mask.end());
    }
    double n = 0;
    for (auto m : mask) n += m;
    const auto packed = backbone.embed_batch(seqs, &tags);
    const auto out = backbone.forward(packed.embedded, packed.offsets);
    const auto ce = ops::cross_entropy(out.logits, std::span<const std::int32_t>(next),
                                       std::span<const float>(mask));
    total += ce.item() * n;
    count += n;
  }
  return total / count;
}

Predictions predict(const Backbone& backbone, const TagTable& tags, const TaskHead& head,
                    const Template& tmpl, std::span<const Json> records,
                    const RenderOptions& options) {
  NoGradGuard no_grad;
  Predictions out;
  std::vector<RenderedExample> examples;
  for (const auto& r : records) examples.push_back(render(tmpl, r, tags, options));
  if (head.kind != HeadKind::generation) {
    constexpr std::size_t kChunk = 32;
    for (std::size_t begin = 0; begin < examples.size(); begin += kChunk) {
      std::vector<std::vector<InputToken>> seqs;
      std::vector<std::size_t> readout;
      std::size_t base = 0;
      for (std::size_t i = begin; i < std::min(examples.size(), begin + kChunk); ++i) {
        // Only the prompt feeds the head.
        const auto& ex = examples[i];
        seqs.emplace_back(ex.ids.begin(), ex.ids.begin() + static_cast<std::ptrdiff_t>(ex.prompt_length));
        readout.push_back(base + ex.readout_index);
        base += ex.prompt_length;
      }
      const auto packed = backbone.embed_batch(seqs, &tags);
      const auto hidden = backbone.hidden_states(packed.embedded, packed.offsets);
      const auto pred = ops::matmul(ops::select_rows(hidden, std::span<const std::size_t>(readout)),
                                    head.weight);
      for (std::size_t b = 0; b < readout.size(); ++b) {
        const float z = pred.data()[b * head.d_t];
        out.values.push_back(head.kind == HeadKind::regression ? head.destandardize(z) : z);
        out.targets.push_back(examples[begin + b].numeric_target.at(0));
      }
    }
    return out;
  }
  std::vector<std::vector<InputToken>> prompts;
  std::size_t max_len = 0;
  for (const auto& ex : examples) {
    prompts.emplace_back(ex.prompt().begin(), ex.prompt().end());
    max_len = std::max(max_len, ex.output_tokens.size() + 2);
  }
  const auto generated = greedy_decode_batch(backbone, &tags, prompts, max_len, vocab::kStop);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto gen = generated[i];
    if (!gen.empty() && gen.back() == vocab::kStop) gen.pop_back();
    auto want = examples[i].output_tokens;
    if (!want.empty() && want.back() == vocab::kStop) want.pop_back();
    if (!examples[i].numeric_target.empty()) {
      const auto parsed = parse_generated_number(gen, head.target_mean);
      out.values.push_back(parsed.value);
      out.targets.push_back(examples[i].numeric_target[0]);
      out.parse_failures += parsed.failed;
    }
    out.generated.push_back(std::move(gen));
    out.expected.push_back(std::move(want));
  }
  return out;
}

}  // namespace tagllm

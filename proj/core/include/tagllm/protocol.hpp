#pragma once

// Three-stage training of tags and heads around a frozen backbone.
//
// Stage 1 trains one domain tag by next-token prediction on raw in-domain
// text. Stage 2 trains one function tag and its head on a single labelled
// task, optionally together with enrichment forks of the involved domain
// tags (co-optimizing l_M). Stage 3 trains one function tag and per-task
// heads over several datasets with every domain tag frozen.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tagllm/backbone.hpp"
#include "tagllm/heads.hpp"
#include "tagllm/numerics.hpp"
#include "tagllm/tags.hpp"
#include "tagllm/templates.hpp"

namespace tagllm {

struct StagePlan {
  int stage = 2;
  // "tag" plans obey the stage invariants; "baseline" plans (linear probe,
  // prompt tuning, text domain info) may omit the function tag.
  std::string variant = "tag";
  std::vector<std::string> trainable_tags;
  std::vector<std::string> trainable_heads;
  std::vector<std::string> frozen_tags;  // informational; everything not trainable is frozen
  std::vector<std::string> datasets;
  double lambda_f = 1.0;
  double lambda_m = 1.0;
  AdamWConfig optimizer{1e-4, 0.9, 0.999, 1e-8, 0.0};
  double warmup_fraction = 0.03;
  double epochs = 1.0;
  std::int64_t steps = 0;  // optimizer steps; 0 derives them from epochs
  std::size_t batch_size = 4;
  std::size_t grad_accum = 8;
  std::size_t tag_length = 10;
  std::uint64_t seed = 0;
  std::int64_t log_every = 10;
  bool numeric_as_digits = false;
  int precision = 2;

  void validate(const TagTable& tags) const;
  std::int64_t resolved_steps(std::size_t train_examples) const;
  Json to_json() const;
  static StagePlan from_json(const Json& j);
};

// Appendix defaults: AdamW lr 1e-4, no weight decay, warmup 0.03, batch 4,
// accumulation 8, p = 10, lambda_F = lambda_M = 1, per-task epochs.
StagePlan make_default_plan(int stage, std::string_view task);

// One training dataset: an instantiated template, its records, and the name
// of the head that reads it.
struct TaskData {
  std::string name;
  Template tmpl;
  std::vector<Json> train;
  std::string head;
};

struct StepRecord {
  std::int64_t step = 0;
  std::string task;
  double loss = 0, l_f = 0, l_m = 0, lr = 0;
};

struct AuditEntry {
  std::string component;  // "tag:<name>" or "head:<name>"
  std::size_t parameters = 0;
};

struct TrainReport {
  int stage = 0;
  std::string job;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  std::vector<StepRecord> records;
  std::vector<AuditEntry> audit;
  std::size_t trainable_parameters = 0;
  std::string backbone_hash_before, backbone_hash_after;
  std::map<std::string, std::string> frozen_tag_digest_before, frozen_tag_digest_after;
  Json final_metric = Json::object();
  double runtime_seconds = 0;

  bool backbone_unchanged() const { return backbone_hash_before == backbone_hash_after; }
  bool frozen_tags_unchanged() const { return frozen_tag_digest_before == frozen_tag_digest_after; }
  Json to_json() const;
  // report.json + metrics.jsonl
  void write(const std::filesystem::path& dir) const;
};

// Exact trainable-parameter count of a plan: p*d per trainable tag plus
// d*d_t per trainable head.
std::vector<AuditEntry> audit_parameters(const StagePlan& plan, const TagTable& tags,
                                         std::span<const TaskHead> heads);
std::size_t audit_total(std::span<const AuditEntry> audit);

std::string tag_digest(const TagSpec& spec);

// Generic optimizer loop shared by all stages. Heads are matched to tasks by
// name; the plan decides which tags and heads receive gradient.
TrainReport run_stage(Backbone& backbone, TagTable& tags, std::vector<TaskHead>& heads,
                      std::span<const TaskData> tasks, const StagePlan& plan);

TrainReport train_stage1(Backbone& backbone, TagTable& tags, const std::string& domain_tag,
                         std::span<const std::string> corpus, const StagePlan& plan);
TrainReport train_stage2(Backbone& backbone, TagTable& tags, std::vector<TaskHead>& heads,
                         const TaskData& task, const StagePlan& plan);
TrainReport train_stage3(Backbone& backbone, TagTable& tags, std::vector<TaskHead>& heads,
                         std::span<const TaskData> tasks, const StagePlan& plan);

// Mean next-token NLL over the in-domain tokens of [tag; text] documents.
double domain_nll(const Backbone& backbone, const TagTable& tags, const std::string& domain_tag,
                  std::span<const std::string> docs);

struct Predictions {
  std::vector<double> values, targets;
  std::vector<std::vector<std::int32_t>> generated, expected;
  std::size_t parse_failures = 0;
};

// Regression heads read hidden states; generation heads (and the digit path)
// decode greedily. Digit parse failures fall back to the head's train mean.
Predictions predict(const Backbone& backbone, const TagTable& tags, const TaskHead& head,
                    const Template& tmpl, std::span<const Json> records,
                    const RenderOptions& options);

TaskHead* find_head(std::vector<TaskHead>& heads, std::string_view name);
const TaskHead* find_head(std::span<const TaskHead> heads, std::string_view name);

}  // namespace tagllm

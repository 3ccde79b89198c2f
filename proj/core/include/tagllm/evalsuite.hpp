#pragma once

// Evaluation conditions, baselines and the ablation grid. Every condition
// trains against a private copy of the tag table, so the caller's stage-1
// tags are never modified.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tagllm/backbone.hpp"
#include "tagllm/domains.hpp"
#include "tagllm/heads.hpp"
#include "tagllm/metrics.hpp"
#include "tagllm/protocol.hpp"
#include "tagllm/tags.hpp"
#include "tagllm/templates.hpp"

namespace tagllm {

enum class Condition {
  full,
  enriched,
  no_domain,
  no_function,
  no_reg_head,
  prompt_tuning,
  linear_probe,
  text_domain_info,
};

std::string_view to_string(Condition c);
Condition condition_from_string(std::string_view text);

struct EvalReport {
  std::string task;
  std::string condition;
  std::string metric;
  double value = 0;
  bool defined = true;  // false for an undefined Pearson r
  std::map<std::string, double> extra;  // secondary metrics and references
  std::size_t parse_failures = 0;
  std::vector<AuditEntry> audit;
  std::size_t trainable_parameters = 0;
  std::uint64_t seed = 0;
  std::size_t tag_length = 0;
  double runtime_seconds = 0;

  Json to_json() const;
  static EvalReport from_json(const Json& j);
};

// Metric value of a prediction set; Pearson sets defined=false on zero
// variance instead of reporting 0.
std::pair<double, bool> compute_metric(Metric metric, const Predictions& p);

// Domain tags are named after their domains ("protein", "molecule"); the
// function tag of a task is "fn-<task>".
std::string function_tag_name(std::string_view task);
Template task_template(const LabeledTask& task, const std::string& function_tag,
                       const std::map<std::string, std::string>& domain_tags = {});

// Parameters of everything the condition learned: each distinct tag the
// template references (stage-1 tags included) plus the head.
std::vector<AuditEntry> condition_audit(const Template& tmpl, const TagTable& tags,
                                        const TaskHead* head);

struct TaskSetup {
  LabeledTask task;
  Dataset data;
  StagePlan plan;  // stage-2 budget and optimizer shared by every condition
  std::size_t tag_length = 10;
  // Optional second test split (the shifted affinity split), scored into
  // extra["shifted_*"].
  std::vector<Json> shifted_test;
};

// What a condition trained, for callers that persist it.
struct ConditionArtifacts {
  std::optional<TagTable> tags;
  std::vector<TaskHead> heads;
  Template tmpl;
  RenderOptions options;
  TrainReport train;
};

// Trains and tests one condition. base_tags must hold the stage-1 domain
// tags of the task; the report's seed overrides plan.seed.
EvalReport run_condition(Backbone& backbone, const TagTable& base_tags,
                         const TaskSetup& setup, Condition condition, std::uint64_t seed,
                         ConditionArtifacts* artifacts = nullptr);

// Scores already-trained artifacts on a record set with the task metric.
EvalReport evaluate_trained(const Backbone& backbone, const TagTable& tags, const TaskHead& head,
                            const LabeledTask& task, const Template& tmpl,
                            const RenderOptions& options, std::span<const Json> records);

EvalReport baseline_prompt_tuning(Backbone& backbone, const TagTable& base_tags,
                                  const TaskSetup& setup, std::uint64_t seed);
EvalReport baseline_linear_probe(Backbone& backbone, const TagTable& base_tags,
                                 const TaskSetup& setup, std::uint64_t seed);
EvalReport baseline_text_domain_info(Backbone& backbone, const TagTable& base_tags,
                                     const TaskSetup& setup, std::uint64_t seed);

// 2*LCS(a,b)/(|a|+|b|); 1 for two empty strings.
double similarity_ratio(std::string_view a, std::string_view b);
// Label of the most similar training record over concatenated payloads;
// the lowest training index wins ties.
EvalReport baseline_nearest_neighbor(const LabeledTask& task, const Dataset& data);

struct AblationGrid {
  std::vector<Condition> conditions{Condition::full, Condition::enriched, Condition::no_domain,
                                    Condition::no_function, Condition::no_reg_head};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::size_t> tag_lengths{1, 5, 10, 20, 50};
  std::uint64_t sweep_seed = 0;
};

struct AblationResult {
  std::vector<EvalReport> conditions;  // condition x seed
  std::vector<EvalReport> sweep;       // one per tag length
  // Median metric value per condition over seeds.
  std::map<std::string, double> medians;
};

// The sweep varies the function-tag length; domain tags keep their stage-1
// length.
AblationResult run_ablation(Backbone& backbone, const TagTable& base_tags,
                            const TaskSetup& setup, const AblationGrid& grid);

struct CompositionResult {
  EvalReport report;  // value = token accuracy with the stage-1 tags
  std::vector<std::vector<std::int32_t>> generated;
};

// Decodes the held-out pair with the trained function tag. The control copies
// the table, swaps both language tags for freshly initialized ones, and is
// scored in the same report. Throws Error(config) when the pair appears in
// trained_pairs.
CompositionResult zero_shot_composition_eval(const Backbone& backbone, const TagTable& tags,
                                             const CipherFamily& family,
                                             const std::string& function_tag,
                                             LanguagePair unseen,
                                             std::span<const LanguagePair> trained_pairs,
                                             std::span<const Json> test_records,
                                             std::uint64_t seed);

// Plain-text table: one row per report.
std::string render_table(std::span<const EvalReport> reports, const std::string& title);

}  // namespace tagllm

#pragma once

// The reference experiment: data generation, pretraining, the three tag
// stages, evaluation, ablation and zero-shot composition, laid out as one
// artifact directory per step under a common root.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tagllm/backbone.hpp"
#include "tagllm/domains.hpp"
#include "tagllm/evalsuite.hpp"
#include "tagllm/protocol.hpp"

namespace tagllm {

struct PipelineConfig {
  // Drives every generator and trainer; seeds inside sub-sections are
  // derived from it and ignored on input.
  std::uint64_t seed = 0;
  BackboneConfig backbone;
  PretrainConfig pretrain;
  GeneralCorpusConfig corpus;

  std::size_t domain_train_docs = 2000;
  std::size_t domain_held_out_docs = 200;
  std::size_t language_train_docs = 1000;
  std::size_t language_held_out_docs = 100;

  std::size_t tag_length = 10;
  // Stage-2/3 budgets are epochs per task family times this many steps,
  // unless a plan sets steps explicitly.
  std::int64_t steps_per_epoch = 100;
  StagePlan stage1;
  StagePlan stage2;
  StagePlan stage3;

  std::vector<std::string> tasks{"descriptor", "qed", "combination", "affinity"};
  DatasetSizes task_sizes{1000, 100, 200};
  std::vector<std::string> baselines{"nearest_neighbor", "linear_probing", "prompt_tuning",
                                     "text_domain_info"};

  std::vector<LanguagePair> train_pairs;
  LanguagePair held_out_pair{6, 7};
  DatasetSizes translate_sizes{1000, 100, 200};

  std::string ablation_task = "combination";
  AblationGrid grid;

  PipelineConfig();
  Json to_json() const;
  static PipelineConfig from_json(const Json& j);
  std::string hash() const;  // SHA-256 of the canonical JSON
  std::uint64_t derived_seed(std::string_view label) const;
  std::vector<std::string> stage1_domains() const;
};

// Dotted-path assignment into a JSON object; the value is parsed as JSON
// when possible and kept as a string otherwise.
void apply_override(Json& config, std::string_view assignment);

// Fixed sub-directories of an artifact root.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path backbone() const { return root / "backbone"; }
  std::filesystem::path tags() const { return root / "tags"; }
  std::filesystem::path task(std::string_view name) const { return root / "tasks" / name; }
  std::filesystem::path eval() const { return root / "eval"; }
  std::filesystem::path ablate() const { return root / "ablate"; }
  std::filesystem::path compose() const { return root / "compose"; }

  // Throws Error(missing_artifact) naming the file and the command that
  // produces it.
  void require(const std::filesystem::path& file, std::string_view producer) const;
};

// Each step writes manifest.json into its directory and returns a summary
// of the metrics it produced.
Json cmd_gen_data(const PipelineConfig& config, const Workspace& ws);
Json cmd_pretrain(const PipelineConfig& config, const Workspace& ws);
Json cmd_train_domain_tag(const PipelineConfig& config, const Workspace& ws);
Json cmd_train_function_tag(const PipelineConfig& config, const Workspace& ws);
Json cmd_eval(const PipelineConfig& config, const Workspace& ws);
Json cmd_ablate(const PipelineConfig& config, const Workspace& ws);
Json cmd_compose(const PipelineConfig& config, const Workspace& ws);
// Every step in order; the summary keys are the step names.
Json cmd_run_all(const PipelineConfig& config, const Workspace& ws);

// Human-readable summary of an artifact directory (backbone, tag table,
// heads, reports).
std::string cmd_inspect(const std::filesystem::path& path);

}  // namespace tagllm

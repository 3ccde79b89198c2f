#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tagllm/pipeline.hpp"

namespace tagllm {

inline constexpr const char* kCommands[] = {"gen-data", "pretrain", "train-domain-tag",
                                            "train-function-tag", "eval", "ablate",
                                            "compose", "run", "inspect"};

struct CommandLine {
  std::string command;
  std::optional<std::filesystem::path> config;  // built-in reference defaults when absent
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = "artifacts";
  std::vector<std::string> overrides;  // "a.b=value"
  std::filesystem::path target;        // inspect only
};

// Config file, then overrides, then --seed.
PipelineConfig resolve_config(const CommandLine& cmd);

// Runs one command and prints its summary as JSON to out. Failures print a
// single `ERROR <code>: <message>` line to err and return nonzero.
int run_command(const CommandLine& cmd, std::ostream& out, std::ostream& err);

}  // namespace tagllm

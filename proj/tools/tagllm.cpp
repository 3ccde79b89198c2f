#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "tagllm/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"tagllm: tags around a frozen character-level transformer"};
  app.require_subcommand(1);

  tagllm::CommandLine cmd;
  std::string config, seed;
  for (const char* name : tagllm::kCommands) {
    auto* sub = app.add_subcommand(name);
    if (std::string(name) == "inspect") {
      sub->add_option("path", cmd.target, "artifact directory")->required();
      continue;
    }
    sub->add_option("--config", config, "JSON configuration (reference defaults when omitted)");
    sub->add_option("--seed", seed, "overrides the configured seed");
    sub->add_option("--out", cmd.out, "artifact root directory");
    sub->add_option("--override", cmd.overrides, "dotted-path override, key.path=value");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "ERROR config: " << e.what() << "\n";
    return 2;
  }
  cmd.command = app.get_subcommands().front()->get_name();
  if (!config.empty()) cmd.config = config;
  if (!seed.empty()) {
    try {
      cmd.seed = std::stoull(seed);
    } catch (const std::exception&) {
      std::cerr << "ERROR config: --seed expects an unsigned integer, got '" << seed << "'\n";
      return 2;
    }
  }
  return tagllm::run_command(cmd, std::cout, std::cerr);
}

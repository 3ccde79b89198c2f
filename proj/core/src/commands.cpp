#include "tagllm/commands.hpp"

#include <algorithm>
#include <iostream>

#include "tagllm/binio.hpp"
#include "tagllm/error.hpp"

namespace tagllm {

PipelineConfig resolve_config(const CommandLine& cmd) {
  Json j = Json::object();
  if (cmd.config) j = read_json(*cmd.config);
  for (const auto& o : cmd.overrides) apply_override(j, o);
  if (cmd.seed) j["seed"] = *cmd.seed;
  return PipelineConfig::from_json(j);
}

int run_command(const CommandLine& cmd, std::ostream& out, std::ostream& err) {
  try {
    if (std::find(std::begin(kCommands), std::end(kCommands), cmd.command) == std::end(kCommands)) {
      throw Error(ErrorCode::config, "unknown command '" + cmd.command + "'");
    }
    if (cmd.command == "inspect") {
      out << cmd_inspect(cmd.target);
      return 0;
    }
    const auto config = resolve_config(cmd);
    const Workspace ws{cmd.out};
    Json summary;
    if (cmd.command == "gen-data") {
      summary = cmd_gen_data(config, ws);
    } else if (cmd.command == "pretrain") {
      summary = cmd_pretrain(config, ws);
    } else if (cmd.command == "train-domain-tag") {
      summary = cmd_train_domain_tag(config, ws);
    } else if (cmd.command == "train-function-tag") {
      summary = cmd_train_function_tag(config, ws);
    } else if (cmd.command == "eval") {
      summary = cmd_eval(config, ws);
    } else if (cmd.command == "ablate") {
      summary = cmd_ablate(config, ws);
    } else if (cmd.command == "compose") {
      summary = cmd_compose(config, ws);
    } else {
      summary = cmd_run_all(config, ws);
    }
    out << summary.dump(2) << "\n";
    return 0;
  } catch (const Error& e) {
    err << "ERROR " << to_string(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const Json::exception& e) {
    err << "ERROR format: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "ERROR io: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "ERROR state: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tagllm

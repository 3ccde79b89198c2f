#include <doctest.h>

#include <algorithm>
#include <sys/wait.h>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>

#include "tagllm/backbone.hpp"
#include "tagllm/binio.hpp"
#include "tagllm/commands.hpp"
#include "tagllm/error.hpp"
#include "tagllm/tags.hpp"

using namespace tagllm;
namespace fs = std::filesystem;

namespace {

// A configuration small enough to run every step in a few seconds.
Json tiny_config() {
  return Json::parse(R"({
    "backbone": {"embed_dim": 16, "n_layers": 1, "n_heads": 2},
    "corpus": {"documents": 200},
    "pretrain": {"steps": 6, "batch_size": 4, "log_every": 2},
    "domain_train_docs": 20, "domain_held_out_docs": 5,
    "language_train_docs": 10, "language_held_out_docs": 5,
    "tag_length": 2,
    "stage1": {"steps": 2, "batch_size": 2, "grad_accum": 1},
    "stage2": {"steps": 2, "batch_size": 2, "grad_accum": 1},
    "stage3": {"steps": 2, "batch_size": 2, "grad_accum": 1},
    "task_sizes": {"train": 8, "val": 2, "test": 4},
    "translate_sizes": {"train": 8, "val": 2, "test": 3},
    "baselines": ["nearest_neighbor", "linear_probing"],
    "ablation": {"conditions": ["full", "no_reg_head"], "seeds": [0], "tag_lengths": [1, 3]}
  })");
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("tagllm_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CommandLine tiny_command(const std::string& command, const fs::path& root) {
  write_json(root / "tiny.json", tiny_config());
  CommandLine cmd;
  cmd.command = command;
  cmd.config = root / "tiny.json";
  cmd.out = root / "art";
  return cmd;
}

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(const CommandLine& cmd) {
  std::ostringstream out, err;
  int code = run_command(cmd, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("apply_override assigns dotted paths and parses values") {
  Json j = Json::object();
  apply_override(j, "backbone.embed_dim=32");
  apply_override(j, "tasks=[\"qed\"]");
  apply_override(j, "ablation.task=affinity");
  CHECK(j["backbone"]["embed_dim"] == 32);
  CHECK(j["tasks"] == Json::array({"qed"}));
  CHECK(j["ablation"]["task"] == "affinity");

  auto c = PipelineConfig::from_json(j);
  CHECK(c.backbone.embed_dim == 32);
  CHECK(c.tasks.size() == 1);
  CHECK(c.ablation_task == "affinity");
}

TEST_CASE("unknown top-level keys are rejected") {
  Json j = Json::object();
  apply_override(j, "not_a_key=1");
  try {
    PipelineConfig::from_json(j);
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config);
  }
}

TEST_CASE("resolve_config applies file, then overrides, then seed") {
  auto dir = fresh_dir("resolve");
  write_json(dir / "c.json", Json::parse(R"({"seed": 3, "tag_length": 4})"));
  CommandLine cmd;
  cmd.command = "gen-data";
  cmd.config = dir / "c.json";
  cmd.overrides = {"tag_length=6", "seed=5"};
  auto c = resolve_config(cmd);
  CHECK(c.tag_length == 6);
  CHECK(c.seed == 5);
  cmd.seed = 9;
  CHECK(resolve_config(cmd).seed == 9);

  // The seed is part of the hash, so two resolutions differ only through it.
  auto a = resolve_config(cmd).hash();
  cmd.seed = 10;
  CHECK(resolve_config(cmd).hash() != a);
}

TEST_CASE("unknown commands print one ERROR line") {
  CommandLine cmd;
  cmd.command = "frobnicate";
  auto r = run(cmd);
  CHECK(r.code == 1);
  CHECK(r.out.empty());
  CHECK(r.err.rfind("ERROR config: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

TEST_CASE("steps fail with missing_artifact naming the producer") {
  auto dir = fresh_dir("missing");
  auto cmd = tiny_command("ablate", dir);
  auto r = run(cmd);
  CHECK(r.code == 1);
  CHECK(r.err.rfind("ERROR missing_artifact: ", 0) == 0);
  CHECK(r.err.find("pretrain") != std::string::npos);

  REQUIRE(run(tiny_command("gen-data", dir)).code == 0);
  REQUIRE(run(tiny_command("pretrain", dir)).code == 0);
  r = run(cmd);
  CHECK(r.code == 1);
  CHECK(r.err.find("tags/tags.json") != std::string::npos);
  CHECK(r.err.find("train-domain-tag") != std::string::npos);
}

TEST_CASE("pretraining twice gives the same weights hash") {
  auto dir = fresh_dir("rerun");
  REQUIRE(run(tiny_command("gen-data", dir)).code == 0);
  auto first = run(tiny_command("pretrain", dir));
  REQUIRE(first.code == 0);
  auto second = run(tiny_command("pretrain", dir));
  REQUIRE(second.code == 0);
  auto a = Json::parse(first.out);
  auto b = Json::parse(second.out);
  CHECK(a["artifacts"] == b["artifacts"]);
  CHECK(a["config_hash"] == b["config_hash"]);
}

TEST_CASE("the full pipeline runs and inspect summarizes its artifacts") {
  auto dir = fresh_dir("run");
  auto r = run(tiny_command("run", dir));
  INFO(r.err);
  REQUIRE(r.code == 0);
  auto summary = Json::parse(r.out);
  for (const char* step : {"gen-data", "pretrain", "train-domain-tag", "train-function-tag",
                           "eval", "ablate", "compose"}) {
    CHECK(summary.contains(step));
  }
  auto art = dir / "art";
  for (const char* sub : {"data", "backbone", "tags", "eval", "ablate", "compose"}) {
    CHECK(fs::exists(art / sub / "manifest.json"));
  }

  CommandLine inspect;
  inspect.command = "inspect";
  inspect.target = art / "tags";
  auto shown = run(inspect);
  REQUIRE(shown.code == 0);
  CHECK(shown.out.find("row norm") != std::string::npos);
  CHECK(shown.out.find("base mean embedding norm") != std::string::npos);

  inspect.target = art / "nothing-here";
  CHECK(run(inspect).code == 1);
}

TEST_CASE("freshly initialized tags inspect as identical rows") {
  auto dir = fresh_dir("inspect");
  for (const char* c : {"gen-data", "pretrain"}) REQUIRE(run(tiny_command(c, dir)).code == 0);
  auto backbone = Backbone::load(dir / "art" / "backbone");
  TagTable tags(backbone.config().vocab_size, backbone.config().embed_dim);
  auto init = init_tag(tags, backbone, "protein", TagKind::domain, 3);
  tags.save(dir / "art" / "tags");

  CommandLine inspect;
  inspect.command = "inspect";
  inspect.target = dir / "art" / "tags";
  auto shown = run(inspect);
  REQUIRE(shown.code == 0);
  CHECK(shown.out.find("protein") != std::string::npos);
  CHECK(shown.out.find("rows identical") != std::string::npos);
  CHECK(shown.out.find("base mean embedding norm") != std::string::npos);
  CHECK(init.report.mean_norm > 0);
}

TEST_CASE("the executable reports errors through its exit code") {
  const char* bin = std::getenv("TAGLLM_CLI");
  if (bin == nullptr) {
    MESSAGE("TAGLLM_CLI is not set; skipping");
    return;
  }
  auto dir = fresh_dir("exe");
  auto log = dir / "err.txt";
  auto shell = [&](const std::string& args) {
    std::string line = std::string("\"") + bin + "\" " + args + " 2> \"" + log.string() + "\" > /dev/null";
    int status = std::system(line.c_str());
    return WEXITSTATUS(status);
  };
  CHECK(shell("ablate --out \"" + (dir / "art").string() + "\"") == 1);
  CHECK(read_text(log).rfind("ERROR missing_artifact: ", 0) == 0);
  CHECK(shell("gen-data --override bogus=1 --out \"" + (dir / "art").string() + "\"") == 1);
  CHECK(read_text(log).rfind("ERROR config: ", 0) == 0);
  CHECK(shell("--no-such-flag") == 2);
}

TEST_CASE("the checked-in reference config matches the built-in defaults") {
  const char* path = std::getenv("TAGLLM_REFERENCE_CONFIG");
  if (path == nullptr) {
    MESSAGE("TAGLLM_REFERENCE_CONFIG is not set; skipping");
    return;
  }
  auto loaded = PipelineConfig::from_json(Json::parse(read_text(path)));
  CHECK(loaded.hash() == PipelineConfig{}.hash());
}

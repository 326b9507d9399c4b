#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "fixtures.hpp"
#include "vidit/cli.hpp"
#include "vidit/error.hpp"

using namespace vidit;
using namespace vidit::cli;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  std::ostringstream o, e;
  const int code = run(args, o, e);
  return {code, o.str(), e.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

json micro_json() {
  return json::parse(R"({
    "seed": 5,
    "world": {"n_per_class": 40, "n_frames": 16},
    "codebook": {"k": 16, "max_frames": 200, "max_iterations": 10},
    "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_mlp": 32},
    "train": {"total_steps": 10, "batch_size": 2, "frames_per_sequence": 2, "eval_every": 5, "val_sequences": 4},
    "eval": {"n_queries": 18, "n_probe_queries": 36, "probe_min_per_class": 2},
    "attn": {"n_queries": 4},
    "infer": {"n": 2}
  })");
}

// Every regular file below `dir`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = slurp(e.path());
  }
  return out;
}

const std::vector<std::string> kPipeline = {"gen-data", "fit-codebook", "train", "eval", "probe",
                                            "infer",    "attn",         "ablate-demos"};

void run_pipeline(const fs::path& cfg, const fs::path& out) {
  for (const auto& sub : kPipeline) {
    const auto r = invoke({"--config", cfg.string(), "--out", out.string(), sub});
    INFO(sub << ": " << r.err);
    REQUIRE(r.code == kExitOk);
    REQUIRE(fs::exists(out / ("run_" + sub + ".json")));
  }
}

}  // namespace

TEST_CASE("run config round trip and strict keys") {
  const auto cfg = RunConfig::from_json(micro_json().dump());
  CHECK(cfg.model.vocab == 18);
  CHECK(cfg.train.seed == 5);
  CHECK(cfg.eval.seed == 5);
  const auto again = RunConfig::from_json(cfg.to_json());
  CHECK(again.to_json() == cfg.to_json());
  CHECK(again.hash() == cfg.hash());

  auto moved = cfg;
  moved.out_dir = "/elsewhere";
  CHECK(moved.hash() == cfg.hash());
  auto reseeded = cfg;
  reseeded.seed = 6;
  CHECK(reseeded.hash() != cfg.hash());

  CHECK(default_demo_grid().size() == 4);

  for (const char* bad : {R"({"bogus": 1})", R"({"model": {"layers": 2}})", R"({"train": {"seed": 3}})",
                          R"({"eval": {"probe": {"x": 1}}})", R"({"world": {"n_per_class": "many"}})", "[1,"}) {
    INFO(bad);
    CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  }
}

TEST_CASE("usage and configuration errors") {
  CHECK(invoke({}).code == kExitUsage);
  CHECK(invoke({"no-such-command"}).code == kExitUsage);
  CHECK(invoke({"--version"}).code == kExitOk);
  CHECK(invoke({"--help"}).code == kExitOk);

  fixtures::TempDir dir("cli_errors");
  write(dir.path / "bad.json", R"({"unknown": true})");
  const auto r = invoke({"--config", (dir.path / "bad.json").string(), "gen-data"});
  CHECK(r.code == kExitConfig);
  const auto rec = json::parse(r.err.substr(0, r.err.find('\n')));
  CHECK(rec["error"] == "config-error");
  CHECK(rec["subcommand"] == "gen-data");

  const auto missing_cfg = invoke({"--config", (dir.path / "absent.json").string(), "train"});
  CHECK(missing_cfg.code != kExitOk);

  write(dir.path / "ok.json", micro_json().dump());
  const auto no_data = invoke({"--config", (dir.path / "ok.json").string(), "--out", (dir.path / "run").string(), "eval"});
  CHECK(no_data.code == kExitNotFound);
  CHECK(fs::exists(dir.path / "run" / "error_eval.json"));
  CHECK(json::parse(slurp(dir.path / "run" / "error_eval.json"))["error"] == "not-found");
}

TEST_CASE("full micro pipeline is reproducible") {
  fixtures::TempDir dir("cli_pipeline");
  write(dir.path / "cfg.json", micro_json().dump());
  run_pipeline(dir.path / "cfg.json", dir.path / "a");
  run_pipeline(dir.path / "cfg.json", dir.path / "b");

  const auto a = tree(dir.path / "a");
  const auto b = tree(dir.path / "b");
  REQUIRE(a.size() == b.size());
  for (const auto& [name, bytes] : a) {
    INFO(name);
    REQUIRE(b.count(name) == 1);
    if (name.rfind("run_", 0) == 0) {
      auto ja = json::parse(bytes), jb = json::parse(b.at(name));
      ja["config"].erase("out_dir");
      jb["config"].erase("out_dir");
      CHECK(ja == jb);
    } else {
      CHECK(bytes == b.at(name));
    }
  }
  for (const char* f : {"codebook.vicb", "train/final.vitc", "train/loss.csv", "eval/report.csv", "eval/report.json",
                        "probe/probes.csv", "infer/result_000.viml", "infer/result_000.json", "attn/records.csv",
                        "attn/summary.json", "ablate/report.csv"}) {
    INFO(f);
    CHECK(a.count(f) == 1);
  }

  // Report shape: six condition rows, four grid rows.
  const auto csv = a.at("eval/report.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  const auto ablate = a.at("ablate/report.csv");
  CHECK(std::count(ablate.begin(), ablate.end(), '\n') == 5);

  const auto manifest = json::parse(a.at("run_eval.json"));
  CHECK(manifest["seed"] == 5);
  CHECK(manifest["config_hash"] == RunConfig::from_json(micro_json().dump()).hash());

  // A checkpoint built against another codebook is refused.
  auto other = micro_json();
  other["codebook"]["k"] = 12;
  write(dir.path / "other.json", other.dump());
  const fs::path c = dir.path / "c";
  for (const char* sub : {"gen-data", "fit-codebook"}) {
    REQUIRE(invoke({"--config", (dir.path / "other.json").string(), "--out", c.string(), sub}).code == kExitOk);
  }
  const auto mismatch = invoke({"--config", (dir.path / "other.json").string(), "--out", c.string(), "--checkpoint",
                             (dir.path / "a" / "train" / "final.vitc").string(), "eval"});
  CHECK(mismatch.code == kExitInvalid);
}

TEST_CASE("seed override changes the data") {
  fixtures::TempDir dir("cli_seed");
  write(dir.path / "cfg.json", micro_json().dump());
  const auto cfg = (dir.path / "cfg.json").string();
  REQUIRE(invoke({"--config", cfg, "--out", (dir.path / "x").string(), "gen-data"}).code == 0);
  REQUIRE(invoke({"--config", cfg, "--out", (dir.path / "y").string(), "--seed", "6", "gen-data"}).code == 0);
  CHECK(slurp(dir.path / "x" / "data" / "manifest.json") != slurp(dir.path / "y" / "data" / "manifest.json"));
  CHECK(json::parse(slurp(dir.path / "y" / "run_gen-data.json"))["seed"] == 6);
}

TEST_CASE("relative outputs honour the output root") {
  fixtures::TempDir dir("cli_root");
  write(dir.path / "cfg.json", micro_json().dump());
  ::setenv(kOutRootEnv, dir.path.c_str(), 1);
  const auto r = invoke({"--config", (dir.path / "cfg.json").string(), "--out", "rel/run", "gen-data"});
  ::unsetenv(kOutRootEnv);
  CHECK(r.code == kExitOk);
  CHECK(fs::exists(dir.path / "rel" / "run" / "run_gen-data.json"));
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vidit/eval.hpp"
#include "vidit/inference.hpp"
#include "vidit/model.hpp"
#include "vidit/trainer.hpp"
#include "vidit/worldgen.hpp"

namespace vidit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNotFound = 3;
inline constexpr int kExitInvalid = 4;
inline constexpr int kExitIo = 5;
inline constexpr int kExitTraining = 6;
inline constexpr int kExitInternal = 7;

// Environment variable that relocates relative output directories.
inline constexpr const char* kOutRootEnv = "VIDIT_OUT_ROOT";

struct CodebookSettings {
  int k = 512;
  int patch = 4;
  int max_iterations = 50;
  double tolerance = 1e-6;
  int max_frames = 0;  // 0: fit on every training frame

  bool operator==(const CodebookSettings&) const = default;
};

struct DemoGridEntry {
  std::string name;
  infer::DemoKind kind = infer::DemoKind::InClass;
  int k = 1;
  int frames_per_demo = 8;

  bool operator==(const DemoGridEntry&) const = default;
};

struct InferSettings {
  infer::DemoKind kind = infer::DemoKind::InClass;
  int n = 6;
  bool greedy = true;
  int top_k = 50;
  double temperature = 1.0;

  bool operator==(const InferSettings&) const = default;
};

struct AttnSettings {
  infer::DemoKind kind = infer::DemoKind::InClass;
  int n_queries = 60;

  bool operator==(const AttnSettings&) const = default;
};

struct ScaleSettings {
  std::vector<std::string> sizes = {"tiny", "small", "base"};
  std::vector<uint64_t> seeds = {0, 1, 2};

  bool operator==(const ScaleSettings&) const = default;
};

struct RunConfig {
  std::filesystem::path out_dir = "runs/default";
  uint64_t seed = 0;
  world::DatasetSpec world;  // its seed is replaced by the root seed
  CodebookSettings codebook;
  model::ModelConfig model;
  train::TrainConfig train;  // its seed is replaced by the root seed
  eval::SuiteConfig eval;    // its seed is replaced by the root seed
  std::vector<DemoGridEntry> demo_grid;
  InferSettings infer;
  AttnSettings attn;
  ScaleSettings scale;

  RunConfig();
  // Rejects unknown keys at every level (ConfigError).
  static RunConfig from_json(const std::string& text);
  std::string to_json() const;
  // Hash of the canonical JSON without out_dir.
  std::string hash() const;
  void validate() const;
};

// Default grid: none, 1x4, 2x4, 1x8 (in-class demonstrations).
std::vector<DemoGridEntry> default_demo_grid();

// Parses arguments (argv[0] excluded) and runs one subcommand. Progress goes
// to `out`, diagnostics and the error record to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vidit::cli

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vidit/eval.hpp"
#include "vidit/inference.hpp"
#include "vidit/model.hpp"
#include "vidit/trainer.hpp"

namespace vidit::analysis {

enum class BucketKind : uint8_t { Bos = 0, Demo, Query, Generated };
std::string_view bucket_kind_name(BucketKind k);

// A block of internal rows. The bos bucket also holds the conditioning slot.
struct Bucket {
  BucketKind kind = BucketKind::Bos;
  int frame = 0;  // frame index within its kind (demo frames counted across clips)
  int begin = 0;
  int end = 0;
};

struct PromptLayout {
  std::vector<Bucket> buckets;
  int prompt_rows = 0;  // internal rows before the first generated token
  int tokens_per_frame = 0;
};

PromptLayout make_layout(std::span<const int> demo_frames, int query_frames, int gen_frames, int tokens_per_frame,
                         bool conditioned);
PromptLayout layout_of(const infer::GenerationResult& r);

// mass[t][b]: attention of the row that produced generated token t summed
// within bucket b.
struct FrameAttentionProfile {
  std::vector<Bucket> buckets;
  std::vector<std::vector<double>> mass;
};

// rows[t] is the head-averaged last-layer attention row (over internal rows
// 0 .. prompt_rows - 1 + t) of the position producing generated token t.
FrameAttentionProfile attention_frame_aggregate(const std::vector<std::vector<float>>& rows,
                                                const PromptLayout& layout);
FrameAttentionProfile attention_frame_aggregate(const infer::GenerationResult& r);

struct DemoQueryMass {
  double demo = 0;
  double query = 0;
  double generated = 0;  // earlier generated tokens, including the producing row itself
  double bos = 0;
};

// Mean over generated tokens, normalized so the four buckets sum to 1.
DemoQueryMass demo_query_mass(const FrameAttentionProfile& profile);

struct AttentionRecord {
  int query = 0;
  world::Action query_label = world::Action::MoveLeft;
  world::Action demo_label = world::Action::MoveLeft;
  std::optional<world::Action> prediction;
  bool success = false;  // oracle prediction equals the demonstration label
  DemoQueryMass mass;
};

struct AttentionSummary {
  std::vector<AttentionRecord> records;
  int n_success = 0;
  int n_failure = 0;
  // Mean (demo - query) mass per group; NaN for an empty group.
  double diff_success = 0;
  double diff_failure = 0;

  std::string to_csv() const;
  std::string summary_json() const;
};

AttentionSummary run_attention_analysis(const model::TransformerModel& model, const tok::Codebook& cb,
                                        const infer::ClipPool& pool, infer::DemoKind kind, int n_queries,
                                        const eval::SuiteConfig& cfg);

struct LadderEntry {
  std::string name;
  model::ModelConfig config;
};

// tiny (2 layers, d 64, 2 heads, mlp 256), small (4, 128, 4, 512),
// base (6, 256, 8, 1024).
std::vector<LadderEntry> default_ladder(int vocab, int context_len);

struct ScalingRow {
  std::string size;
  int64_t params = 0;
  uint64_t seed = 0;
  double val_loss = 0;
  double v_acc_inclass = 0;
  double v_acc_random = 0;
  double p_acc_inclass = 0;
  double p_acc_random = 0;
  double gain = 0;  // p_acc_inclass - p_acc_random
};

std::string scaling_csv(const std::vector<ScalingRow>& rows);

// Trains every ladder entry per seed on the same data and schedule, then
// scores in-class and random demonstrations by query label. Checkpoints and
// loss curves go under out_dir/<size>_seed<seed> when out_dir is non-empty.
std::vector<ScalingRow> scaling_suite(const std::vector<LadderEntry>& ladder, const train::TrainingData& data,
                                      const tok::Codebook& cb, const infer::ClipPool& query_pool,
                                      const infer::ClipPool& probe_pool, const train::TrainConfig& train_cfg,
                                      const eval::SuiteConfig& suite_cfg, std::span<const uint64_t> seeds,
                                      const std::filesystem::path& out_dir = {});

}  // namespace vidit::analysis

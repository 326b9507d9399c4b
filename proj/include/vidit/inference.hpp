#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vidit/model.hpp"
#include "vidit/rng.hpp"
#include "vidit/tokenizer.hpp"
#include "vidit/worldgen.hpp"

namespace vidit::infer {

enum class DemoKind : uint8_t { None = 0, Random, InClass, Contrastive };

std::string_view demo_kind_name(DemoKind k);
DemoKind demo_kind_from_name(std::string_view name);  // throws ConfigError

struct DemonstrationSpec {
  DemoKind kind = DemoKind::InClass;
  int k = 1;
  int frames_per_demo = 8;
  uint64_t seed = 0;

  // kind=None requires k=0; the whole prompt plus generation must fit.
  void validate(int query_frames, int gen_frames, int context_frames) const;
};

// A clip available for prompting, with its frames and their tokens.
struct PoolClip {
  int clip_id = 0;
  world::Action label = world::Action::MoveLeft;
  std::vector<world::Frame> frames;
  std::vector<int> tokens;  // frames.size() * tokens_per_frame codes
};

struct ClipPool {
  int tokens_per_frame = 0;
  std::vector<PoolClip> clips;
  std::array<std::vector<int>, world::kNumClasses> by_class;  // indices into clips

  void add(PoolClip clip);
  std::span<const int> frame_tokens(int clip_index, int frame) const;
};

ClipPool make_pool(const world::Manifest& manifest, const std::filesystem::path& dir, world::Split split,
                   const tok::Codebook& cb);

// Indices into pool.clips. Demos never share a clip_id with the query and are
// distinct from each other.
std::vector<int> sample_demonstration(const DemonstrationSpec& spec, const ClipPool& pool,
                                      world::Action query_label, int query_clip_id);

// One bos, then demo frames in clip order, then query frames. No eos, no
// separators.
tok::TokenSequence build_prompt(std::span<const std::vector<world::Frame>> demos,
                                std::span<const world::Frame> query, const tok::Codebook& cb, int context_len);
// Same layout from already-encoded frame tokens.
tok::TokenSequence build_prompt_tokens(std::span<const std::vector<int>> demo_bodies, std::span<const int> query_body,
                                       int tokens_per_frame, int bos, int context_len);

struct Sampling {
  enum class Mode : uint8_t { Greedy = 0, TopK };
  Mode mode = Mode::Greedy;
  int top_k = 50;
  double temperature = 1.0;
  uint64_t seed = 0;

  static Sampling greedy() { return {}; }
  static Sampling topk(int k, double temperature, uint64_t seed) { return {Mode::TopK, k, temperature, seed}; }
};

// Picks the next id from one row of logits. Ids >= first_special are never
// returned: a sampled special id becomes the most probable non-special id.
int sample_token(std::span<const float> logits, const Sampling& s, int first_special, Rng& rng);

// Renormalized truncated softmax used by top-k sampling (zeros outside the
// top k). Exposed for testing.
std::vector<double> topk_distribution(std::span<const float> logits, int k, double temperature);

struct GenerationResult {
  tok::TokenSequence prompt;
  std::vector<int> generated_ids;
  std::vector<world::Frame> generated_frames;
  // Last-layer (final-normed) hidden of each generated token, row-major
  // [generated][d_model].
  std::vector<float> last_hidden;
  int d_model = 0;
  // For each generated token, the head-averaged last-layer attention row of
  // the position that produced it, over internal rows (empty unless captured).
  std::vector<std::vector<float>> attention;
  bool conditioned = false;  // the model has a conditioning slot
  world::Action query_label = world::Action::MoveLeft;
  std::vector<world::Action> demo_labels;
  std::vector<int> demo_frames;  // frame count per demo clip, in prompt order
  int query_frames = 0;
};

GenerationResult generate(const model::TransformerModel& model, const tok::TokenSequence& prompt, int gen_frames,
                          const tok::Codebook& cb, const Sampling& sampling, bool capture_attention = false,
                          std::optional<model::Condition> cond = std::nullopt);

// Sidecar written next to frame dumps.
std::string result_sidecar_json(const GenerationResult& r, const std::string& condition);

}  // namespace vidit::infer

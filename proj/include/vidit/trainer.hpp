#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vidit/model.hpp"
#include "vidit/tokenizer.hpp"
#include "vidit/worldgen.hpp"

namespace vidit::train {

struct TrainConfig {
  int batch_size = 16;
  int total_steps = 20000;
  double peak_lr = 3e-4;
  int warmup_steps = 200;
  double weight_decay = 0.01;
  std::array<double, 2> adam_betas = {0.9, 0.95};
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  uint64_t seed = 0;
  int frames_per_sequence = 16;
  int eval_every = 250;
  int val_sequences = 64;
  int checkpoint_every = 0;  // 0: final checkpoint only
  // Probability of dropping the label for a sequence (conditioned models).
  double cond_dropout = 0.0;
  // Worker threads for the per-sequence gradients. Results are bit-identical
  // for a fixed thread count.
  int threads = 1;

  // Throws ConfigError.
  void validate(const model::ModelConfig& mcfg, int tokens_per_frame) const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);  // rejects unknown keys
  bool operator==(const TrainConfig&) const = default;
};

// Linear warmup to peak_lr, then peak_lr * sqrt(warmup / step).
double lr_at(int step, const TrainConfig& cfg);

// Seeded uniform window start in [0, clip_frames - n_frames].
int window_start(int clip_frames, int n_frames, uint64_t seed);

// A contiguous n_frames window of one clip, with bos/eos.
tok::TokenSequence build_training_sequence(const world::VideoClip& clip, const tok::Codebook& cb,
                                           int n_frames, uint64_t seed);

struct EncodedClip {
  int clip_id = 0;
  world::Action label = world::Action::MoveLeft;
  int n_frames = 0;
  std::vector<int> body;  // n_frames * tokens_per_frame codes
};

struct TrainingData {
  int tokens_per_frame = 0;
  int bos = 0;
  int eos = 0;
  std::vector<EncodedClip> train;
  std::vector<EncodedClip> val;
};

TrainingData encode_dataset(const world::Manifest& manifest, const std::filesystem::path& dir,
                            const tok::Codebook& cb);

// Window of an encoded clip as a training sequence (bos, body, eos).
std::vector<int> sequence_window(const TrainingData& data, const EncodedClip& clip, int start, int n_frames);

// Entropy (nats) of the unigram distribution of training body tokens.
double unigram_entropy(const TrainingData& data);

struct LossPoint {
  int step = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
  double lr = 0;
};

struct TrainOutput {
  std::filesystem::path dir;  // loss.csv and checkpoints go here
  std::string meta_json = "{}";  // merged into every checkpoint's meta
  std::function<void(const LossPoint&)> on_step;
};

struct TrainResult {
  model::TransformerModel model;
  std::vector<LossPoint> curve;
  double final_val_loss = 0;
};

// Fixed validation set: val_sequences windows drawn from the val split.
double validation_loss(const model::TransformerModel& model, const TrainingData& data, const TrainConfig& cfg);

// Throws TrainingFailure on a non-finite loss or gradient; when `out` is set,
// the parameters from before the failing step are saved as last_good.vitc.
TrainResult train(model::TransformerModel model, const TrainingData& data, const TrainConfig& cfg,
                  const TrainOutput* out = nullptr);

std::string loss_csv(const std::vector<LossPoint>& curve);

}  // namespace vidit::train

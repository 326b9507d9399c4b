#pragma once

#include <filesystem>
#include <string>

#include "vidit/inference.hpp"
#include "vidit/model.hpp"
#include "vidit/tokenizer.hpp"
#include "vidit/trainer.hpp"
#include "vidit/worldgen.hpp"

namespace fixtures {

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / ("vidit_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

// Small world: 40 clips per class (4 val, 4 test), 16-frame clips, K=32.
struct World {
  TempDir dir;
  vidit::world::Manifest manifest;
  vidit::tok::Codebook codebook;

  explicit World(const std::string& name, int n_per_class = 40, int k = 32, uint64_t seed = 11) : dir(name) {
    vidit::world::DatasetSpec spec;
    spec.n_per_class = n_per_class;
    spec.seed = seed;
    manifest = vidit::world::gen_dataset(spec, dir.path);
    std::vector<vidit::world::Frame> frames;
    for (const auto* rec : manifest.split(vidit::world::Split::Train)) {
      if (frames.size() >= 600) break;
      for (auto& f : vidit::world::load_clip(*rec, dir.path).frames) frames.push_back(std::move(f));
    }
    codebook = vidit::tok::fit_codebook(frames, k, 4, 3);
  }

  vidit::infer::ClipPool pool(vidit::world::Split s) const {
    return vidit::infer::make_pool(manifest, dir.path, s, codebook);
  }
};

inline vidit::model::ModelConfig micro_config(int vocab, int context_len = 1040) {
  vidit::model::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_mlp = 32;
  c.vocab = vocab;
  c.context_len = context_len;
  return c;
}

inline vidit::train::TrainConfig quick_train(int steps, int frames = 2) {
  vidit::train::TrainConfig t;
  t.total_steps = steps;
  t.batch_size = 4;
  t.frames_per_sequence = frames;
  t.peak_lr = 3e-3;
  t.warmup_steps = 20;
  t.eval_every = 50;
  t.val_sequences = 8;
  return t;
}

}  // namespace fixtures

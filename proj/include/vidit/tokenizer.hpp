#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vidit/worldgen.hpp"

namespace vidit::tok {

// Patch codebook: K code vectors of dimension patch*patch over a fixed frame
// geometry. Token ids 0..K-1 are codes; K is [bos] and K+1 is [eos].
class Codebook {
 public:
  Codebook() = default;
  Codebook(int patch, int height, int width, std::vector<float> codes);

  int size() const { return k_; }
  int dim() const { return patch_ * patch_; }
  int patch() const { return patch_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int grid_rows() const { return height_ / patch_; }
  int grid_cols() const { return width_ / patch_; }
  int tokens_per_frame() const { return grid_rows() * grid_cols(); }

  int vocab_size() const { return k_ + 2; }
  int bos_id() const { return k_; }
  int eos_id() const { return k_ + 1; }
  bool is_special(int id) const { return id >= k_; }

  std::span<const float> code(int i) const {
    return {codes_.data() + static_cast<size_t>(i) * dim(), static_cast<size_t>(dim())};
  }
  const std::vector<float>& codes() const { return codes_; }

  // "VICB" file bytes; the hash of these bytes identifies the codebook.
  std::vector<unsigned char> serialize() const;
  static Codebook deserialize(const std::vector<unsigned char>& bytes);
  uint64_t hash() const;

  void save(const std::filesystem::path& path) const;
  static Codebook load(const std::filesystem::path& path);

 private:
  int k_ = 0;
  int patch_ = 1;
  int height_ = world::kFrameSize;
  int width_ = world::kFrameSize;
  std::vector<float> codes_;
};

struct FitOptions {
  int max_iterations = 50;
  double tolerance = 1e-6;  // relative inertia change
};

struct FitReport {
  std::vector<double> inertia;  // after each assignment step
  int iterations = 0;
};

// Flattens every patch of every frame (raster order within a frame, frames in
// order) into one row-major patch matrix.
std::vector<float> extract_patches(std::span<const world::Frame> frames, int patch);

// k-means over patches with seeded k-means++ initialization.
Codebook fit_codebook(std::span<const world::Frame> frames, int k, int patch, uint64_t seed,
                      const FitOptions& opts = {}, FitReport* report = nullptr);

// Nearest code by L2, ties toward the lowest index.
int nearest_code(std::span<const float> patch, const Codebook& cb);

std::vector<int> encode_frame(const world::Frame& frame, const Codebook& cb);
world::Frame decode_tokens(std::span<const int> ids, const Codebook& cb);

struct TokenSequence {
  std::vector<int> ids;
  int tokens_per_frame = 0;
  bool has_bos = false;
  bool has_eos = false;

  // The frame tokens, excluding any specials.
  std::span<const int> body() const;
  int n_frames() const;
};

TokenSequence encode_frames(std::span<const world::Frame> frames, const Codebook& cb,
                            bool with_specials);
TokenSequence encode_clip(const world::VideoClip& clip, const Codebook& cb, bool with_specials);
std::vector<world::Frame> decode_clip(const TokenSequence& seq, const Codebook& cb);
// Decodes a raw body (no specials) whose length is a multiple of n_t.
std::vector<world::Frame> decode_body(std::span<const int> body, const Codebook& cb);

}  // namespace vidit::tok

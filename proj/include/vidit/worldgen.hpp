#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vidit::world {

inline constexpr int kFrameSize = 32;
inline constexpr int kNumClasses = 6;
inline constexpr int kMinClipFrames = 2;
inline constexpr int kMaxClipFrames = 32;

enum class Action : uint8_t { MoveLeft = 0, MoveRight, MoveUp, MoveDown, Grow, Shrink };

inline constexpr std::array<Action, kNumClasses> kAllActions = {
    Action::MoveLeft, Action::MoveRight, Action::MoveUp,
    Action::MoveDown, Action::Grow,      Action::Shrink};

// The contrastive partner of each class. An involution.
Action contrast(Action a);
std::string_view action_name(Action a);
std::optional<Action> action_from_name(std::string_view name);
inline int class_id(Action a) { return static_cast<int>(a); }
Action action_from_id(int id);  // throws InvalidArgument outside [0, kNumClasses)

// Single-channel intensity image, row-major, values in [0, 1].
struct Frame {
  int height = kFrameSize;
  int width = kFrameSize;
  std::vector<float> pixels;

  Frame() : pixels(static_cast<size_t>(height) * width, 0.0f) {}
  Frame(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w, 0.0f) {}

  float at(int r, int c) const { return pixels[static_cast<size_t>(r) * width + c]; }
  float& at(int r, int c) { return pixels[static_cast<size_t>(r) * width + c]; }

  bool operator==(const Frame&) const = default;
};

enum class Shape : uint8_t { Square = 0, Disc = 1 };

struct SpriteParams {
  Shape shape = Shape::Square;
  double start_x = 0;    // top-left corner of the bounding box at frame 0
  double start_y = 0;
  double size = 8;       // side length (square) or diameter (disc) at frame 0
  double intensity = 1;  // before 8-bit quantization
  double velocity = 0;   // px/frame along the motion axis (Move*)
  double scale_rate = 0; // fractional side change per frame (Grow/Shrink)
};

struct VideoClip {
  std::vector<Frame> frames;
  Action label = Action::MoveLeft;
  uint64_t seed = 0;
  SpriteParams sprite;
};

// Renders a clip whose sprite motion realizes `label`. Pure in its arguments.
VideoClip gen_clip(Action label, uint64_t seed, int n_frames);

struct MotionStats {
  std::vector<double> cx, cy, mass;  // per frame; centroid in pixel units
};

// Intensity-weighted centroid and mass of every frame. Empty frames report
// the frame center and zero mass.
MotionStats motion_stats(std::span<const Frame> frames);

// Analytic motion classifier. nullopt means Unknown (no signal above the
// noise floor). Requires at least two frames.
std::optional<Action> oracle_classify(std::span<const Frame> frames);

inline constexpr int kFeatureDim = 8;
using FeatureVector = std::array<double, kFeatureDim>;

// Per-clip summary used by the Frechet metric: mean centroid (x, y),
// last-minus-first displacement (x, y), signed size trend, mean mass and the
// variance of per-frame displacement steps (x, y).
FeatureVector oracle_features(std::span<const Frame> frames);

enum class Split : uint8_t { Train = 0, Val = 1, Test = 2 };
std::string_view split_name(Split s);

struct DatasetSpec {
  int n_per_class = 100;
  int n_frames = 16;
  uint64_t seed = 0;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

struct ClipRecord {
  int clip_id = 0;
  Action label = Action::MoveLeft;
  uint64_t seed = 0;
  int n_frames = 0;
  std::string file;
  Split split = Split::Train;
};

struct Manifest {
  DatasetSpec spec;
  int height = kFrameSize;
  int width = kFrameSize;
  std::string config_hash;
  std::vector<ClipRecord> clips;

  std::vector<const ClipRecord*> split(Split s) const;
  std::string to_json() const;
  static Manifest from_json(const std::string& text);
};

// Deterministic plan of every clip (ids, labels, seeds, splits) without
// rendering anything.
Manifest plan_dataset(const DatasetSpec& spec);

// Renders every clip, writes `dir/manifest.json` and `dir/clips/*.viml`.
Manifest gen_dataset(const DatasetSpec& spec, const std::filesystem::path& dir);

Manifest load_manifest(const std::filesystem::path& dir);
VideoClip load_clip(const ClipRecord& rec, const std::filesystem::path& dir);
// Rebuilds a clip from its record without touching the disk.
VideoClip regenerate_clip(const ClipRecord& rec);

// VIML container: 16-byte header ("VIML", u16 version, u16 n_frames, u16 H,
// u16 W, 4 reserved bytes) followed by u8 pixels, frame-major, row-major.
std::vector<unsigned char> encode_viml(std::span<const Frame> frames);
std::vector<Frame> decode_viml(const std::vector<unsigned char>& bytes);
void write_viml(const std::filesystem::path& path, std::span<const Frame> frames);
std::vector<Frame> read_viml(const std::filesystem::path& path);

}  // namespace vidit::world

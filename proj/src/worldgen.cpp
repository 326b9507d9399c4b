#include "vidit/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "vidit/binary_io.hpp"
#include "vidit/error.hpp"
#include "vidit/rng.hpp"
#include "vidit/version.hpp"

namespace vidit::world {

namespace {

constexpr double kMoveSpeed = 2.0;    // px per frame
constexpr double kScaleRate = 0.08;   // fraction of the initial side per frame
constexpr double kMinSide = 2.0;
constexpr int kUnclampedMoveFrames = 7;
constexpr int kDiscSupersample = 4;

// Noise floor below which the oracle reports Unknown.
constexpr double kMinDisplacement = 0.5;
constexpr double kMinMassChange = 0.02;
constexpr double kEmptyMass = 1e-9;

double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

Frame render(Shape shape, double x, double y, double side, double intensity) {
  Frame f;
  if (shape == Shape::Square) {
    for (int r = 0; r < f.height; ++r) {
      const double cov_y = overlap(r, r + 1, y, y + side);
      if (cov_y <= 0) continue;
      for (int c = 0; c < f.width; ++c) {
        const double cov_x = overlap(c, c + 1, x, x + side);
        if (cov_x > 0) f.at(r, c) = quantize(intensity * cov_x * cov_y);
      }
    }
    return f;
  }
  const double radius = side / 2.0;
  const double cx = x + radius;
  const double cy = y + radius;
  const double r2 = radius * radius;
  constexpr double step = 1.0 / kDiscSupersample;
  for (int r = 0; r < f.height; ++r) {
    for (int c = 0; c < f.width; ++c) {
      int inside = 0;
      for (int sy = 0; sy < kDiscSupersample; ++sy) {
        const double py = r + (sy + 0.5) * step - cy;
        for (int sx = 0; sx < kDiscSupersample; ++sx) {
          const double px = c + (sx + 0.5) * step - cx;
          if (px * px + py * py <= r2) ++inside;
        }
      }
      if (inside > 0) {
        f.at(r, c) = quantize(intensity * inside / double(kDiscSupersample * kDiscSupersample));
      }
    }
  }
  return f;
}

}  // namespace

Action contrast(Action a) {
  switch (a) {
    case Action::MoveLeft: return Action::MoveRight;
    case Action::MoveRight: return Action::MoveLeft;
    case Action::MoveUp: return Action::MoveDown;
    case Action::MoveDown: return Action::MoveUp;
    case Action::Grow: return Action::Shrink;
    case Action::Shrink: return Action::Grow;
  }
  throw InvalidArgument("bad action");
}

std::string_view action_name(Action a) {
  switch (a) {
    case Action::MoveLeft: return "MoveLeft";
    case Action::MoveRight: return "MoveRight";
    case Action::MoveUp: return "MoveUp";
    case Action::MoveDown: return "MoveDown";
    case Action::Grow: return "Grow";
    case Action::Shrink: return "Shrink";
  }
  return "?";
}

std::optional<Action> action_from_name(std::string_view name) {
  for (Action a : kAllActions) {
    if (action_name(a) == name) return a;
  }
  return std::nullopt;
}

Action action_from_id(int id) {
  if (id < 0 || id >= kNumClasses) {
    throw InvalidArgument("class id out of range: " + std::to_string(id));
  }
  return static_cast<Action>(id);
}

VideoClip gen_clip(Action label, uint64_t seed, int n_frames) {
  if (n_frames < kMinClipFrames || n_frames > kMaxClipFrames) {
    throw InvalidArgument("n_frames must be in [2, 32], got " + std::to_string(n_frames));
  }
  Rng rng = make_rng(seed);
  const double W = kFrameSize;

  SpriteParams sp;
  sp.shape = uniform_int(rng, 0, 1) == 0 ? Shape::Square : Shape::Disc;
  sp.size = static_cast<double>(uniform_int(rng, 6, 10));
  sp.intensity = 0.6 + 0.4 * uniform01(rng);

  const int max_pos = static_cast<int>(W - sp.size);
  const int room = static_cast<int>(kMoveSpeed) * std::min(n_frames - 1, kUnclampedMoveFrames);

  double dx = 0, dy = 0;
  switch (label) {
    case Action::MoveLeft: dx = -1; break;
    case Action::MoveRight: dx = 1; break;
    case Action::MoveUp: dy = -1; break;
    case Action::MoveDown: dy = 1; break;
    default: break;
  }

  const bool moving = dx != 0 || dy != 0;
  if (moving) {
    sp.velocity = kMoveSpeed;
    // Along the motion axis, leave room for the first frames to move freely.
    auto along = [&](double dir) -> double {
      return dir > 0 ? double(uniform_int(rng, 0, max_pos - room))
                     : double(uniform_int(rng, room, max_pos));
    };
    auto across = [&]() -> double { return double(uniform_int(rng, 0, max_pos)); };
    if (dx != 0) {
      sp.start_x = along(dx);
      sp.start_y = across();
    } else {
      sp.start_x = across();
      sp.start_y = along(dy);
    }
  } else {
    sp.scale_rate = label == Action::Grow ? kScaleRate : -kScaleRate;
    // Centers on the half-pixel grid so the initial sprite is pixel aligned.
    sp.start_x = double(uniform_int(rng, 0, max_pos));
    sp.start_y = double(uniform_int(rng, 0, max_pos));
  }

  VideoClip clip;
  clip.label = label;
  clip.seed = seed;
  clip.sprite = sp;
  clip.frames.reserve(n_frames);
  const double cx0 = sp.start_x + sp.size / 2;
  const double cy0 = sp.start_y + sp.size / 2;
  for (int t = 0; t < n_frames; ++t) {
    double side = sp.size;
    double x, y;
    if (moving) {
      x = std::clamp(sp.start_x + dx * sp.velocity * t, 0.0, W - side);
      y = std::clamp(sp.start_y + dy * sp.velocity * t, 0.0, W - side);
    } else {
      side = std::clamp(sp.size * (1.0 + sp.scale_rate * t), kMinSide, W);
      x = std::clamp(cx0 - side / 2, 0.0, W - side);
      y = std::clamp(cy0 - side / 2, 0.0, W - side);
    }
    clip.frames.push_back(render(sp.shape, x, y, side, sp.intensity));
  }
  return clip;
}

MotionStats motion_stats(std::span<const Frame> frames) {
  MotionStats s;
  s.cx.reserve(frames.size());
  s.cy.reserve(frames.size());
  s.mass.reserve(frames.size());
  for (const Frame& f : frames) {
    double m = 0, sx = 0, sy = 0;
    for (int r = 0; r < f.height; ++r) {
      for (int c = 0; c < f.width; ++c) {
        const double v = f.at(r, c);
        m += v;
        sx += v * (c + 0.5);
        sy += v * (r + 0.5);
      }
    }
    if (m > kEmptyMass) {
      s.cx.push_back(sx / m);
      s.cy.push_back(sy / m);
    } else {
      s.cx.push_back(f.width / 2.0);
      s.cy.push_back(f.height / 2.0);
    }
    s.mass.push_back(m);
  }
  return s;
}

std::optional<Action> oracle_classify(std::span<const Frame> frames) {
  if (frames.size() < 2) throw InvalidArgument("oracle_classify needs at least 2 frames");
  const MotionStats s = motion_stats(frames);
  const size_t last = frames.size() - 1;
  const double m0 = s.mass.front();
  const double m1 = s.mass[last];
  if (m0 <= kEmptyMass || m1 <= kEmptyMass) return std::nullopt;

  const double dx = s.cx[last] - s.cx.front();
  const double dy = s.cy[last] - s.cy.front();
  const double motion = std::max(std::abs(dx), std::abs(dy));
  const double rel_mass = (m1 - m0) / m0;
  if (motion < kMinDisplacement && std::abs(rel_mass) < kMinMassChange) return std::nullopt;

  // Compare the size trend in pixel units (side of an equal-mass square) with
  // the centroid displacement; a sprite pinned against a border while growing
  // shifts its centroid by at most half its side change.
  const double size_change = std::sqrt(m1) - std::sqrt(m0);
  if (std::abs(rel_mass) >= kMinMassChange && std::abs(size_change) > motion) {
    return size_change > 0 ? Action::Grow : Action::Shrink;
  }
  if (motion < kMinDisplacement) return std::nullopt;
  if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? Action::MoveRight : Action::MoveLeft;
  return dy > 0 ? Action::MoveDown : Action::MoveUp;
}

FeatureVector oracle_features(std::span<const Frame> frames) {
  if (frames.size() < 2) throw InvalidArgument("oracle_features needs at least 2 frames");
  const MotionStats s = motion_stats(frames);
  const size_t n = frames.size();
  FeatureVector f{};
  for (size_t i = 0; i < n; ++i) {
    f[0] += s.cx[i];
    f[1] += s.cy[i];
    f[5] += s.mass[i];
  }
  f[0] /= n;
  f[1] /= n;
  f[5] /= n;
  f[2] = s.cx[n - 1] - s.cx[0];
  f[3] = s.cy[n - 1] - s.cy[0];
  f[4] = std::sqrt(s.mass[n - 1]) - std::sqrt(s.mass[0]);
  double mx = 0, my = 0;
  for (size_t i = 1; i < n; ++i) {
    mx += s.cx[i] - s.cx[i - 1];
    my += s.cy[i] - s.cy[i - 1];
  }
  mx /= (n - 1);
  my /= (n - 1);
  for (size_t i = 1; i < n; ++i) {
    const double ex = s.cx[i] - s.cx[i - 1] - mx;
    const double ey = s.cy[i] - s.cy[i - 1] - my;
    f[6] += ex * ex;
    f[7] += ey * ey;
  }
  f[6] /= (n - 1);
  f[7] /= (n - 1);
  return f;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

namespace {

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw IoError("unknown split in manifest: " + s);
}

nlohmann::ordered_json spec_json(const DatasetSpec& spec) {
  nlohmann::ordered_json j;
  j["n_per_class"] = spec.n_per_class;
  j["n_frames"] = spec.n_frames;
  j["seed"] = spec.seed;
  j["val_fraction"] = spec.val_fraction;
  j["test_fraction"] = spec.test_fraction;
  return j;
}

std::string clip_file(int clip_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clips/clip_%06d.viml", clip_id);
  return buf;
}

}  // namespace

std::vector<const ClipRecord*> Manifest::split(Split s) const {
  std::vector<const ClipRecord*> out;
  for (const auto& c : clips) {
    if (c.split == s) out.push_back(&c);
  }
  return out;
}

std::string Manifest::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "vidit-dataset";
  j["version"] = 1;
  j["tool_version"] = kToolVersion;
  j["config_hash"] = config_hash;
  j["spec"] = spec_json(spec);
  j["height"] = height;
  j["width"] = width;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& c : clips) {
    nlohmann::ordered_json e;
    e["clip_id"] = c.clip_id;
    e["class_id"] = class_id(c.label);
    e["seed"] = c.seed;
    e["n_frames"] = c.n_frames;
    e["file"] = c.file;
    e["split"] = split_name(c.split);
    arr.push_back(std::move(e));
  }
  j["clips"] = std::move(arr);
  return j.dump(2) + "\n";
}

Manifest Manifest::from_json(const std::string& text) {
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    const auto& s = j.at("spec");
    m.spec.n_per_class = s.at("n_per_class").get<int>();
    m.spec.n_frames = s.at("n_frames").get<int>();
    m.spec.seed = s.at("seed").get<uint64_t>();
    m.spec.val_fraction = s.at("val_fraction").get<double>();
    m.spec.test_fraction = s.at("test_fraction").get<double>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& e : j.at("clips")) {
      ClipRecord c;
      c.clip_id = e.at("clip_id").get<int>();
      c.label = action_from_id(e.at("class_id").get<int>());
      c.seed = e.at("seed").get<uint64_t>();
      c.n_frames = e.at("n_frames").get<int>();
      c.file = e.at("file").get<std::string>();
      c.split = split_from_name(e.at("split").get<std::string>());
      m.clips.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed dataset manifest: ") + e.what());
  }
  return m;
}

Manifest plan_dataset(const DatasetSpec& spec) {
  if (spec.n_per_class < 10) throw InvalidArgument("n_per_class must be >= 10");
  if (spec.n_frames < kMinClipFrames || spec.n_frames > kMaxClipFrames) {
    throw InvalidArgument("n_frames must be in [2, 32]");
  }
  if (spec.val_fraction < 0 || spec.test_fraction < 0 ||
      spec.val_fraction + spec.test_fraction >= 1.0) {
    throw InvalidArgument("split fractions must be non-negative and sum below 1");
  }
  const int n_val = std::max(1, static_cast<int>(std::lround(spec.n_per_class * spec.val_fraction)));
  const int n_test = std::max(1, static_cast<int>(std::lround(spec.n_per_class * spec.test_fraction)));
  const int n_train = spec.n_per_class - n_val - n_test;
  if (n_train < 1) throw InvalidArgument("split fractions leave no training clips");

  Manifest m;
  m.spec = spec;
  m.config_hash = hash_hex(fnv1a(spec_json(spec).dump()));
  for (int i = 0; i < spec.n_per_class; ++i) {
    const Split split = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
    for (Action a : kAllActions) {
      ClipRecord c;
      c.clip_id = static_cast<int>(m.clips.size());
      c.label = a;
      c.seed = substream(spec.seed, "clip", static_cast<uint64_t>(c.clip_id));
      c.n_frames = spec.n_frames;
      c.file = clip_file(c.clip_id);
      c.split = split;
      m.clips.push_back(std::move(c));
    }
  }
  return m;
}

Manifest gen_dataset(const DatasetSpec& spec, const std::filesystem::path& dir) {
  Manifest m = plan_dataset(spec);
  try {
    std::filesystem::create_directories(dir / "clips");
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(e.what());
  }
  for (const auto& c : m.clips) {
    write_viml(dir / c.file, regenerate_clip(c).frames);
  }
  io::write_text(dir / "manifest.json", m.to_json());
  return m;
}

Manifest load_manifest(const std::filesystem::path& dir) {
  return Manifest::from_json(io::read_text(dir / "manifest.json"));
}

VideoClip regenerate_clip(const ClipRecord& rec) {
  return gen_clip(rec.label, rec.seed, rec.n_frames);
}

VideoClip load_clip(const ClipRecord& rec, const std::filesystem::path& dir) {
  VideoClip clip;
  clip.frames = read_viml(dir / rec.file);
  if (static_cast<int>(clip.frames.size()) != rec.n_frames) {
    throw IoError("frame count mismatch in " + rec.file);
  }
  clip.label = rec.label;
  clip.seed = rec.seed;
  return clip;
}

std::vector<unsigned char> encode_viml(std::span<const Frame> frames) {
  if (frames.empty()) throw InvalidArgument("cannot encode an empty clip");
  const int h = frames[0].height;
  const int w = frames[0].width;
  io::ByteWriter out;
  out.str("VIML");
  out.u16(1);
  out.u16(static_cast<uint16_t>(frames.size()));
  out.u16(static_cast<uint16_t>(h));
  out.u16(static_cast<uint16_t>(w));
  out.u32(0);
  for (const Frame& f : frames) {
    if (f.height != h || f.width != w) throw InvalidArgument("frames differ in size");
    for (float v : f.pixels) {
      out.u8(static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    }
  }
  return std::move(out.buffer());
}

std::vector<Frame> decode_viml(const std::vector<unsigned char>& bytes) {
  io::ByteReader in(bytes);
  if (in.str(4) != "VIML") throw IoError("not a VIML file");
  const uint16_t version = in.u16();
  if (version != 1) throw IoError("unsupported VIML version " + std::to_string(version));
  const int n = in.u16();
  const int h = in.u16();
  const int w = in.u16();
  in.u32();
  if (in.remaining() != static_cast<size_t>(n) * h * w) throw IoError("VIML payload size mismatch");
  std::vector<Frame> frames;
  frames.reserve(n);
  for (int i = 0; i < n; ++i) {
    Frame f(h, w);
    for (auto& v : f.pixels) v = static_cast<float>(in.u8()) / 255.0f;
    frames.push_back(std::move(f));
  }
  return frames;
}

void write_viml(const std::filesystem::path& path, std::span<const Frame> frames) {
  io::write_file(path, encode_viml(frames));
}

std::vector<Frame> read_viml(const std::filesystem::path& path) {
  return decode_viml(io::read_file(path));
}

}  // namespace vidit::world

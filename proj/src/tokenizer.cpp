#include "vidit/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vidit/binary_io.hpp"
#include "vidit/error.hpp"
#include "vidit/rng.hpp"

namespace vidit::tok {

Codebook::Codebook(int patch, int height, int width, std::vector<float> codes)
    : patch_(patch), height_(height), width_(width), codes_(std::move(codes)) {
  if (patch < 1 || height % patch != 0 || width % patch != 0) {
    throw InvalidArgument("patch size must divide the frame dimensions");
  }
  const size_t d = static_cast<size_t>(patch) * patch;
  if (codes_.empty() || codes_.size() % d != 0) throw InvalidArgument("code storage size mismatch");
  k_ = static_cast<int>(codes_.size() / d);
  if (k_ < 1) throw InvalidArgument("codebook needs at least one code");
  for (float v : codes_) {
    if (!std::isfinite(v)) throw InvalidArgument("codebook contains non-finite values");
  }
}

std::vector<unsigned char> Codebook::serialize() const {
  io::ByteWriter out;
  out.str("VICB");
  out.u16(1);
  out.u32(static_cast<uint32_t>(k_));
  out.u32(static_cast<uint32_t>(dim()));
  out.u32(static_cast<uint32_t>(patch_));
  out.u32(static_cast<uint32_t>(height_));
  out.u32(static_cast<uint32_t>(width_));
  for (float v : codes_) out.f32(v);
  return std::move(out.buffer());
}

Codebook Codebook::deserialize(const std::vector<unsigned char>& bytes) {
  io::ByteReader in(bytes);
  if (in.str(4) != "VICB") throw IoError("not a VICB codebook file");
  if (in.u16() != 1) throw IoError("unsupported codebook version");
  const uint32_t k = in.u32();
  const uint32_t dim = in.u32();
  const uint32_t patch = in.u32();
  const uint32_t h = in.u32();
  const uint32_t w = in.u32();
  if (dim != patch * patch) throw IoError("codebook dim does not match patch size");
  if (in.remaining() != static_cast<size_t>(k) * dim * sizeof(float)) {
    throw IoError("codebook payload size mismatch");
  }
  std::vector<float> codes(static_cast<size_t>(k) * dim);
  for (auto& v : codes) v = in.f32();
  return Codebook(static_cast<int>(patch), static_cast<int>(h), static_cast<int>(w), std::move(codes));
}

uint64_t Codebook::hash() const { return fnv1a(serialize()); }

void Codebook::save(const std::filesystem::path& path) const { io::write_file(path, serialize()); }

Codebook Codebook::load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

std::vector<float> extract_patches(std::span<const world::Frame> frames, int patch) {
  std::vector<float> out;
  if (frames.empty()) return out;
  const int h = frames[0].height;
  const int w = frames[0].width;
  if (patch < 1 || h % patch != 0 || w % patch != 0) {
    throw InvalidArgument("patch size must divide the frame dimensions");
  }
  out.reserve(frames.size() * static_cast<size_t>(h) * w);
  for (const auto& f : frames) {
    if (f.height != h || f.width != w) throw InvalidArgument("frames differ in size");
    for (int gr = 0; gr < h / patch; ++gr) {
      for (int gc = 0; gc < w / patch; ++gc) {
        for (int r = 0; r < patch; ++r) {
          for (int c = 0; c < patch; ++c) out.push_back(f.at(gr * patch + r, gc * patch + c));
        }
      }
    }
  }
  return out;
}

namespace {

double sq_dist(const float* a, const double* c, int d) {
  double s = 0;
  for (int i = 0; i < d; ++i) {
    const double e = double(a[i]) - c[i];
    s += e * e;
  }
  return s;
}

struct UniquePatches {
  std::vector<float> rows;
  std::vector<double> weight;
  size_t count() const { return weight.size(); }
};

// Collapses duplicate patches into weighted rows, ordered lexicographically.
UniquePatches dedupe(const std::vector<float>& patches, int d) {
  const size_t n = patches.size() / d;
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto row = [&](size_t i) { return patches.data() + i * d; };
  auto less = [&](size_t a, size_t b) {
    return std::lexicographical_compare(row(a), row(a) + d, row(b), row(b) + d);
  };
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (less(a, b)) return true;
    if (less(b, a)) return false;
    return a < b;
  });
  UniquePatches u;
  for (size_t i = 0; i < n; ++i) {
    const float* r = row(order[i]);
    if (!u.weight.empty() && std::equal(r, r + d, u.rows.end() - d)) {
      u.weight.back() += 1.0;
      continue;
    }
    u.rows.insert(u.rows.end(), r, r + d);
    u.weight.push_back(1.0);
  }
  return u;
}

size_t sample_weighted(Rng& rng, const std::vector<double>& w, double total) {
  const double target = uniform01(rng) * total;
  double acc = 0;
  for (size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (target < acc && w[i] > 0) return i;
  }
  // Rounding can leave target at the very top; take the last positive entry.
  for (size_t i = w.size(); i-- > 0;) {
    if (w[i] > 0) return i;
  }
  return 0;
}

}  // namespace

Codebook fit_codebook(std::span<const world::Frame> frames, int k, int patch, uint64_t seed,
                      const FitOptions& opts, FitReport* report) {
  if (k < 1) throw InvalidArgument("K must be positive");
  if (frames.empty()) throw InvalidArgument("no frames to fit");
  const int d = patch * patch;
  const UniquePatches u = dedupe(extract_patches(frames, patch), d);
  const size_t n = u.count();
  if (n < static_cast<size_t>(k)) {
    throw InvalidArgument("only " + std::to_string(n) + " distinct patches for K=" + std::to_string(k));
  }

  Rng rng = make_rng(seed);
  std::vector<double> centers(static_cast<size_t>(k) * d);
  auto center = [&](int c) { return centers.data() + static_cast<size_t>(c) * d; };
  auto point = [&](size_t i) { return u.rows.data() + i * d; };

  // k-means++ seeding over weighted unique patches.
  const double total_w = std::accumulate(u.weight.begin(), u.weight.end(), 0.0);
  size_t first = sample_weighted(rng, u.weight, total_w);
  std::copy(point(first), point(first) + d, center(0));
  std::vector<double> best(n);
  std::vector<double> prob(n);
  for (size_t i = 0; i < n; ++i) best[i] = sq_dist(point(i), center(0), d);
  for (int c = 1; c < k; ++c) {
    double total = 0;
    for (size_t i = 0; i < n; ++i) {
      prob[i] = u.weight[i] * best[i];
      total += prob[i];
    }
    // total > 0 because at least k distinct points exist.
    const size_t pick = sample_weighted(rng, prob, total);
    std::copy(point(pick), point(pick) + d, center(c));
    for (size_t i = 0; i < n; ++i) best[i] = std::min(best[i], sq_dist(point(i), center(c), d));
  }

  // Lloyd iterations.
  std::vector<int> assign(n, 0);
  std::vector<double> sums(centers.size());
  std::vector<double> mass(k);
  FitReport rep;
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < opts.max_iterations; ++it) {
    double inertia = 0;
    for (size_t i = 0; i < n; ++i) {
      int arg = 0;
      double bd = sq_dist(point(i), center(0), d);
      for (int c = 1; c < k; ++c) {
        const double dd = sq_dist(point(i), center(c), d);
        if (dd < bd) {
          bd = dd;
          arg = c;
        }
      }
      assign[i] = arg;
      inertia += u.weight[i] * bd;
    }
    rep.inertia.push_back(inertia);
    rep.iterations = it + 1;

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(mass.begin(), mass.end(), 0.0);
    for (size_t i = 0; i < n; ++i) {
      double* s = sums.data() + static_cast<size_t>(assign[i]) * d;
      for (int j = 0; j < d; ++j) s[j] += u.weight[i] * point(i)[j];
      mass[assign[i]] += u.weight[i];
    }
    for (int c = 0; c < k; ++c) {
      if (mass[c] <= 0) continue;  // empty cluster keeps its center
      for (int j = 0; j < d; ++j) center(c)[j] = sums[static_cast<size_t>(c) * d + j] / mass[c];
    }

    if (inertia == 0.0) break;
    if (std::isfinite(prev) && (prev - inertia) / prev < opts.tolerance) break;
    prev = inertia;
  }
  if (report) *report = std::move(rep);

  const int h = frames[0].height;
  const int w = frames[0].width;
  return Codebook(patch, h, w, std::vector<float>(centers.begin(), centers.end()));
}

int nearest_code(std::span<const float> patch, const Codebook& cb) {
  const int d = cb.dim();
  int arg = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (int c = 0; c < cb.size(); ++c) {
    const float* code = cb.code(c).data();
    double s = 0;
    for (int j = 0; j < d; ++j) {
      const double e = double(patch[j]) - double(code[j]);
      s += e * e;
    }
    if (s < bd) {
      bd = s;
      arg = c;
    }
  }
  return arg;
}

std::vector<int> encode_frame(const world::Frame& frame, const Codebook& cb) {
  if (frame.height != cb.height() || frame.width != cb.width()) {
    throw InvalidArgument("frame geometry does not match the codebook");
  }
  const int p = cb.patch();
  std::vector<float> buf(cb.dim());
  std::vector<int> ids;
  ids.reserve(cb.tokens_per_frame());
  for (int gr = 0; gr < cb.grid_rows(); ++gr) {
    for (int gc = 0; gc < cb.grid_cols(); ++gc) {
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < p; ++c) buf[r * p + c] = frame.at(gr * p + r, gc * p + c);
      }
      ids.push_back(nearest_code(buf, cb));
    }
  }
  return ids;
}

world::Frame decode_tokens(std::span<const int> ids, const Codebook& cb) {
  if (static_cast<int>(ids.size()) != cb.tokens_per_frame()) {
    throw InvalidArgument("expected " + std::to_string(cb.tokens_per_frame()) + " tokens per frame");
  }
  const int p = cb.patch();
  world::Frame f(cb.height(), cb.width());
  for (int j = 0; j < cb.tokens_per_frame(); ++j) {
    const int id = ids[j];
    if (id < 0 || id >= cb.size()) throw InvalidArgument("token id is not a code: " + std::to_string(id));
    const int gr = j / cb.grid_cols();
    const int gc = j % cb.grid_cols();
    const auto code = cb.code(id);
    for (int r = 0; r < p; ++r) {
      for (int c = 0; c < p; ++c) f.at(gr * p + r, gc * p + c) = std::clamp(code[r * p + c], 0.0f, 1.0f);
    }
  }
  return f;
}

std::span<const int> TokenSequence::body() const {
  const size_t start = has_bos ? 1 : 0;
  const size_t end = ids.size() - (has_eos ? 1 : 0);
  return std::span<const int>(ids).subspan(start, end - start);
}

int TokenSequence::n_frames() const {
  return tokens_per_frame > 0 ? static_cast<int>(body().size()) / tokens_per_frame : 0;
}

TokenSequence encode_frames(std::span<const world::Frame> frames, const Codebook& cb,
                            bool with_specials) {
  TokenSequence seq;
  seq.tokens_per_frame = cb.tokens_per_frame();
  seq.has_bos = seq.has_eos = with_specials;
  seq.ids.reserve(frames.size() * seq.tokens_per_frame + 2);
  if (with_specials) seq.ids.push_back(cb.bos_id());
  for (const auto& f : frames) {
    const auto ids = encode_frame(f, cb);
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  }
  if (with_specials) seq.ids.push_back(cb.eos_id());
  return seq;
}

TokenSequence encode_clip(const world::VideoClip& clip, const Codebook& cb, bool with_specials) {
  return encode_frames(clip.frames, cb, with_specials);
}

std::vector<world::Frame> decode_body(std::span<const int> body, const Codebook& cb) {
  const size_t nt = static_cast<size_t>(cb.tokens_per_frame());
  if (body.size() % nt != 0) throw InvalidArgument("body length is not a multiple of n_t");
  std::vector<world::Frame> frames;
  for (size_t off = 0; off < body.size(); off += nt) {
    frames.push_back(decode_tokens(body.subspan(off, nt), cb));
  }
  return frames;
}

std::vector<world::Frame> decode_clip(const TokenSequence& seq, const Codebook& cb) {
  if (seq.has_bos && (seq.ids.empty() || seq.ids.front() != cb.bos_id())) {
    throw InvalidArgument("sequence does not start with bos");
  }
  if (seq.has_eos && (seq.ids.empty() || seq.ids.back() != cb.eos_id())) {
    throw InvalidArgument("sequence does not end with eos");
  }
  return decode_body(seq.body(), cb);
}

}  // namespace vidit::tok

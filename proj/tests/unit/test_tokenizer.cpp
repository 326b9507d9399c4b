#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "vidit/error.hpp"
#include "vidit/rng.hpp"
#include "vidit/tokenizer.hpp"

using namespace vidit;
using namespace vidit::tok;
using world::Frame;

namespace {

// Exhaustive nearest neighbour, written independently of the tokenizer.
int brute_nearest(const std::vector<float>& patch, const Codebook& cb) {
  int best = -1;
  double bd = std::numeric_limits<double>::infinity();
  for (int k = 0; k < cb.size(); ++k) {
    double s = 0;
    for (int j = 0; j < cb.dim(); ++j) {
      const double e = double(patch[j]) - double(cb.codes()[k * cb.dim() + j]);
      s += e * e;
    }
    if (s < bd) {
      bd = s;
      best = k;
    }
  }
  return best;
}

std::vector<Frame> sample_frames(int n_clips, uint64_t seed, int n_frames = 8) {
  std::vector<Frame> out;
  Rng rng = make_rng(seed);
  for (int i = 0; i < n_clips; ++i) {
    const auto a = world::kAllActions[uniform_int(rng, 0, 5)];
    auto clip = world::gen_clip(a, rng(), n_frames);
    for (auto& f : clip.frames) out.push_back(std::move(f));
  }
  return out;
}

Frame random_frame(Rng& rng) {
  Frame f;
  for (auto& v : f.pixels) v = static_cast<float>(uniform01(rng));
  return f;
}

Codebook random_codebook(int k, int p, Rng& rng) {
  std::vector<float> codes(static_cast<size_t>(k) * p * p);
  for (auto& v : codes) v = static_cast<float>(uniform01(rng));
  return Codebook(p, 32, 32, codes);
}

}  // namespace

TEST_CASE("codebook geometry and special ids") {
  Rng rng = make_rng(1);
  const Codebook cb = random_codebook(512, 4, rng);
  CHECK(cb.tokens_per_frame() == 64);
  CHECK(cb.vocab_size() == 514);
  CHECK(cb.bos_id() == 512);
  CHECK(cb.eos_id() == 513);
  CHECK_THROWS_AS(Codebook(3, 32, 32, std::vector<float>(9 * 4)), InvalidArgument);
  std::vector<float> bad(16, 0.0f);
  bad[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(Codebook(4, 32, 32, bad), InvalidArgument);
}

TEST_CASE("fit with K=1 yields the mean patch") {
  const auto frames = sample_frames(3, 2, 4);
  const auto patches = extract_patches(frames, 4);
  const size_t n = patches.size() / 16;
  std::vector<double> mean(16, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (int j = 0; j < 16; ++j) mean[j] += patches[i * 16 + j];
  const Codebook cb = fit_codebook(frames, 1, 4, 3);
  for (int j = 0; j < 16; ++j) CHECK(cb.code(0)[j] == doctest::Approx(mean[j] / n).epsilon(1e-6));
}

TEST_CASE("fit with K = number of distinct patches gives zero quantization error") {
  const auto frames = sample_frames(2, 4, 3);
  const auto patches = extract_patches(frames, 4);
  std::set<std::vector<float>> distinct;
  for (size_t i = 0; i < patches.size() / 16; ++i)
    distinct.insert(std::vector<float>(patches.begin() + i * 16, patches.begin() + (i + 1) * 16));
  const int k = static_cast<int>(distinct.size());
  FitReport rep;
  const Codebook cb = fit_codebook(frames, k, 4, 9, {}, &rep);
  CHECK(rep.inertia.back() == 0.0);
  for (const auto& f : frames) CHECK(decode_tokens(encode_frame(f, cb), cb).pixels == f.pixels);
  CHECK_THROWS_AS(fit_codebook(frames, k + 1, 4, 9), InvalidArgument);
}

TEST_CASE("Lloyd inertia is non-increasing and matches brute-force recomputation") {
  const auto frames = sample_frames(12, 5);
  FitReport rep;
  FitOptions opts;
  opts.tolerance = 0;  // run all iterations
  opts.max_iterations = 12;
  const Codebook cb = fit_codebook(frames, 24, 4, 17, opts, &rep);
  REQUIRE(rep.inertia.size() == 12);
  for (size_t i = 1; i < rep.inertia.size(); ++i) CHECK(rep.inertia[i] <= rep.inertia[i - 1] * (1 + 1e-12));

  // Brute-force inertia for the final codebook must not exceed the last
  // recorded value (one more update step can only lower it).
  const auto patches = extract_patches(frames, 4);
  double inertia = 0;
  for (size_t i = 0; i < patches.size() / 16; ++i) {
    std::vector<float> p(patches.begin() + i * 16, patches.begin() + (i + 1) * 16);
    const int k = brute_nearest(p, cb);
    for (int j = 0; j < 16; ++j) {
      const double e = double(p[j]) - double(cb.code(k)[j]);
      inertia += e * e;
    }
  }
  CHECK(inertia <= rep.inertia.back() * (1 + 1e-6));
}

TEST_CASE("fit is deterministic in its seed") {
  const auto frames = sample_frames(6, 6);
  CHECK(fit_codebook(frames, 16, 4, 1).codes() == fit_codebook(frames, 16, 4, 1).codes());
  CHECK(fit_codebook(frames, 16, 4, 1).codes() != fit_codebook(frames, 16, 4, 2).codes());
}

TEST_CASE("encode_frame edge cases") {
  std::vector<float> codes(8 * 16);
  Rng rng = make_rng(3);
  for (size_t i = 16; i < codes.size(); ++i) codes[i] = static_cast<float>(0.1 + uniform01(rng));
  const Codebook cb(4, 32, 32, codes);

  SUBCASE("all-zero frame maps to code 0") {
    const auto ids = encode_frame(Frame(), cb);
    CHECK(ids == std::vector<int>(64, 0));
  }
  SUBCASE("frame tiled from code 5 maps to 5 everywhere") {
    const Frame f = decode_tokens(std::vector<int>(64, 5), cb);
    CHECK(encode_frame(f, cb) == std::vector<int>(64, 5));
  }
  SUBCASE("ties go to the lowest index") {
    std::vector<float> dup(3 * 16, 0.5f);
    const Codebook tie(4, 32, 32, dup);
    CHECK(encode_frame(Frame(), tie) == std::vector<int>(64, 0));
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(encode_frame(Frame(16, 16), cb), InvalidArgument);
  }
}

TEST_CASE("encode matches brute-force nearest neighbour on random patches") {
  Rng rng = make_rng(8);
  const Codebook cb = random_codebook(64, 4, rng);
  for (int i = 0; i < 20; ++i) {
    const Frame f = random_frame(rng);
    const auto ids = encode_frame(f, cb);
    const auto patches = extract_patches(std::span(&f, 1), 4);
    for (int j = 0; j < 64; ++j) {
      std::vector<float> p(patches.begin() + j * 16, patches.begin() + (j + 1) * 16);
      CHECK(ids[j] == brute_nearest(p, cb));
    }
  }
}

TEST_CASE("raster order: a single lit patch lands at index row * cols + col") {
  std::vector<float> codes(2 * 16, 0.0f);
  std::fill(codes.begin() + 16, codes.end(), 1.0f);
  const Codebook cb(4, 32, 32, codes);
  for (int gr : {0, 3, 7}) {
    for (int gc : {0, 5, 7}) {
      Frame f;
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) f.at(gr * 4 + r, gc * 4 + c) = 1.0f;
      const auto ids = encode_frame(f, cb);
      for (int j = 0; j < 64; ++j) CHECK(ids[j] == (j == gr * 8 + gc ? 1 : 0));
    }
  }
}

TEST_CASE("decode_tokens") {
  Rng rng = make_rng(4);
  const Codebook cb = random_codebook(16, 4, rng);
  SUBCASE("all zeros tiles code 0") {
    const Frame f = decode_tokens(std::vector<int>(64, 0), cb);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) CHECK(f.at(r, c) == cb.code(0)[(r % 4) * 4 + c % 4]);
  }
  SUBCASE("decode(encode(f)) is exact for frames tiled from codes") {
    std::vector<int> ids(64);
    for (auto& id : ids) id = static_cast<int>(uniform_int(rng, 0, 15));
    const Frame f = decode_tokens(ids, cb);
    CHECK(decode_tokens(encode_frame(f, cb), cb).pixels == f.pixels);
  }
  SUBCASE("special ids and wrong lengths are rejected") {
    std::vector<int> ids(64, 0);
    ids[10] = cb.bos_id();
    CHECK_THROWS_AS(decode_tokens(ids, cb), InvalidArgument);
    CHECK_THROWS_AS(decode_tokens(std::vector<int>(63, 0), cb), InvalidArgument);
  }
  SUBCASE("clamps to [0, 1]") {
    std::vector<float> codes(16, 2.0f);
    codes[0] = -1.0f;
    const Codebook c(4, 32, 32, codes);
    const Frame f = decode_tokens(std::vector<int>(64, 0), c);
    CHECK(f.at(0, 0) == 0.0f);
    CHECK(f.at(0, 1) == 1.0f);
  }
}

TEST_CASE("reconstruction MSE equals brute-force reconstruction") {
  const auto train = sample_frames(20, 12);
  const Codebook cb = fit_codebook(train, 64, 4, 1);
  const auto held = sample_frames(4, 13);
  for (const auto& f : held) {
    const Frame rec = decode_tokens(encode_frame(f, cb), cb);
    double mse = 0, ref = 0;
    const auto patches = extract_patches(std::span(&f, 1), 4);
    for (int j = 0; j < 64; ++j) {
      std::vector<float> p(patches.begin() + j * 16, patches.begin() + (j + 1) * 16);
      const auto code = cb.code(brute_nearest(p, cb));
      for (int i = 0; i < 16; ++i) {
        const double e = double(p[i]) - std::clamp(double(code[i]), 0.0, 1.0);
        ref += e * e;
      }
    }
    for (size_t i = 0; i < f.pixels.size(); ++i) {
      const double e = double(f.pixels[i]) - double(rec.pixels[i]);
      mse += e * e;
    }
    CHECK(mse / 1024 == doctest::Approx(ref / 1024).epsilon(1e-9));
  }
}

TEST_CASE("clip sequences: layout, lengths and decoding") {
  Rng rng = make_rng(21);
  const Codebook cb = random_codebook(512, 4, rng);
  const auto clip = world::gen_clip(world::Action::MoveLeft, 3, 16);
  const TokenSequence seq = encode_clip(clip, cb, true);
  CHECK(seq.body().size() == 1024);
  CHECK(seq.ids.size() == 1026);
  CHECK(seq.ids.front() == cb.bos_id());
  CHECK(seq.ids.back() == cb.eos_id());
  for (int id : seq.body()) CHECK((id >= 0 && id < 512));
  CHECK(seq.n_frames() == 16);

  const TokenSequence bare = encode_clip(clip, cb, false);
  CHECK(bare.ids.size() == 1024);
  CHECK(std::equal(bare.ids.begin(), bare.ids.end(), seq.body().begin()));

  const auto one = encode_frames(std::span(clip.frames.data(), 1), cb, false);
  CHECK(one.body().size() == 64);

  const auto frames = decode_clip(seq, cb);
  REQUIRE(frames.size() == 16);
  for (size_t t = 0; t < 16; ++t) CHECK(frames[t].pixels == decode_tokens(encode_frame(clip.frames[t], cb), cb).pixels);

  TokenSequence broken = bare;
  broken.ids.pop_back();
  CHECK_THROWS_AS(decode_clip(broken, cb), InvalidArgument);
}

TEST_CASE("large-frame arithmetic: 16 frames at 256 tokens per frame") {
  // A 256x256 frame at 16x compression is a 16x16 grid.
  std::vector<float> codes(2 * 16 * 16, 0.0f);
  const Codebook cb(16, 256, 256, codes);
  CHECK(cb.tokens_per_frame() == 256);
  std::vector<Frame> frames(16, Frame(256, 256));
  CHECK(encode_frames(frames, cb, false).body().size() == 4096);
}

TEST_CASE("codebook file round trip") {
  Rng rng = make_rng(2);
  const Codebook cb = random_codebook(32, 4, rng);
  const auto bytes = cb.serialize();
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "VICB");
  const Codebook back = Codebook::deserialize(bytes);
  CHECK(back.codes() == cb.codes());
  CHECK(back.serialize() == bytes);
  CHECK(back.hash() == cb.hash());
  auto bad = bytes;
  bad.resize(bad.size() - 3);
  CHECK_THROWS_AS(Codebook::deserialize(bad), IoError);
}

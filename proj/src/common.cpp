#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "vidit/binary_io.hpp"
#include "vidit/error.hpp"
#include "vidit/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace vidit {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kIoError: return "io-error";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kConfigError: return "config-error";
    case ErrorKind::kTrainingFailure: return "training-failure";
  }
  return "unknown";
}

uint64_t fnv1a(std::span<const unsigned char> bytes, uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a(std::string_view text, uint64_t h) {
  return fnv1a(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()), h);
}

std::string hash_hex(uint64_t h) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = kDigits[h & 0xf];
    h >>= 4;
  }
  return out;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t substream(uint64_t root_seed, std::string_view name) {
  return splitmix64(root_seed ^ fnv1a(name));
}

uint64_t substream(uint64_t root_seed, std::string_view name, uint64_t index) {
  return splitmix64(substream(root_seed, name) + splitmix64(index));
}

double uniform01(Rng& rng) {
  // 53 random bits -> [0, 1)
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) {
  if (hi < lo) throw InvalidArgument("uniform_int: empty range");
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<int64_t>(rng());
  // Rejection sampling removes modulo bias.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return lo + static_cast<int64_t>(r % span);
}

double normal(Rng& rng) {
  // Box-Muller; one draw per call keeps the stream position easy to reason about.
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

namespace io {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFound("no such file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& data) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<unsigned char>(text.begin(), text.end()));
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

}  // namespace io
}  // namespace vidit

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>

namespace vidit {

// 64-bit FNV-1a. Used for config hashes, artifact hashes and substream names.
constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

uint64_t fnv1a(std::span<const unsigned char> bytes, uint64_t h = kFnvOffset);
uint64_t fnv1a(std::string_view text, uint64_t h = kFnvOffset);
std::string hash_hex(uint64_t h);

uint64_t splitmix64(uint64_t x);

// Derives an independent seed for a named stage ("data", "init", "sampling",
// "probe", ...) from the run's root seed.
uint64_t substream(uint64_t root_seed, std::string_view name);
uint64_t substream(uint64_t root_seed, std::string_view name, uint64_t index);

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(splitmix64(seed)); }

// Distribution helpers with a fixed algorithm, so results do not depend on the
// standard library's distribution implementations.
double uniform01(Rng& rng);
int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi);  // inclusive bounds
double normal(Rng& rng);

}  // namespace vidit

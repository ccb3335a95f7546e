#pragma once

#include <cstdint>
#include <string_view>

// Platform-independent hashing used everywhere determinism matters:
// word-to-token mapping, pseudo-codec audio tokens, and per-stage seed
// derivation. std::hash is implementation-defined, so never use it here.

namespace duplex {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

inline std::uint64_t fnv1a64(std::string_view data,
                             std::uint64_t h = kFnvOffset) {
  for (unsigned char c : data) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::uint64_t value, std::uint64_t h = kFnvOffset) {
  for (int i = 0; i < 8; ++i) {
    h ^= (value >> (8 * i)) & 0xffu;
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Fans a global seed out to an independent per-stage / per-item seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return splitmix64(fnv1a64(label, fnv1a64(seed)));
}

/// Maps a hash to a double in [-1, 1).
inline double unit_double(std::uint64_t h) {
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

}  // namespace duplex

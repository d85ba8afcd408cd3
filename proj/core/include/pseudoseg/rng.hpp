#pragma once

#include <cstdint>
#include <random>

namespace pseudoseg {

// All randomness flows through explicitly seeded engines. No global state.
using Rng = std::mt19937_64;

// splitmix64 finalizer; decorrelates derived seeds from sequential salts.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return mix64(mix64(seed) ^ mix64(salt ^ 0xa0761d6478bd642fULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(seed, a), b);
}

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

inline Rng make_rng(std::uint64_t seed, std::uint64_t salt) {
  return Rng(derive_seed(seed, salt));
}

}  // namespace pseudoseg

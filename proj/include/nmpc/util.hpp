#pragma once

#include <charconv>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace nmpc {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Independent named substream from a base seed (e.g. per channel, per run).
inline uint64_t derive_seed(uint64_t base, std::string_view label) {
  return splitmix64(base ^ fnv1a(label));
}

// Uniform double in [0,1) from the top 53 bits of the generator output.
// std::uniform_real_distribution is not bit-stable across standard
// libraries; this is, and reproducibility of traces depends on it.
inline double uniform01(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

// Shortest decimal that round-trips; identical runs serialize identically.
inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace nmpc

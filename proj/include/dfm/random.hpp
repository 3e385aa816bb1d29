#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace dfm {

// Independent stream for (seed, operation, index); the same triple always
// yields the same sequence.
inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view op, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over the tag
  for (char c : op) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return mix(mix(seed) ^ mix(h) ^ mix(index + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view op, std::uint64_t index = 0) {
  return Rng(stream_seed(seed, op, index));
}

inline void fill_normal(std::span<double> out, double mean, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : out) v = dist(rng);
}

}  // namespace dfm

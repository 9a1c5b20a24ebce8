#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace emofuse {

using Rng = std::mt19937_64;

// Default seed set for the five-run protocol.
inline const std::vector<std::uint64_t> kDefaultSeeds = {1, 2, 3, 4, 5};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Substream seed for (master seed, stream name):
//   splitmix64(splitmix64(seed) ^ fnv1a64(name))
// Distinct names give statistically independent mt19937_64 streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
    return splitmix64(splitmix64(seed) ^ fnv1a64(stream));
}

inline Rng make_stream(std::uint64_t seed, std::string_view stream) {
    return Rng(derive_seed(seed, stream));
}

// Normal(0, stddev^2) truncated at +-2 stddev by rejection.
inline double truncated_normal(Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (;;) {
        double z = dist(rng);
        if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace emofuse

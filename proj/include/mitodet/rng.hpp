#pragma once

/// Seedable RNG helpers with fixed bit mappings, so identical seeds give
/// identical streams independent of the standard library's distribution
/// implementations.

#include <cmath>
#include <cstdint>
#include <random>

namespace mitodet {

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits of one engine draw.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform double in [lo, hi).
inline double uniform(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

/// Uniform integer in [lo, hi] via rejection-free modulo over a wide draw.
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<std::int64_t>(rng() % span);
}

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

/// Standard normal via Box-Muller (one value per call, second discarded).
inline double normal(Rng& rng) {
    double u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Deterministic child stream: splitmix64 mix of the parent seed and a
/// stream tag.
inline Rng child_rng(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
}

}  // namespace mitodet

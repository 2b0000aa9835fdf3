#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "vground/array.hpp"

namespace vground {

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Stable derivation of sub-stream seeds (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

template <typename Real>
Array<Real> randn(std::vector<int> shape, Rng& rng, Real stddev = Real(1)) {
    Array<Real> out(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (Real& v : out.mutable_data()) v = static_cast<Real>(dist(rng)) * stddev;
    return out;
}

template <typename Real>
Array<Real> rand_uniform(std::vector<int> shape, Rng& rng, Real lo, Real hi) {
    Array<Real> out(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (Real& v : out.mutable_data()) v = static_cast<Real>(dist(rng));
    return out;
}

inline int rand_int(Rng& rng, int lo, int hi) {  // inclusive bounds
    std::uniform_int_distribution<int> dist(lo, hi);
    return dist(rng);
}

}  // namespace vground

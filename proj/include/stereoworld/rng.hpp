#pragma once

#include <cmath>
#include <cstdint>

#include "stereoworld/tensor.hpp"

namespace stw::rng {

// Counter-based randomness: every draw is a pure function of
// (seed, stream, counters). One global seed fans out via named streams so
// toggling one consumer never shifts another's draws, and training can be
// resumed bit-exactly from a step index alone.

enum class Stream : uint64_t {
    SceneSpec = 1,
    Texture = 2,
    Init = 3,
    NoiseRgb = 4,
    NoiseDep = 5,
    Time = 6,
    Replace = 7,
    DataOrder = 8,
    SampleRgb = 9,
    SampleDep = 10,
    Dropout = 11,
    NoiseLeft = 12,
};

// SplitMix64 finalizer.
inline uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t key(uint64_t seed, Stream stream, uint64_t c0, uint64_t c1 = 0,
                    uint64_t c2 = 0) {
    uint64_t h = mix(seed ^ 0x5851f42d4c957f2dull);
    h = mix(h ^ static_cast<uint64_t>(stream));
    h = mix(h ^ c0);
    h = mix(h ^ c1);
    h = mix(h ^ c2);
    return h;
}

// Uniform in [0,1) with 53-bit resolution.
inline double to_unit(uint64_t x) { return static_cast<double>(x >> 11) * 0x1.0p-53; }

inline double uniform(uint64_t seed, Stream stream, uint64_t c0, uint64_t c1 = 0,
                      uint64_t c2 = 0) {
    return to_unit(key(seed, stream, c0, c1, c2));
}

inline int64_t uniform_int(uint64_t seed, Stream stream, int64_t lo, int64_t hi_inclusive,
                           uint64_t c0, uint64_t c1 = 0, uint64_t c2 = 0) {
    const double u = uniform(seed, stream, c0, c1, c2);
    const int64_t span = hi_inclusive - lo + 1;
    int64_t v = lo + static_cast<int64_t>(u * static_cast<double>(span));
    return v > hi_inclusive ? hi_inclusive : v;
}

// Standard normal via Box-Muller; avoids std:: distributions so output is
// identical across standard library implementations.
inline double gaussian(uint64_t seed, Stream stream, uint64_t c0, uint64_t c1 = 0,
                       uint64_t c2 = 0) {
    const double u1 = 1.0 - uniform(seed, stream, c0, c1, 2 * c2);      // (0,1]
    const double u2 = uniform(seed, stream, c0, c1, 2 * c2 + 1);        // [0,1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline void fill_gaussian(Tensor& t, uint64_t seed, Stream stream, uint64_t c0,
                          uint64_t c1 = 0) {
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = gaussian(seed, stream, c0, c1, static_cast<uint64_t>(i));
}

inline Tensor gaussian_tensor(std::vector<int64_t> shape, uint64_t seed, Stream stream,
                              uint64_t c0, uint64_t c1 = 0) {
    Tensor t(std::move(shape));
    fill_gaussian(t, seed, stream, c0, c1);
    return t;
}

}  // namespace stw::rng

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace crisp {

// splitmix64 finalizer; used to derive independent stream seeds from a base
// seed plus a salt (image id, branch tag, ...).
inline uint64_t mix_seed(uint64_t base, uint64_t salt) {
    uint64_t z = base + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic random stream. std::mt19937 provides the bit-stable engine;
// the value mappings are written out here because std::*_distribution is not
// bit-stable across standard library implementations.
class Rng {
  public:
    explicit Rng(uint64_t seed)
        : eng_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return eng_(); }

    // Uniform in [0, 1) with 24 bits of resolution.
    float uniform() { return static_cast<float>(next_u32() >> 8) * 0x1p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform_d() {
        uint64_t hi = next_u32();
        uint64_t lo = next_u32();
        return static_cast<double>(((hi << 32) | lo) >> 11) * 0x1p-53;
    }

    // Standard normal via Box-Muller; second value cached.
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-12) u1 = uniform_d();
        double u2 = uniform_d();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 2.0 * M_PI * u2;
        spare_ = static_cast<float>(r * std::sin(t));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(t));
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n); n must be positive. Fixed-point multiply
    // keeps the mapping engine-exact (no modulo bias worth caring about at
    // our n, and no distribution object).
    int uniform_int(int n) {
        return static_cast<int>((static_cast<uint64_t>(next_u32()) *
                                 static_cast<uint64_t>(n)) >> 32);
    }

    // Log-uniform in [lo, hi], lo > 0.
    float log_uniform(float lo, float hi) {
        double t = uniform_d();
        return static_cast<float>(
            std::exp(std::log(static_cast<double>(lo)) +
                     t * (std::log(static_cast<double>(hi)) -
                          std::log(static_cast<double>(lo)))));
    }

  private:
    std::mt19937 eng_;
    float spare_ = 0.0f;
    bool have_spare_ = false;
};

}  // namespace crisp

#pragma once

#include <cmath>
#include <cstdint>

#include "a2q/common.hpp"

namespace a2q {

// Deterministic pseudo-random stream. Distributions are implemented
// explicitly (rather than via <random> adaptors, which are
// implementation-defined) so that identical seeds produce identical
// artifacts on every platform.
class Rng {
public:
    explicit Rng(u64 seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    // splitmix64 step.
    u64 next_u64() {
        u64 z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Integer in [0, n).
    u64 uniform_index(u64 n) {
        return next_u64() % n;
    }

    // Standard normal via Box-Muller; one draw per call, the paired
    // value is cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.28318530717958647692 * u2;
        cached_ = r * std::sin(t);
        have_cached_ = true;
        return r * std::cos(t);
    }

    double normal(double mean, double stddev) {
        return mean + stddev * normal();
    }

private:
    u64 state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace a2q

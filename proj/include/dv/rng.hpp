#pragma once

#include <cmath>
#include <cstdint>

namespace dv {

// Counter-based generator: draw i of stream (seed) is a pure function of
// (seed, counter), so identical seed + call sequence reproduces exactly,
// independent of platform or standard library.
struct RngState {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    explicit RngState(std::uint64_t s = 0) : seed(s) {}

    // splitmix64 finalizer over seed-offset counter.
    std::uint64_t next_u64() {
        std::uint64_t z = seed + (++counter) * 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; consumes two draws per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Standard Gumbel(0,1) via -log(-log(u)).
    double gumbel() {
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        double l = -std::log(u);
        if (l < 1e-300) l = 1e-300;
        return -std::log(l);
    }

    // Integer in [0, n).
    std::uint64_t index(std::uint64_t n) { return next_u64() % n; }

    // Derive an independent stream, e.g. per scene or per module.
    RngState fork(std::uint64_t tag) {
        RngState r(seed ^ (0xA5A5A5A5DEADBEEFull + tag * 0x2545F4914F6CDD1Dull));
        r.counter = 0;
        return r;
    }
};

}  // namespace dv

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace sgpt {

// Deterministic RNG wrapper. std::mt19937 has a standard-specified output
// sequence, but the std distributions do not, so the helpers below derive
// uniform/normal variates by hand to keep every seed reproducible across
// toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return gen_(); }

    // Uniform integer in [0, n). Modulo bias is irrelevant at the scales
    // used here (n << 2^32).
    uint64_t below(uint64_t n) {
        uint64_t hi = gen_();
        uint64_t lo = gen_();
        return ((hi << 32) | lo) % n;
    }

    // Uniform in [0, 1).
    double uniform() { return gen_() * (1.0 / 4294967296.0); }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Fisher-Yates shuffle of 0..n-1.
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = static_cast<int>(below(static_cast<uint64_t>(i) + 1));
            std::swap(p[i], p[j]);
        }
        return p;
    }

private:
    std::mt19937 gen_;
};

}  // namespace sgpt

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fdsl {

// All random draws in this project go through the helpers below rather than
// <random> distributions, whose output is implementation-defined. The engine
// (mt19937_64) is pinned by the standard, so every stream here is identical
// across compilers and platforms.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed) { return splitmix64(seed); }

template <class... Rest>
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t next, Rest... rest) {
    return mix_seed(splitmix64(seed ^ (next + 0x9e3779b97f4a7c15ull)), rest...);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t bits() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double unit() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

    double range(double lo, double hi) { return lo + (hi - lo) * unit(); }

    // Uniform integer in [0, n), bias-free.
    std::uint64_t index(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r = bits();
        while (r >= limit) r = bits();
        return r % n;
    }

    double gauss() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - unit(); // (0, 1]
        const double u2 = unit();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = mag * std::sin(two_pi * u2);
        have_spare_ = true;
        return mag * std::cos(two_pi * u2);
    }

    // Normal(0, std) resampled until within 2 standard deviations.
    double trunc_gauss(double std_dev) {
        double z = gauss();
        while (std::fabs(z) > 2.0) z = gauss();
        return z * std_dev;
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace fdsl

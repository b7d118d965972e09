#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace kdkit {

namespace detail {

// splitmix64 finalizer; bijective on 64-bit words.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace detail

// Counter-based deterministic stream: the i-th output is a pure function of
// (seed, label, i). Streams with distinct labels are independent, so adding a
// consumer of one stream never perturbs the draws seen by another.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::string_view label)
        : key_(detail::mix64(seed ^ 0x6a09e667f3bcc908ull) ^ detail::fnv1a64(label)) {}

    RngStream(std::uint64_t seed, std::string_view label, std::uint64_t index)
        : RngStream(seed, std::string(label) + "." + std::to_string(index)) {}

    std::uint64_t next_u64() {
        return detail::mix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_int(std::uint64_t n) {
        // fixed-point multiply keeps the draw a pure function of one u64
        return static_cast<std::uint64_t>(
            (static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller; the spare value is cached.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace kdkit

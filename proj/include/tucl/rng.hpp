#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace tucl {

/// Counter-based random stream. Each draw is a pure function of
/// (key, counter), so streams are splittable: independent streams are
/// derived by hashing a root seed with a purpose label, and never share
/// state. Same key => same sequence, on every platform.
class RngStream {
public:
    explicit RngStream(uint64_t key) : key_(key) {}

    /// Derive an independent stream from (seed, label[, index]).
    static RngStream derive(uint64_t seed, std::string_view label, uint64_t index = 0) {
        uint64_t h = 1469598103934665603ull; // FNV-1a offset basis
        auto eat_byte = [&h](uint8_t b) {
            h ^= b;
            h *= 1099511628211ull;
        };
        for (char c : label) eat_byte(static_cast<uint8_t>(c));
        for (int i = 0; i < 8; ++i) eat_byte(static_cast<uint8_t>(seed >> (8 * i)));
        for (int i = 0; i < 8; ++i) eat_byte(static_cast<uint8_t>(index >> (8 * i)));
        return RngStream(h);
    }

    uint64_t next_u64() {
        uint64_t z = key_ + 0x9E3779B97F4A7C15ull * ++counter_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n).
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace tucl

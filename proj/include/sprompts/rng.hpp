#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace sprompts {

// splitmix64; the single mixing function behind every random stream in the
// library so that runs are reproducible from one root seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_label(std::string_view label) {
    std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derives an independent child seed from (root, label, indices). Streams with
// different labels or indices never collide, and the derivation does not
// depend on call order, so resumed runs see the same randomness.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                                 std::uint64_t a = 0, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    std::uint64_t s = splitmix64(root ^ hash_label(label));
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    s = splitmix64(s ^ c);
    return s;
}

// Minimal deterministic generator. Hand-rolled (including the Box-Muller
// transform) so that sequences are pinned by this header, not by the
// standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    // uniform in [0, 1)
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    float normal(float mean = 0.0f, float stddev = 1.0f) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * static_cast<float>(spare_);
        }
        double u1 = next_unit();
        double u2 = next_unit();
        while (u1 <= 1e-300) u1 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double z0 = r * std::cos(6.283185307179586477 * u2);
        spare_ = r * std::sin(6.283185307179586477 * u2);
        have_spare_ = true;
        return mean + stddev * static_cast<float>(z0);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace sprompts

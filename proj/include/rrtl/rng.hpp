#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace rrtl {

// FNV-1a over arbitrary bytes, used for stable sub-seed derivation so that
// every (config, seed, tag) combination maps to a reproducible stream.
inline uint64_t hash64(uint64_t seed, std::string_view tag) {
    uint64_t h = 14695981039346656037ull ^ seed;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 1099511628211ull;
    }
    // splitmix64 finalizer to spread low-entropy tags
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

inline uint64_t hash64(uint64_t seed, uint64_t v) {
    uint64_t h = seed ^ (v + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

// Deterministic RNG wrapper. Uniform and normal draws are generated from the
// raw engine bits directly (not std::*_distribution) so results are identical
// across standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Standard normal via Box-Muller with cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        const double u2 = uniform01();
        if (u1 <= 0.0) u1 = 5e-324;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586477 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n) via 128-bit multiply (Lemire).
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<__uint128_t>(eng_()) * static_cast<__uint128_t>(n)) >> 64);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Child stream derived from the construction seed, independent of how
    // much has been consumed from this stream.
    Rng derive(std::string_view tag) const { return Rng(hash64(seed_, tag)); }
    Rng derive(uint64_t v) const { return Rng(hash64(seed_, v)); }

private:
    uint64_t seed_;
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace rrtl

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace tmerge {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// SplitMix64 finalizer. Bijective, strong avalanche.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

// Incremental FNV-1a over raw bytes, for content hashing.
class Fnv1a {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001B3ull;
        }
    }
    std::uint64_t digest() const { return h_; }

private:
    std::uint64_t h_ = 0xCBF29CE484222325ull;
};

// Derives a new 64-bit seed from a seed and a label. Used to fan a single
// user seed out into independent streams (one per expert, per role, ...).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
    return mix64(mix64(seed + kGolden) ^ fnv1a64(label));
}

// Stateless counter-based generator. Every draw is a pure function of
// (seed, stream name, counter), so results do not depend on how work is
// scheduled or in which order tensors are processed.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::string_view stream)
        : key_(derive_seed(seed, stream)) {}

    std::uint64_t word(std::uint64_t counter) const { return mix64(key_ + counter * kGolden); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform(std::uint64_t counter) const {
        return static_cast<double>(word(counter) >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller (cosine branch), one draw per counter.
    float normal(std::uint64_t counter) const {
        std::uint64_t w = word(counter);
        double u1 = (static_cast<double>(w >> 32) + 1.0) * 0x1.0p-32;  // (0, 1]
        double u2 = static_cast<double>(w & 0xFFFFFFFFull) * 0x1.0p-32;
        constexpr double two_pi = 6.283185307179586476925286766559;
        return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2));
    }

    std::uint64_t key() const { return key_; }

private:
    std::uint64_t key_;
};

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return out;
}

}  // namespace tmerge

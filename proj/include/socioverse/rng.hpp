#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>

namespace socioverse {

// SplitMix64 finalizer. Used for seeding and for stream derivation.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// 64-bit FNV-1a. Stable across platforms and runs, unlike std::hash.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derives an independent seed for a named sub-purpose ("income", "match", ...).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label) noexcept {
    return mix64(master ^ mix64(fnv1a64(label)));
}

// xoshiro256** with counter-split construction: Rng(seed, stream) yields a
// stream that depends only on the pair, so per-agent generators can be built
// in any order or on any thread.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept {
        std::uint64_t x = mix64(seed) ^ mix64(stream * 0xd1342543de82ef95ULL + 0x632be59bd9b4e019ULL);
        for (auto& s : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            s = mix64(x);
        }
    }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1); safe for log() and inverse CDFs.
    double uniform_open() noexcept {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // Unbiased integer in [0, bound). bound must be > 0.
    std::uint64_t below(std::uint64_t bound) noexcept {
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Standard normal via Box-Muller (no cached second value, so the stream
    // position only depends on the number of calls).
    double normal() noexcept {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4]{};
};

}  // namespace socioverse

#pragma once

// Counter-based random streams.
//
// Every draw is splitmix64(key + counter * golden_gamma), i.e. the SplitMix64
// output function applied to a Weyl sequence. A stream is fully determined by
// its 64-bit key, so independent samples get independent keys derived from a
// base seed and the sample index, and results never depend on evaluation order
// or thread count. Normals use the Box-Muller transform, so the streams are
// bit-reproducible on any IEEE-754 platform with a correctly rounded libm.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace riskctl {

inline constexpr std::uint64_t kGoldenGamma = 0x9e3779b97f4a7c15ULL;

inline constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
    z += kGoldenGamma;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Key for sub-stream `index` of `base`, optionally salted with a purpose tag.
inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index,
                                           std::uint64_t tag = 0) noexcept {
    return splitmix64(splitmix64(base ^ splitmix64(tag)) + index * 0xd1b54a32d192ed03ULL);
}

class CounterRng {
public:
    explicit constexpr CounterRng(std::uint64_t key) noexcept : key_(key) {}

    constexpr std::uint64_t next_u64() noexcept { return splitmix64(key_ + (counter_++) * kGoldenGamma); }

    /// Uniform in (0, 1].
    double uniform() noexcept {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) noexcept { return n == 0 ? 0 : next_u64() % n; }

    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double r = std::sqrt(-2.0 * std::log(uniform()));
        const double phi = 2.0 * std::numbers::pi * uniform();
        spare_ = r * std::sin(phi);
        has_spare_ = true;
        return r * std::cos(phi);
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace riskctl

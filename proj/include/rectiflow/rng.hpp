#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "rectiflow/common.hpp"

namespace rectiflow {

// Counter-based generator: Philox4x32-10 (Salmon et al., Random123).
// Every draw is a pure function of (key, counter), so streams never overlap:
// stream s owns the counter block with the high 64 bits equal to s, and the
// low 64 bits count positions within the stream. Identical (seed, stream)
// produce bitwise-identical draws on any platform and thread count.
class Philox {
public:
    Philox(Seed seed, std::uint64_t stream = 0)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          hi_{stream} {}

    /// Uniform double in (0, 1).
    double uniform() {
        const std::uint64_t bits = next64();
        return (static_cast<double>(bits >> 11) + 0.5) * 0x1p-53;
    }

    /// Standard normal via Box-Muller; draws are buffered in pairs.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Multiply-shift; bias is negligible for n << 2^64.
        const std::uint64_t bits = next64();
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(bits) * n) >> 64);
    }

    std::uint64_t next64() {
        if (buf_pos_ >= 4) refill();
        const std::uint32_t lo = buf_[buf_pos_++];
        const std::uint32_t hi = buf_[buf_pos_++];
        return (static_cast<std::uint64_t>(hi) << 32) | lo;
    }

private:
    void refill() {
        std::array<std::uint32_t, 4> ctr = {
            static_cast<std::uint32_t>(lo_), static_cast<std::uint32_t>(lo_ >> 32),
            static_cast<std::uint32_t>(hi_), static_cast<std::uint32_t>(hi_ >> 32)};
        std::uint32_t k0 = key_[0];
        std::uint32_t k1 = key_[1];
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = 0xD2511F53ull * ctr[0];
            const std::uint64_t p1 = 0xCD9E8D57ull * ctr[2];
            const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
            const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0};
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        buf_ = ctr;
        buf_pos_ = 0;
        ++lo_;
    }

    std::array<std::uint32_t, 2> key_;
    std::uint64_t hi_;
    std::uint64_t lo_ = 0;
    std::array<std::uint32_t, 4> buf_{};
    int buf_pos_ = 4;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// SplitMix64 step, used to derive independent sub-seeds from a user seed.
inline Seed derive_seed(Seed seed, std::uint64_t tag) {
    std::uint64_t z = seed + (tag + 1) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Fisher-Yates shuffle of 0..n-1 driven by a Philox stream.
inline std::vector<Index> random_permutation(Index n, Seed seed, std::uint64_t stream = 0) {
    std::vector<Index> perm(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    Philox gen(seed, stream);
    for (Index i = n - 1; i > 0; --i) {
        const auto j = static_cast<Index>(gen.below(static_cast<std::uint64_t>(i) + 1));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    return perm;
}

} // namespace rectiflow

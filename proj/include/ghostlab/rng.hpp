#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "ghostlab/errors.hpp"

namespace ghostlab {

/// Philox4x32-10 block function (Salmon et al., SC'11). Stateless: the output
/// depends only on (counter, key).
class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static constexpr Counter generate(Counter ctr, Key key) noexcept
    {
        for (int round = 0; round < 10; ++round) {
            if (round > 0) {
                key[0] += kW0;
                key[1] += kW1;
            }
            const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
            const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
            const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
            const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        }
        return ctr;
    }

private:
    static constexpr std::uint32_t kM0 = 0xD2511F53u;
    static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kW0 = 0x9E3779B9u;
    static constexpr std::uint32_t kW1 = 0xBB67AE85u;
};

/// Separates the random streams used by different parts of the simulator so
/// that one seed can drive all of them without overlap.
enum class StreamDomain : std::uint32_t {
    basis = 1,
    direct_noise = 2,
    bucket_noise = 3,
    speckle_master = 4,
    speckle_shift = 5,
    permutation = 6,
    iid_mask = 7,
    test = 0xFFFF,
};

/// Counter-based stream addressed by (seed, domain, stream, element). Each
/// address yields an independent sequence of uniforms; the value at a given
/// address never depends on what else was generated.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, StreamDomain domain, std::uint32_t stream, std::uint32_t element) noexcept
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          element_(element),
          stream_(stream),
          domain_(static_cast<std::uint32_t>(domain))
    {
    }

    /// Uniform 64-bit word.
    std::uint64_t next_u64() noexcept
    {
        if (lane_ == 2) refill();
        const std::uint64_t hi = block_[2 * lane_];
        const std::uint64_t lo = block_[2 * lane_ + 1];
        ++lane_;
        return (hi << 32) | lo;
    }

    /// Uniform on the open interval (0, 1) with 53 random bits.
    double uniform() noexcept
    {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal deviate by Box–Muller (one deviate per two uniforms).
    double normal() noexcept
    {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer on [0, bound) by rejection (unbiased).
    std::uint64_t below(std::uint64_t bound)
    {
        if (bound == 0) throw ParameterError("CounterRng::below: bound must be > 0");
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
        for (;;) {
            const std::uint64_t x = next_u64();
            if (x < limit) return x % bound;
        }
    }

private:
    void refill() noexcept
    {
        block_ = Philox4x32::generate({block_index_++, element_, stream_, domain_}, key_);
        lane_ = 0;
    }

    Philox4x32::Key key_;
    std::uint32_t element_;
    std::uint32_t stream_;
    std::uint32_t domain_;
    std::uint32_t block_index_ = 0;
    Philox4x32::Counter block_{};
    int lane_ = 2;
};

namespace detail {

/// ln p(k; lambda) for the Poisson pmf, accurate for very large k and lambda.
inline double log_poisson_pmf(double k, double lambda)
{
    if (k < 10.0) return -lambda + k * std::log(lambda) - std::lgamma(k + 1.0);
    const double inv = 1.0 / k;
    const double inv2 = inv * inv;
    // Stirling remainder of lgamma(k+1).
    const double corr = inv * (1.0 / 12 - inv2 * (1.0 / 360 - inv2 * (1.0 / 1260 - inv2 / 1680)));
    return k * std::log1p((lambda - k) / k) + (k - lambda) - 0.5 * std::log(2.0 * std::numbers::pi * k) - corr;
}

}  // namespace detail

/// Exact Poisson deviate: sequential inversion below mean 30, Hörmann's PTRS
/// transformed rejection with squeeze at and above it.
inline std::int64_t poisson(double mean, CounterRng& rng)
{
    if (!(mean >= 0.0) || !std::isfinite(mean)) throw ParameterError("poisson: mean must be finite and >= 0");
    if (mean == 0.0) return 0;
    if (mean < 30.0) {
        const double u = rng.uniform();
        double p = std::exp(-mean);
        double cdf = p;
        std::int64_t k = 0;
        while (u > cdf) {
            ++k;
            p *= mean / static_cast<double>(k);
            cdf += p;
            if (p < 1e-300 && static_cast<double>(k) > mean) break;
        }
        return k;
    }
    const double slam = std::sqrt(mean);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
        const double u = rng.uniform() - 0.5;
        const double v = rng.uniform();
        const double us = 0.5 - std::abs(u);
        const double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
        if (us >= 0.07 && v <= vr) return static_cast<std::int64_t>(k);
        if (k < 0.0 || (us < 0.013 && v > us)) continue;
        if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <= detail::log_poisson_pmf(k, mean))
            return static_cast<std::int64_t>(k);
    }
}

}  // namespace ghostlab

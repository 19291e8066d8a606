#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ghostlab/errors.hpp"
#include "ghostlab/grid.hpp"
#include "ghostlab/parallel.hpp"
#include "ghostlab/rng.hpp"
#include "ghostlab/summation.hpp"

namespace ghostlab {

enum class DistributionKind { uniform, gaussian, poisson, point_mass };

/// Element distribution of a random-matrix basis together with its exact
/// moments. `zero_centered` shifts every deviate by the distribution mean so
/// that E[R] = 0.
struct DistributionSpec {
    DistributionKind kind = DistributionKind::uniform;
    double p1 = -0.5;  // uniform: lo | gaussian: mean | poisson: rate | point_mass: value
    double p2 = 0.5;   // uniform: hi | gaussian: sd
    bool zero_centered = false;

    static DistributionSpec uniform(double lo, double hi, bool zero_centered = false)
    {
        return {DistributionKind::uniform, lo, hi, zero_centered};
    }
    static DistributionSpec gaussian(double mean, double sd, bool zero_centered = false)
    {
        return {DistributionKind::gaussian, mean, sd, zero_centered};
    }
    /// Poisson deviates are always shifted by the rate.
    static DistributionSpec poisson(double rate) { return {DistributionKind::poisson, rate, 0.0, true}; }
    static DistributionSpec point_mass(double value) { return {DistributionKind::point_mass, value, 0.0, false}; }

    void validate() const
    {
        switch (kind) {
        case DistributionKind::uniform:
            if (!(p1 < p2) || !std::isfinite(p1) || !std::isfinite(p2))
                throw ParameterError("uniform distribution requires finite lo < hi");
            break;
        case DistributionKind::gaussian:
            if (!(p2 > 0.0) || !std::isfinite(p1) || !std::isfinite(p2))
                throw ParameterError("gaussian distribution requires sd > 0");
            break;
        case DistributionKind::poisson:
            if (!(p1 > 0.0) || !std::isfinite(p1)) throw ParameterError("poisson distribution requires rate > 0");
            break;
        case DistributionKind::point_mass:
            if (!std::isfinite(p1)) throw ParameterError("point mass requires a finite value");
            break;
        }
    }

    /// Mean of the underlying (unshifted) distribution.
    [[nodiscard]] double raw_mean() const noexcept
    {
        switch (kind) {
        case DistributionKind::uniform: return 0.5 * (p1 + p2);
        case DistributionKind::gaussian: return p1;
        case DistributionKind::poisson: return p1;
        case DistributionKind::point_mass: return p1;
        }
        return 0.0;
    }

    /// E[R] of the realized deviates.
    [[nodiscard]] double mean() const noexcept { return zero_centered ? 0.0 : raw_mean(); }

    [[nodiscard]] double variance() const noexcept
    {
        switch (kind) {
        case DistributionKind::uniform: return (p2 - p1) * (p2 - p1) / 12.0;
        case DistributionKind::gaussian: return p2 * p2;
        case DistributionKind::poisson: return p1;
        case DistributionKind::point_mass: return 0.0;
        }
        return 0.0;
    }

    [[nodiscard]] double third_central_moment() const noexcept
    {
        return kind == DistributionKind::poisson ? p1 : 0.0;
    }

    [[nodiscard]] double fourth_central_moment() const noexcept
    {
        switch (kind) {
        case DistributionKind::uniform: {
            const double w = p2 - p1;
            return w * w * w * w / 80.0;
        }
        case DistributionKind::gaussian: return 3.0 * p2 * p2 * p2 * p2;
        case DistributionKind::poisson: return p1 * (1.0 + 3.0 * p1);
        case DistributionKind::point_mass: return 0.0;
        }
        return 0.0;
    }

    /// E[R^2] of the realized deviates.
    [[nodiscard]] double second_moment() const noexcept { return variance() + mean() * mean(); }

    /// Var[R^2] of the realized deviates.
    [[nodiscard]] double variance_of_square() const noexcept
    {
        const double mu = mean();
        const double s2 = variance();
        const double fourth = fourth_central_moment() + 4.0 * mu * third_central_moment() + 6.0 * mu * mu * s2 +
                              mu * mu * mu * mu;
        const double second = s2 + mu * mu;
        return fourth - second * second;
    }

    double sample(CounterRng& rng) const
    {
        double x = 0.0;
        switch (kind) {
        case DistributionKind::uniform: x = p1 + (p2 - p1) * rng.uniform(); break;
        case DistributionKind::gaussian: x = p1 + p2 * rng.normal(); break;
        case DistributionKind::poisson: x = static_cast<double>(ghostlab::poisson(p1, rng)); break;
        case DistributionKind::point_mass: x = p1; break;
        }
        return zero_centered ? x - raw_mean() : x;
    }

    [[nodiscard]] std::string name() const
    {
        switch (kind) {
        case DistributionKind::uniform: return "uniform";
        case DistributionKind::gaussian: return "gaussian";
        case DistributionKind::poisson: return "poisson";
        case DistributionKind::point_mass: return "point_mass";
        }
        return "unknown";
    }
};

/// Everything needed to regenerate a random basis bit for bit.
struct RandomBasisSpec {
    std::size_t rows = 1;
    std::size_t cols = 1;
    std::size_t count = 1;
    DistributionSpec dist;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (rows < 1 || cols < 1) throw ParameterError("random basis: rows and cols must be >= 1");
        if (count < 1) throw ParameterError("random basis: member count must be >= 1");
        if (rows * cols > std::numeric_limits<std::uint32_t>::max() ||
            count > std::numeric_limits<std::uint32_t>::max())
            throw ParameterError("random basis: dimensions exceed the counter range");
        dist.validate();
    }

    [[nodiscard]] std::size_t pixels() const noexcept { return rows * cols; }

    /// Writes member k into out (length rows*cols). Element (k, i, j) is a pure
    /// function of (seed, k, i, j).
    void fill_member(std::size_t k, std::span<double> out) const
    {
        if (out.size() != pixels()) throw ShapeError("fill_member: buffer length mismatch");
        for (std::size_t p = 0; p < out.size(); ++p) {
            CounterRng rng(seed, StreamDomain::basis, static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(p));
            out[p] = dist.sample(rng);
        }
    }

    [[nodiscard]] ImageGrid member(std::size_t k) const
    {
        ImageGrid g(rows, cols);
        fill_member(k, g.values());
        return g;
    }
};

/// Materialized random-matrix basis.
class RandomBasis {
public:
    explicit RandomBasis(const RandomBasisSpec& spec) : spec_(spec)
    {
        spec_.validate();
        members_.resize(spec_.count);
        parallel_for(spec_.count, [&](std::size_t k) { members_[k] = spec_.member(k); }, 8);
    }

    [[nodiscard]] const RandomBasisSpec& spec() const noexcept { return spec_; }
    [[nodiscard]] const DistributionSpec& dist() const noexcept { return spec_.dist; }
    [[nodiscard]] std::uint64_t seed() const noexcept { return spec_.seed; }
    [[nodiscard]] std::size_t size() const noexcept { return members_.size(); }
    [[nodiscard]] std::size_t rows() const noexcept { return spec_.rows; }
    [[nodiscard]] std::size_t cols() const noexcept { return spec_.cols; }
    [[nodiscard]] const ImageGrid& operator[](std::size_t k) const { return members_[k]; }
    [[nodiscard]] const std::vector<ImageGrid>& members() const noexcept { return members_; }

    /// Copy into out; lets RandomBasis act as a member source.
    void fill_member(std::size_t k, std::span<double> out) const
    {
        const auto v = members_.at(k).values();
        std::copy(v.begin(), v.end(), out.begin());
    }

private:
    RandomBasisSpec spec_;
    std::vector<ImageGrid> members_;
};

inline RandomBasis gen_random_basis(std::size_t rows, std::size_t cols, std::size_t count, const DistributionSpec& dist,
                                    std::uint64_t seed)
{
    return RandomBasis(RandomBasisSpec{rows, cols, count, dist, seed});
}

/// Empirical Frobenius-product statistics against their analytic values.
struct BasisStats {
    double offdiag_mean = 0;
    double offdiag_var = 0;
    double diag_mean = 0;
    double diag_var = 0;
    double predicted_offdiag_mean = 0;
    double predicted_diag_mean = 0;
    double predicted_offdiag_var = 0;
    double predicted_diag_var = 0;
    std::size_t offdiag_pairs = 0;
};

inline BasisStats orthogonality_stats(const RandomBasis& basis)
{
    const std::size_t n = basis.size();
    if (n < 2) throw ParameterError("orthogonality_stats: need at least two members");
    const auto nm = static_cast<double>(basis.spec().pixels());
    const DistributionSpec& d = basis.dist();

    // Row k holds <R_k, R_l> for l >= k.
    std::vector<std::vector<double>> gram(n);
    parallel_for(n, [&](std::size_t k) {
        gram[k].resize(n - k);
        for (std::size_t l = k; l < n; ++l) gram[k][l - k] = frobenius(basis[k], basis[l]);
    }, 4);

    CompensatedSum off_s, off_s2, dia_s, dia_s2;
    for (std::size_t k = 0; k < n; ++k) {
        dia_s.add(gram[k][0]);
        dia_s2.add(gram[k][0] * gram[k][0]);
        for (std::size_t l = 1; l < gram[k].size(); ++l) {
            off_s.add(gram[k][l]);
            off_s2.add(gram[k][l] * gram[k][l]);
        }
    }
    BasisStats s;
    const double nd = static_cast<double>(n);
    const double np = nd * (nd - 1.0) / 2.0;
    s.offdiag_pairs = n * (n - 1) / 2;
    s.diag_mean = dia_s.value() / nd;
    s.diag_var = std::max(0.0, (dia_s2.value() - nd * s.diag_mean * s.diag_mean) / (nd - 1.0));
    s.offdiag_mean = off_s.value() / np;
    s.offdiag_var = np > 1 ? std::max(0.0, (off_s2.value() - np * s.offdiag_mean * s.offdiag_mean) / (np - 1.0)) : 0.0;

    const double mu = d.mean();
    const double m2 = d.second_moment();
    s.predicted_offdiag_mean = nm * mu * mu;
    s.predicted_diag_mean = nm * m2;
    s.predicted_offdiag_var = nm * (m2 * m2 - mu * mu * mu * mu);
    s.predicted_diag_var = nm * d.variance_of_square();
    return s;
}

/// (1/(N Var[R])) sum_k R_k(i,j) R_k(.,.): a finite-N approximation of the
/// Kronecker delta centred on (i,j).
inline ImageGrid completeness_map(const RandomBasis& basis, std::size_t i, std::size_t j)
{
    if (i >= basis.rows() || j >= basis.cols()) throw IndexError("completeness_map: pixel index out of range");
    const DistributionSpec& d = basis.dist();
    if (d.mean() != 0.0) throw ParameterError("completeness_map: distribution must be zero-centered");
    if (!(d.variance() > 0.0)) throw DegenerateError("completeness_map: Var[R] = 0");
    const std::size_t pix = i * basis.cols() + j;
    CompensatedField acc(basis.spec().pixels());
    for (std::size_t k = 0; k < basis.size(); ++k) acc.axpy(basis[k][pix], basis[k].values());
    ImageGrid out(basis.rows(), basis.cols(), 1.0, acc.values());
    out *= 1.0 / (static_cast<double>(basis.size()) * d.variance());
    return out;
}

struct SynthesisResult {
    ImageGrid image;
    std::vector<double> weights;
};

/// Anything exposing the RandomBasisSpec-style member interface.
template <class S>
concept MemberSource = requires(const S& s, std::size_t k, std::span<double> out) {
    { s.size() } -> std::convertible_to<std::size_t>;
    s.fill_member(k, out);
};

/// Streaming view over a RandomBasisSpec: members are regenerated on demand,
/// so arbitrarily large N never needs N images in memory.
class LazyBasis {
public:
    explicit LazyBasis(RandomBasisSpec spec) : spec_(std::move(spec)) { spec_.validate(); }
    [[nodiscard]] std::size_t size() const noexcept { return spec_.count; }
    [[nodiscard]] const RandomBasisSpec& spec() const noexcept { return spec_; }
    void fill_member(std::size_t k, std::span<double> out) const { spec_.fill_member(k, out); }

private:
    RandomBasisSpec spec_;
};

namespace detail {

/// Computes w_k = <f, S_k> and sum_k w_k S_k with a reduction order fixed by
/// block index, independent of the worker count.
template <MemberSource Source>
std::pair<std::vector<double>, std::vector<double>> weigh_and_accumulate(const ImageGrid& f, const Source& source)
{
    constexpr std::size_t kBlock = 32;
    const BlockRange range{source.size(), kBlock};
    std::vector<double> weights(source.size());
    std::vector<CompensatedField> partial(range.blocks());
    parallel_blocks(range.blocks(), [&](std::size_t b) {
        std::vector<double> member(f.size());
        CompensatedField acc(f.size());
        for (std::size_t k = range.begin(b); k < range.end(b); ++k) {
            source.fill_member(k, member);
            const double w = compensated_dot(f.values(), member);
            weights[k] = w;
            acc.axpy(w, member);
        }
        partial[b] = std::move(acc);
    });
    CompensatedField total(f.size());
    for (const auto& p : partial) total.merge(p);
    return {std::move(weights), total.values()};
}

}  // namespace detail

/// Non-orthogonal random-basis synthesis:
/// f_(N) = (1/(N Var[R])) sum_k <f, R_k> R_k.
template <MemberSource Source>
SynthesisResult synthesize(const ImageGrid& f, const Source& basis, const DistributionSpec& dist)
{
    if (dist.mean() != 0.0) throw ParameterError("synthesize: distribution must be zero-centered");
    if (!(dist.variance() > 0.0)) throw DegenerateError("synthesize: Var[R] = 0");
    if (basis.size() < 1) throw ParameterError("synthesize: empty basis");
    auto [weights, acc] = detail::weigh_and_accumulate(f, basis);
    ImageGrid image(f.rows(), f.cols(), f.pitch(), std::move(acc));
    image *= 1.0 / (static_cast<double>(basis.size()) * dist.variance());
    return {std::move(image), std::move(weights)};
}

inline SynthesisResult synthesize(const ImageGrid& f, const RandomBasis& basis)
{
    if (f.rows() != basis.rows() || f.cols() != basis.cols()) throw ShapeError("synthesize: dimension mismatch");
    return synthesize(f, basis, basis.dist());
}

inline SynthesisResult synthesize(const ImageGrid& f, const LazyBasis& basis)
{
    if (f.rows() != basis.spec().rows || f.cols() != basis.spec().cols)
        throw ShapeError("synthesize: dimension mismatch");
    return synthesize(f, basis, basis.spec().dist);
}

/// Exact per-pixel variance of f_(N) (before the large-N approximation).
inline ImageGrid synthesis_variance_exact(const ImageGrid& f, std::size_t count, const DistributionSpec& dist)
{
    const double total = f.sum_squares();
    const double kurt = dist.variance_of_square() / (dist.variance() * dist.variance());
    ImageGrid out(f.rows(), f.cols(), f.pitch());
    const double n = static_cast<double>(count);
    for (std::size_t p = 0; p < f.size(); ++p) out[p] = (total - f[p] * f[p] + f[p] * f[p] * kurt) / n;
    return out;
}

/// Approximate per-pixel variance <f^2>/N, independent of the distribution.
inline double synthesis_variance_approx(const ImageGrid& f, std::size_t count)
{
    return f.sum_squares() / static_cast<double>(count);
}

struct SnrPrediction {
    ImageGrid snr_map;
    double snr_global = 0;
    /// snr_global^2 * nm, identically N.
    double uncertainty_product = 0;
};

inline SnrPrediction predict_snr(const ImageGrid& f, std::size_t count)
{
    if (count < 1) throw ParameterError("predict_snr: N must be >= 1");
    const double f2 = f.sum_squares();
    if (!(f2 > 0.0)) throw DegenerateError("predict_snr: SNR undefined for f == 0");
    const double n = static_cast<double>(count);
    const double nm = static_cast<double>(f.size());
    const double sd = std::sqrt(f2 / n);
    ImageGrid map = f;
    map *= 1.0 / sd;
    const double g = std::sqrt(n / nm);
    return {std::move(map), g, g * g * nm};
}

/// Spatial vs ensemble statistics of a basis against the analytic moments.
/// Deviations are reported raw and in units of the standard error of the
/// corresponding estimator (0 when that standard error is 0).
struct ErgodicityReport {
    double max_spatial_mean_dev = 0;
    double max_spatial_var_dev = 0;
    double max_ensemble_mean_dev = 0;
    double max_ensemble_var_dev = 0;
    double max_spatial_mean_se = 0;
    double max_spatial_var_se = 0;
    double max_ensemble_mean_se = 0;
    double max_ensemble_var_se = 0;
    /// RMS over members of (spatial mean - E[R]); shrinks as 1/sqrt(nm).
    double rms_spatial_mean_dev = 0;

    [[nodiscard]] double max_se() const noexcept
    {
        return std::max({max_spatial_mean_se, max_spatial_var_se, max_ensemble_mean_se, max_ensemble_var_se});
    }
};

inline ErgodicityReport ergodicity_check(const RandomBasis& basis)
{
    const std::size_t n = basis.size();
    const std::size_t pix = basis.spec().pixels();
    if (n < 2 || pix < 2) throw ParameterError("ergodicity_check: need N >= 2 and nm >= 2");
    const DistributionSpec& d = basis.dist();
    const double mu = d.mean();
    const double var = d.variance();
    const double var_of_sq_dev = d.fourth_central_moment() - var * var;

    auto in_se = [](double dev, double se) { return se > 0.0 ? std::abs(dev) / se : 0.0; };

    ErgodicityReport r;
    const double se_sm = std::sqrt(var / static_cast<double>(pix));
    const double se_sv = std::sqrt(var_of_sq_dev / static_cast<double>(pix));
    CompensatedSum rms;
    for (std::size_t k = 0; k < n; ++k) {
        CompensatedSum s, s2;
        for (double v : basis[k].values()) {
            s.add(v);
            s2.add((v - mu) * (v - mu));
        }
        const double dm = s.value() / static_cast<double>(pix) - mu;
        const double dv = s2.value() / static_cast<double>(pix) - var;
        rms.add(dm * dm);
        r.max_spatial_mean_dev = std::max(r.max_spatial_mean_dev, std::abs(dm));
        r.max_spatial_var_dev = std::max(r.max_spatial_var_dev, std::abs(dv));
        r.max_spatial_mean_se = std::max(r.max_spatial_mean_se, in_se(dm, se_sm));
        r.max_spatial_var_se = std::max(r.max_spatial_var_se, in_se(dv, se_sv));
    }
    r.rms_spatial_mean_dev = std::sqrt(rms.value() / static_cast<double>(n));

    const double se_em = std::sqrt(var / static_cast<double>(n));
    const double se_ev = std::sqrt(var_of_sq_dev / static_cast<double>(n));
    for (std::size_t p = 0; p < pix; ++p) {
        CompensatedSum s, s2;
        for (std::size_t k = 0; k < n; ++k) {
            const double v = basis[k][p];
            s.add(v);
            s2.add((v - mu) * (v - mu));
        }
        const double dm = s.value() / static_cast<double>(n) - mu;
        const double dv = s2.value() / static_cast<double>(n) - var;
        r.max_ensemble_mean_dev = std::max(r.max_ensemble_mean_dev, std::abs(dm));
        r.max_ensemble_var_dev = std::max(r.max_ensemble_var_dev, std::abs(dv));
        r.max_ensemble_mean_se = std::max(r.max_ensemble_mean_se, in_se(dm, se_em));
        r.max_ensemble_var_se = std::max(r.max_ensemble_var_se, in_se(dv, se_ev));
    }
    return r;
}

}  // namespace ghostlab

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ghostlab/errors.hpp"
#include "ghostlab/ghostcore.hpp"
#include "ghostlab/grid.hpp"
#include "ghostlab/orthonorm.hpp"
#include "ghostlab/rng.hpp"
#include "ghostlab/summation.hpp"

namespace ghostlab {

namespace detail {

inline void require_transmission(const ImageGrid& f)
{
    for (double v : f.values())
        if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("transmission values must lie in [0, 1]");
}

inline void require_lambda(double lambda_tilde)
{
    if (!(lambda_tilde > 0.0) || !std::isfinite(lambda_tilde))
        throw ParameterError("lambda_tilde must be finite and > 0");
}

}  // namespace detail

/// Direct image with shot noise: each pixel is Poisson(f * lambda) / lambda.
inline ImageGrid direct_image_noisy(const ImageGrid& f, double lambda_tilde, std::uint64_t seed)
{
    detail::require_transmission(f);
    detail::require_lambda(lambda_tilde);
    ImageGrid out(f.rows(), f.cols(), f.pitch());
    for (std::size_t p = 0; p < f.size(); ++p) {
        CounterRng rng(seed, StreamDomain::direct_noise, 0, static_cast<std::uint32_t>(p));
        out[p] = static_cast<double>(poisson(f[p] * lambda_tilde, rng)) / lambda_tilde;
    }
    return out;
}

/// Total expected noise of the direct image, <f> / lambda.
inline double direct_variance(const ImageGrid& f, double lambda_tilde)
{
    detail::require_lambda(lambda_tilde);
    return f.sum() / lambda_tilde;
}

/// One noisy bucket reading xi (<I>/lambda) P((lambda/<I>) <I, f>). `stream`
/// selects an independent draw for the same seed.
inline double bucket_noisy(const ImageGrid& f, const ImageGrid& mask, double lambda_tilde, double xi,
                           std::uint64_t seed, std::uint32_t stream = 0)
{
    detail::require_lambda(lambda_tilde);
    const double mask_total = mask.sum();
    if (!(mask_total > 0.0)) throw DegenerateError("bucket_noisy: mask has no transmission");
    for (double v : mask.values())
        if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("bucket_noisy: mask values must lie in [0, 1]");
    const double overlap = frobenius(mask, f);
    CounterRng rng(seed, StreamDomain::bucket_noise, stream, 0);
    const auto counts = poisson(lambda_tilde / mask_total * std::max(0.0, overlap), rng);
    return xi * (mask_total / lambda_tilde) * static_cast<double>(counts);
}

/// Noisy readings through every mask of a basis-mapped set; reading k uses
/// stream k of `seed`.
inline BucketSeries noisy_basis_readings(const ImageGrid& f, const MaskSet& masks, double lambda_tilde,
                                         std::uint64_t seed)
{
    BucketSeries out;
    out.values.resize(masks.size());
    for (std::size_t k = 0; k < masks.size(); ++k)
        out.values[k] = bucket_noisy(f, masks[k], lambda_tilde, masks.xi, seed, static_cast<std::uint32_t>(k));
    out.lambda_tilde = lambda_tilde;
    out.seed = seed;
    return out;
}

/// Ghost image acquired through basis-mapped masks with Poisson buckets.
inline ImageGrid ghost_image_noisy(const ImageGrid& f, const MaskSet& masks, const OrthonormalBasis& onb,
                                   double lambda_tilde, std::uint64_t seed)
{
    if (!masks.eta) throw ParameterError("ghost_image_noisy: mask set carries no eta");
    return gi_orthonormal(noisy_basis_readings(f, masks, lambda_tilde, seed), onb, *masks.eta);
}

struct GhostVariance {
    double full = 0;
    double simplified = 0;
    double omega = 0;
};

namespace detail {

/// Omega = sum_ij (1/sqrt(nm) + eta sum_k R_k(i,j))^2.
inline double omega(const OrthonormalBasis& onb, double eta)
{
    const std::size_t pix = onb.pixels();
    CompensatedField member_sum(pix);
    for (const auto& m : onb.members) member_sum.axpy(1.0, m.values());
    const auto s = member_sum.values();
    const double c = 1.0 / std::sqrt(static_cast<double>(pix));
    CompensatedSum acc;
    for (double v : s) acc.add((c + eta * v) * (c + eta * v));
    return acc.value();
}

struct DoseTerms {
    double first = 0;  // xi^2 <I_1> <I_1, f>
    double rest = 0;   // xi^2 sum_{k>=2} <I_k> <I_k, f>
    double omega = 0;
};

inline DoseTerms dose_terms(const ImageGrid& f, const MaskSet& masks, const OrthonormalBasis& onb)
{
    if (!onb.augmented || !masks.eta) throw ParameterError("ghost variance needs an augmented basis-mapped mask set");
    if (masks.size() != onb.size()) throw ShapeError("mask count != orthonormal member count");
    if (onb.size() != onb.pixels()) throw ParameterError("ghost variance needs a complete basis (N = nm)");
    if (onb.rows() != f.rows() || onb.cols() != f.cols()) throw ShapeError("dimension mismatch");
    const double xi2 = masks.xi * masks.xi;
    DoseTerms t;
    CompensatedSum rest;
    for (std::size_t k = 0; k < masks.size(); ++k) {
        const double term = xi2 * masks[k].sum() * frobenius(masks[k], f);
        if (k == 0)
            t.first = term;
        else
            rest.add(term);
    }
    t.rest = rest.value();
    t.omega = omega(onb, *masks.eta);
    return t;
}

}  // namespace detail

/// Total shot-noise variance of the orthonormal-basis ghost image: the full
/// expression with its Omega-weighted first term, and the simplified form
/// obtained when sum_k R_k ~ 0.
inline GhostVariance ghost_variance(const ImageGrid& f, const MaskSet& masks, const OrthonormalBasis& onb,
                                    double lambda_tilde)
{
    detail::require_lambda(lambda_tilde);
    const auto t = detail::dose_terms(f, masks, onb);
    return {(t.omega * t.first + t.rest) / lambda_tilde, (t.first + t.rest) / lambda_tilde, t.omega};
}

struct DoseReport {
    double lambda_tilde = 1.0;
    double var_direct = 0;
    double var_ghost_full = 0;
    double var_ghost_simplified = 0;
    double lhs = 0;
    double rhs = 0;
    double omega = 0;
    /// Ghost imaging needs less dose than direct imaging.
    bool ghost_favorable = false;
    /// Uniform illumination upstream of mask k per imaging quantum,
    /// x_k / lambda = nm / <I_k>.
    std::vector<double> illumination_per_quantum;
    std::map<std::string, std::string> input_hashes;
};

/// Evaluates the dose-reduction inequality
/// Omega xi^2 <I_1><I_1,f> + xi^2 sum_{k>=2} <I_k><I_k,f> < <f>.
/// lambda only scales the reported variances; the verdict is independent of it.
inline DoseReport dose_inequality(const ImageGrid& f, const MaskSet& masks, const OrthonormalBasis& onb,
                                  double lambda_tilde = 1.0)
{
    detail::require_lambda(lambda_tilde);
    const auto t = detail::dose_terms(f, masks, onb);
    DoseReport r;
    r.lambda_tilde = lambda_tilde;
    r.omega = t.omega;
    r.lhs = t.omega * t.first + t.rest;
    r.rhs = f.sum();
    r.ghost_favorable = r.lhs < r.rhs;
    r.var_direct = r.rhs / lambda_tilde;
    r.var_ghost_full = r.lhs / lambda_tilde;
    r.var_ghost_simplified = (t.first + t.rest) / lambda_tilde;
    const double nm = static_cast<double>(f.size());
    for (const auto& m : masks.masks) r.illumination_per_quantum.push_back(nm / m.sum());
    return r;
}

struct EnsembleDoseReport {
    double mean_lhs = 0;
    double mean_rhs = 0;
    bool ghost_favorable = false;
    std::size_t objects = 0;
};

/// Inequality averaged over a class of objects drawn by `sampler(i)`.
template <class Sampler>
EnsembleDoseReport ensemble_dose_inequality(Sampler&& sampler, std::size_t objects, const MaskSet& masks,
                                            const OrthonormalBasis& onb)
{
    if (objects < 1) throw ParameterError("ensemble_dose_inequality: need at least one object");
    CompensatedSum lhs, rhs;
    for (std::size_t i = 0; i < objects; ++i) {
        const ImageGrid f = sampler(i);
        const auto r = dose_inequality(f, masks, onb);
        lhs.add(r.lhs);
        rhs.add(r.rhs);
    }
    EnsembleDoseReport out;
    out.objects = objects;
    out.mean_lhs = lhs.value() / static_cast<double>(objects);
    out.mean_rhs = rhs.value() / static_cast<double>(objects);
    out.ghost_favorable = out.mean_lhs < out.mean_rhs;
    return out;
}

}  // namespace ghostlab

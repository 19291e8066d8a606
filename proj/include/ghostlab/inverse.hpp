#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <string>
#include <vector>

#include "ghostlab/errors.hpp"
#include "ghostlab/fft.hpp"
#include "ghostlab/grid.hpp"
#include "ghostlab/parallel.hpp"

namespace ghostlab {

/// Fourier symbol used for d/dx: `continuous` is k, `discrete` is
/// sin(k pitch) / pitch, the symbol of the central-difference stencil.
enum class FilterSymbol { continuous, discrete };

inline std::string to_string(FilterSymbol s) { return s == FilterSymbol::continuous ? "continuous" : "discrete"; }

struct FilterSpec {
    double C = 1;
    double G = 0;   // mm
    double mu = 1;  // mm^-1
    FilterSymbol symbol = FilterSymbol::discrete;
    /// Log-argument floor as a fraction of the largest filtered value.
    double floor_fraction = 1e-12;
    /// Symmetric padding added on each side of a row before transforming.
    std::size_t pad = 0;
    /// Largest tolerated fraction of pixels at or below the floor.
    double max_clamped_fraction = 0.05;

    void validate() const
    {
        if (!(C > 0) || !std::isfinite(C)) throw ParameterError("filter: C must be finite and > 0");
        if (!std::isfinite(G)) throw ParameterError("filter: G must be finite");
        if (!(mu > 0) || !std::isfinite(mu)) throw ParameterError("filter: mu must be finite and > 0");
        if (!(floor_fraction > 0) || !(floor_fraction < 1)) throw ParameterError("filter: floor fraction must lie in (0, 1)");
        if (!(max_clamped_fraction >= 0) || !(max_clamped_fraction <= 1))
            throw ParameterError("filter: max clamped fraction must lie in [0, 1]");
    }
};

inline double filter_symbol(double k, double pitch, FilterSymbol symbol)
{
    return symbol == FilterSymbol::continuous ? k : std::sin(k * pitch) / pitch;
}

/// Transfer function 1 / (C (1 - i G s(k))) on the FFT frequency grid. At the
/// Nyquist bin of an even-length grid only the real part is kept, so real
/// rows stay real.
inline std::vector<std::complex<double>> filter_response(const FilterSpec& spec, std::size_t n_samples, double pitch)
{
    spec.validate();
    if (n_samples < 2) throw ParameterError("filter_response: need at least two samples");
    if (!(pitch > 0)) throw ParameterError("filter_response: pitch must be > 0");
    std::vector<std::complex<double>> h(n_samples);
    for (std::size_t j = 0; j < n_samples; ++j) {
        const double s = filter_symbol(angular_frequency(j, n_samples, pitch), pitch, spec.symbol);
        const std::complex<double> v = 1.0 / (spec.C * std::complex<double>(1.0, -spec.G * s));
        h[j] = is_nyquist_bin(j, n_samples) ? std::complex<double>(v.real(), 0.0) : v;
    }
    return h;
}

struct InversionResult {
    ImageGrid thickness;
    /// exp(-mu T) recovered before the logarithm, floor applied.
    ImageGrid filtered;
    std::size_t clamped = 0;
    double clamped_fraction = 0;
    double floor = 0;
    /// Largest |imaginary part| seen after the inverse transform.
    double max_imag_residue = 0;
    bool quality_ok = true;
};

/// Recovers projected thickness from a phase-contrast ghost image,
/// T = -(1/mu) ln F^-1[F(image) / (C (1 - i G s(k)))], row by row along x.
inline InversionResult invert_pccgi(const ImageGrid& image, const FilterSpec& spec)
{
    spec.validate();
    if (image.cols() < 2) throw ParameterError("invert_pccgi: rows must hold at least two samples");
    if (!image.all_finite()) throw ParameterError("invert_pccgi: image contains non-finite values");
    const std::size_t n = image.rows(), m = image.cols(), p = spec.pad;
    if (p > m) throw ParameterError("invert_pccgi: pad exceeds row length");
    const std::size_t len = m + 2 * p;
    const auto h = filter_response(spec, len, image.pitch());

    InversionResult r;
    r.filtered = ImageGrid(n, m, image.pitch());
    std::vector<double> residue(n, 0.0);
    parallel_for(n, [&](std::size_t i) {
        thread_local std::vector<std::complex<double>> row;
        row.assign(len, {});
        for (std::size_t j = 0; j < m; ++j) row[p + j] = image(i, j);
        for (std::size_t q = 0; q < p; ++q) {
            row[p - 1 - q] = image(i, q);
            row[p + m + q] = image(i, m - 1 - q);
        }
        Fft1d fft(len);
        fft.forward(row);
        for (std::size_t j = 0; j < len; ++j) row[j] *= h[j];
        fft.backward(row);
        double worst = 0;
        for (std::size_t j = 0; j < m; ++j) {
            const auto v = row[p + j] / static_cast<double>(len);
            r.filtered(i, j) = v.real();
            worst = std::max(worst, std::abs(v.imag()));
        }
        residue[i] = worst;
    }, 4);
    r.max_imag_residue = *std::max_element(residue.begin(), residue.end());

    r.floor = spec.floor_fraction * std::max(r.filtered.max(), 0.0);
    if (!(r.floor > 0)) r.floor = spec.floor_fraction;
    r.thickness = ImageGrid(n, m, image.pitch());
    for (std::size_t q = 0; q < image.size(); ++q) {
        double& v = r.filtered[q];
        if (v <= r.floor) {
            v = r.floor;
            ++r.clamped;
        }
        r.thickness[q] = -std::log(v) / spec.mu;
    }
    r.clamped_fraction = static_cast<double>(r.clamped) / static_cast<double>(image.size());
    r.quality_ok = r.clamped_fraction <= spec.max_clamped_fraction;
    return r;
}

/// Throws QualityError when an inversion clamped too many pixels.
inline void require_quality(const InversionResult& r, const FilterSpec& spec)
{
    if (!r.quality_ok)
        throw QualityError("inversion clamped " + std::to_string(r.clamped) + " pixels (fraction " +
                           std::to_string(r.clamped_fraction) + " > " + std::to_string(spec.max_clamped_fraction) +
                           ")");
}

}  // namespace ghostlab

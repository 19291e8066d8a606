#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "ghostlab/errors.hpp"
#include "ghostlab/inverse.hpp"
#include "ghostlab/xpci.hpp"
#include "support.hpp"

using namespace ghostlab;
namespace ts = ghostlab::test_support;

namespace {

const Material& carbon()
{
    static const auto t = builtin_materials();
    return find_material(t, "carbon");
}

FilterSpec carbon_filter(FilterSymbol symbol)
{
    const auto opt = optics(carbon());
    const auto k = pccgi_constants(default_rocking_curve(), opt);
    FilterSpec f;
    f.C = k.C;
    f.G = k.G;
    f.mu = opt.mu;
    f.symbol = symbol;
    return f;
}

ImageGrid periodic_thickness(std::size_t n, std::size_t m, double pitch)
{
    ImageGrid t(n, m, pitch);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            const double u = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(m);
            t(i, j) = 3.0 + 2.0 * std::sin(u + 0.2 * static_cast<double>(i)) + 0.5 * std::cos(3.0 * u);
        }
    return t;
}

/// Pixels of the support whose square neighbourhood is entirely inside it.
std::vector<std::size_t> eroded_support(const ImageGrid& t, std::size_t radius)
{
    std::vector<std::size_t> out;
    const auto n = static_cast<long>(t.rows()), m = static_cast<long>(t.cols()), r = static_cast<long>(radius);
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < m; ++j) {
            bool inside = true;
            for (long di = -r; di <= r && inside; ++di)
                for (long dj = -r; dj <= r && inside; ++dj) {
                    const long a = i + di, b = j + dj;
                    inside = a >= 0 && a < n && b >= 0 && b < m &&
                             t(static_cast<std::size_t>(a), static_cast<std::size_t>(b)) > 0;
                }
            if (inside) out.push_back(static_cast<std::size_t>(i * m + j));
        }
    return out;
}

}  // namespace

TEST(FilterResponse, DcGainAndClosedFormModulus)
{
    auto spec = carbon_filter(FilterSymbol::continuous);
    const std::size_t n = 64;
    const double pitch = 0.5;
    const auto h = filter_response(spec, n, pitch);
    EXPECT_NEAR(std::abs(h[0] - std::complex<double>(1.0 / spec.C, 0.0)), 0.0, 1e-15);
    double peak = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const double k = angular_frequency(j, n, pitch);
        const double closed = 1.0 / (spec.C * std::sqrt(1.0 + spec.G * spec.G * k * k));
        if (!is_nyquist_bin(j, n)) {
            EXPECT_NEAR(std::abs(h[j]), closed, 1e-12 * closed) << j;
        }
        EXPECT_LE(std::abs(h[j]), 1.0 / spec.C + 1e-15);
        peak = std::max(peak, std::abs(h[j]));
    }
    EXPECT_EQ(peak, std::abs(h[0]));
    EXPECT_EQ(h[n / 2].imag(), 0.0);
}

TEST(FilterResponse, NoiseIsNotAmplified)
{
    for (auto symbol : {FilterSymbol::continuous, FilterSymbol::discrete}) {
        const auto spec = carbon_filter(symbol);
        const auto h = filter_response(spec, 128, 1.0);
        double power = 0;
        for (const auto& v : h) power += std::norm(v);
        EXPECT_LE(power, 128.0 / (spec.C * spec.C));
    }
}

TEST(FilterResponse, Validation)
{
    FilterSpec spec;
    EXPECT_THROW(filter_response(spec, 1, 1.0), ParameterError);
    EXPECT_THROW(filter_response(spec, 8, 0.0), ParameterError);
    spec.C = 0;
    EXPECT_THROW(filter_response(spec, 8, 1.0), ParameterError);
    spec = FilterSpec{};
    spec.floor_fraction = 0;
    EXPECT_THROW(spec.validate(), ParameterError);
    spec = FilterSpec{};
    spec.mu = -1;
    EXPECT_THROW(spec.validate(), ParameterError);
    EXPECT_EQ(to_string(FilterSymbol::discrete), "discrete");
}

TEST(InvertPccgi, AbsorptionOnlyLimit)
{
    const auto t = periodic_thickness(6, 20, 1.0);
    FilterSpec spec;
    spec.C = 1;
    spec.G = 0;
    spec.mu = 0.7;
    ImageGrid img = t;
    for (double& v : img.values()) v = std::exp(-spec.mu * v);
    const auto r = invert_pccgi(img, spec);
    for (std::size_t p = 0; p < t.size(); ++p) EXPECT_NEAR(r.thickness[p], t[p], 1e-10);
    EXPECT_EQ(r.clamped, 0u);
    EXPECT_TRUE(r.quality_ok);

    ImageGrid scaled = img;
    scaled *= 0.3;
    const auto s = invert_pccgi(scaled, spec);
    for (std::size_t p = 0; p < t.size(); ++p) EXPECT_NEAR(s.thickness[p], t[p] - std::log(0.3) / spec.mu, 1e-10);
}

TEST(InvertPccgi, MatchedDiscreteSymbolRoundTrip)
{
    for (std::size_t m : {31u, 64u}) {
        const auto t = periodic_thickness(8, m, 0.8);
        const auto spec = carbon_filter(FilterSymbol::discrete);
        const auto image = expected_pccgi(t, {spec.C, spec.G}, spec.mu);
        const auto r = invert_pccgi(image, spec);
        EXPECT_LT(ts::relative_rms(r.thickness, t), 1e-8) << m;
        EXPECT_LT(r.max_imag_residue, 1e-10 * rms(image));
        EXPECT_EQ(r.thickness.pitch(), 0.8);
    }
}

TEST(InvertPccgi, SingleEllipsoidRoundTrips)
{
    const auto ph = phantom_ellipsoids(64, 64, 1.0, single_ellipsoid_layout());
    const auto image = expected_pccgi(ph.thickness, {carbon_filter(FilterSymbol::discrete).C,
                                                     carbon_filter(FilterSymbol::discrete).G},
                                      optics(carbon()).mu);
    const auto discrete = invert_pccgi(image, carbon_filter(FilterSymbol::discrete));
    EXPECT_LT(ts::relative_rms(discrete.thickness, ph.thickness), 1e-8);

    const auto continuous = invert_pccgi(image, carbon_filter(FilterSymbol::continuous));
    const auto interior = eroded_support(ph.thickness, 2);
    ASSERT_GT(interior.size(), 500u);
    double err = 0, ref = 0;
    for (std::size_t p : interior) {
        err += std::pow(continuous.thickness[p] - ph.thickness[p], 2);
        ref += ph.thickness[p] * ph.thickness[p];
    }
    EXPECT_LT(std::sqrt(err / ref), 0.02);
}

TEST(InvertPccgi, ShiftEquivarianceAlongX)
{
    const auto spec = carbon_filter(FilterSymbol::discrete);
    ImageGrid img(4, 16);
    for (std::size_t p = 0; p < img.size(); ++p) img[p] = 0.4 + 0.1 * std::sin(0.7 * static_cast<double>(p));
    ImageGrid shifted(4, 16);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 16; ++j) shifted(i, (j + 5) % 16) = img(i, j);
    const auto a = invert_pccgi(img, spec).thickness;
    const auto b = invert_pccgi(shifted, spec).thickness;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(b(i, (j + 5) % 16), a(i, j), 1e-10);
}

TEST(InvertPccgi, PaddingKeepsInteriorOfNonPeriodicRows)
{
    const auto ph = phantom_ellipsoids(16, 64, 1.0, {{-6.5, 0.5, 8, 16}});
    auto spec = carbon_filter(FilterSymbol::discrete);
    const auto image = expected_pccgi(ph.thickness, {spec.C, spec.G}, spec.mu);
    spec.pad = 48;
    const auto padded = invert_pccgi(image, spec);
    EXPECT_EQ(padded.thickness.cols(), 64u);
    EXPECT_EQ(padded.clamped, 0u);
    EXPECT_LT(padded.max_imag_residue, 1e-10 * rms(image));
    spec.pad = 65;
    EXPECT_THROW(invert_pccgi(image, spec), ParameterError);
}

TEST(InvertPccgi, ClampingAndQualityFailure)
{
    FilterSpec spec;
    spec.C = 1;
    spec.G = 0;
    spec.mu = 1;
    ImageGrid img(4, 4, 1.0, 0.5);
    img(0, 0) = -1;
    img(1, 1) = 0;
    const auto r = invert_pccgi(img, spec);
    EXPECT_EQ(r.clamped, 2u);
    EXPECT_DOUBLE_EQ(r.clamped_fraction, 2.0 / 16.0);
    EXPECT_DOUBLE_EQ(r.floor, spec.floor_fraction * 0.5);
    EXPECT_FALSE(r.quality_ok);
    EXPECT_THROW(require_quality(r, spec), QualityError);
    for (double v : r.thickness.values()) EXPECT_TRUE(std::isfinite(v));
    spec.max_clamped_fraction = 0.2;
    const auto lenient = invert_pccgi(img, spec);
    EXPECT_TRUE(lenient.quality_ok);
    EXPECT_NO_THROW(require_quality(lenient, spec));

    const auto dark = invert_pccgi(ImageGrid(2, 4, 1.0, -1.0), spec);
    EXPECT_EQ(dark.clamped, 8u);
    EXPECT_GT(dark.floor, 0.0);
}

TEST(InvertPccgi, InputValidation)
{
    const FilterSpec spec;
    EXPECT_THROW(invert_pccgi(ImageGrid(4, 1, 1.0, 0.5), spec), ParameterError);
    ImageGrid bad(2, 4, 1.0, 0.5);
    bad(1, 2) = std::nan("");
    EXPECT_THROW(invert_pccgi(bad, spec), ParameterError);
}

TEST(InvertPccgi, ThreadCountDoesNotChangeTheResult)
{
    const auto t = periodic_thickness(33, 40, 1.0);
    const auto spec = carbon_filter(FilterSymbol::continuous);
    const auto image = expected_pccgi(t, {spec.C, spec.G}, spec.mu);
    set_thread_limit(1);
    const auto serial = invert_pccgi(image, spec).thickness;
    set_thread_limit(0);
    EXPECT_EQ(invert_pccgi(image, spec).thickness, serial);
}

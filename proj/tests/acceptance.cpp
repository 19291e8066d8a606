// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "ghostlab/dose.hpp"
#include "ghostlab/inverse.hpp"
#include "ghostlab/orthonorm.hpp"
#include "ghostlab/randbasis.hpp"
#include "ghostlab/xpci.hpp"
#include "support.hpp"

using namespace ghostlab;
namespace ts = ghostlab::test_support;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double rel_dev(double measured, double expected) { return std::abs(measured / expected - 1.0); }

/// Per-pixel running sums over independent trials.
struct PixelMoments {
    explicit PixelMoments(std::size_t n) : s(n, 0.0), s2(n, 0.0) {}
    void add(const ImageGrid& img)
    {
        for (std::size_t p = 0; p < s.size(); ++p) {
            s[p] += img[p];
            s2[p] += img[p] * img[p];
        }
        ++trials;
    }
    [[nodiscard]] double mean(std::size_t p) const { return s[p] / static_cast<double>(trials); }
    [[nodiscard]] double var(std::size_t p) const
    {
        const double t = static_cast<double>(trials);
        return (s2[p] - s[p] * s[p] / t) / (t - 1.0);
    }
    [[nodiscard]] double total_var() const
    {
        double v = 0;
        for (std::size_t p = 0; p < s.size(); ++p) v += var(p);
        return v;
    }
    std::vector<double> s, s2;
    std::size_t trials = 0;
};

const std::vector<Material>& materials()
{
    static const auto t = builtin_materials();
    return t;
}

// 1 ------------------------------------------------------------------------
Verdict snr_scaling()
{
    const auto f = ts::textured_target(32, 32);
    const std::size_t nm = f.size(), seeds = 100;
    const auto dist = DistributionSpec::uniform(-0.5, 0.5);
    Verdict v{true, ""};
    for (std::size_t mult : {1u, 4u, 16u}) {
        const std::size_t N = mult * nm;
        double mse = 0;
        for (std::size_t s = 0; s < seeds; ++s) {
            const auto img = synthesize(f, LazyBasis(RandomBasisSpec{32, 32, N, dist, 10000 * mult + s})).image;
            const double e = rms_difference(img, f);
            mse += e * e;
        }
        mse /= static_cast<double>(seeds);
        const double snr = std::sqrt(f.sum_squares() / static_cast<double>(nm) / mse);
        const double want = std::sqrt(static_cast<double>(mult));
        v.pass = v.pass && rel_dev(snr, want) < 0.10;
        v.detail += fmt("N=%zunm SNR %.4f (want %.0f) ", mult, snr, want);
    }
    return v;
}

// 2 ------------------------------------------------------------------------
Verdict gram_schmidt_variance()
{
    const auto f = ts::textured_target(32, 32);
    const std::size_t nm = f.size(), seeds = 100;
    Verdict v{true, ""};
    for (double frac : {0.25, 0.5, 0.75}) {
        const auto N = static_cast<std::size_t>(frac * static_cast<double>(nm));
        double mse = 0;
        for (std::size_t s = 0; s < seeds; ++s) {
            const auto basis = gen_random_basis(32, 32, N - 1, DistributionSpec::uniform(-0.5, 0.5), 20000 + N + s);
            const double e = rms_difference(reconstruct_gs(f, orthonormalize(basis, true), N), f);
            mse += e * e;
        }
        mse /= static_cast<double>(seeds);
        const double want = predict_variance_gs(f, N).variance;
        v.pass = v.pass && rel_dev(mse, want) < 0.15;
        v.detail += fmt("N/nm=%.2f var %.5f (model %.5f) ", frac, mse, want);
    }
    return v;
}

// 3 ------------------------------------------------------------------------
Verdict completeness_variance()
{
    const std::size_t n = 8, N = 1000, trials = 500;
    Verdict v{true, ""};
    for (const auto& dist : {DistributionSpec::uniform(-0.5, 0.5), DistributionSpec::gaussian(0.0, 1.0)}) {
        std::vector<double> off, peak;
        for (std::size_t t = 0; t < trials; ++t) {
            const auto basis = gen_random_basis(n, n, N, dist, 30000 + t);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const auto map = completeness_map(basis, i, j);
                    for (std::size_t p = 0; p < map.size(); ++p) (p == i * n + j ? peak : off).push_back(map[p]);
                }
        }
        const double off_var = ts::moments(off).var, peak_var = ts::moments(peak).var;
        const double off_want = 1.0 / static_cast<double>(N);
        const double peak_want = dist.variance_of_square() / (static_cast<double>(N) * dist.variance() * dist.variance());
        v.pass = v.pass && rel_dev(off_var, off_want) < 0.10 && rel_dev(peak_var, peak_want) < 0.10;
        v.detail += fmt("%s off %.4g/%.4g peak %.4g/%.4g ", dist.kind == DistributionKind::uniform ? "uniform" : "gaussian",
                        off_var, off_want, peak_var, peak_want);
    }
    return v;
}

// 4 ------------------------------------------------------------------------
Verdict direct_noise()
{
    const auto f = ts::textured_target(8, 8);
    const double lambda = 1e3;
    PixelMoments m(f.size());
    for (std::size_t t = 0; t < 10000; ++t) m.add(direct_image_noisy(f, lambda, 40000 + t));
    const double measured = m.total_var(), want = direct_variance(f, lambda);
    return {rel_dev(measured, want) < 0.05, fmt("total variance %.5g vs <f>/lambda %.5g", measured, want)};
}

// 5 ------------------------------------------------------------------------
Verdict dose_consistency()
{
    const std::size_t n = 8, acquisitions = 1000;
    const double lambda = 1e3;
    Verdict v{true, ""};
    std::size_t favorable = 0;
    for (std::uint64_t inst = 0; inst < 6; ++inst) {
        ImageGrid f(n, n);
        const double density = 1.0 / static_cast<double>(1 + inst);
        for (std::size_t p = 0; p < f.size(); ++p) {
            CounterRng rng(50000 + inst, StreamDomain::test, 0, static_cast<std::uint32_t>(p));
            f[p] = rng.uniform() < density ? rng.uniform() : 0.0;
        }
        if (f.sum() == 0) f[0] = 1;
        const auto dist = inst % 2 ? DistributionSpec::gaussian(0, 1) : DistributionSpec::uniform(-0.5, 0.5);
        const auto onb = orthonormalize(gen_random_basis(n, n, n * n - 1, dist, 60000 + inst), true);
        const auto masks = to_masks(onb);
        const auto r = dose_inequality(f, masks, onb, lambda);
        PixelMoments ghost(f.size()), direct(f.size());
        for (std::size_t t = 0; t < acquisitions; ++t) {
            ghost.add(ghost_image_noisy(f, masks, onb, lambda, 70000 + 1000 * inst + t));
            direct.add(direct_image_noisy(f, lambda, 80000 + 1000 * inst + t));
        }
        const bool mc = ghost.total_var() < direct.total_var();
        favorable += r.ghost_favorable;
        v.pass = v.pass && mc == r.ghost_favorable;
        v.detail += fmt("[lhs/rhs %.3g mc %.3g %s] ", r.lhs / r.rhs, ghost.total_var() / direct.total_var(),
                        mc == r.ghost_favorable ? "agree" : "DISAGREE");
    }
    v.detail += fmt("ghost favorable in %zu/6", favorable);
    return v;
}

// 6 ------------------------------------------------------------------------
Verdict rocking_linearization()
{
    const auto rc = linearize_rocking(1.0, 2.3737, 0.7146, 0.5);
    const bool ok = rel_dev(rc.alpha, 0.5011) < 0.005 && rel_dev(std::abs(rc.beta), 9.3875e5) < 0.005;
    return {ok, fmt("alpha %.5f |beta| %.6g per rad", rc.alpha, std::abs(rc.beta))};
}

// 7 ------------------------------------------------------------------------
Verdict material_physics()
{
    const auto& carbon = find_material(materials(), "carbon");
    const double delta = material_delta(carbon, kFormFactorEnergyKeV);
    const auto ph = phantom_ellipsoids(64, 64, 1.0, single_ellipsoid_layout());
    const auto r = reflectivity_factor(ph.thickness, optics(carbon), default_rocking_curve());
    const bool ok = rel_dev(delta, 2.30e-7) < 0.02 && r.min() > 0.25 && r.max() < 0.70;
    return {ok, fmt("delta %.6g, reflectivity band [%.4f, %.4f]", delta, r.min(), r.max())};
}

/// Chi-square goodness of fit of `x` to a normal with its own mean and
/// variance, bins of width sd/2 merged until each expects at least 5 counts.
double normality_p_value(const std::vector<double>& x)
{
    const auto m = ts::moments(x);
    const double sd = std::sqrt(m.var), n = static_cast<double>(x.size());
    auto cdf = [&](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
    std::vector<double> edges{-INFINITY};
    for (double z = -4.0; z <= 4.0 + 1e-9; z += 0.5) edges.push_back(z);
    edges.push_back(INFINITY);
    std::vector<double> obs, expct;
    double o = 0, e = 0;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
        e += n * (cdf(edges[b + 1]) - cdf(edges[b]));
        o += static_cast<double>(std::count_if(x.begin(), x.end(), [&](double v) {
            const double z = (v - m.mean) / sd;
            return z >= edges[b] && z < edges[b + 1];
        }));
        if (e >= 5 && n * (1.0 - cdf(edges[b + 1])) >= 5) {
            obs.push_back(o);
            expct.push_back(e);
            o = e = 0;
        }
    }
    obs.back() += o;
    expct.back() += e;
    double chi2 = 0;
    for (std::size_t b = 0; b < obs.size(); ++b) chi2 += (obs[b] - expct[b]) * (obs[b] - expct[b]) / expct[b];
    const boost::math::chi_squared dist(static_cast<double>(obs.size() - 3));
    return boost::math::cdf(boost::math::complement(dist, chi2));
}

// 8 ------------------------------------------------------------------------
Verdict desk_scale_single_ellipsoid()
{
    const std::size_t n = 64, nm = n * n;
    const auto& carbon = find_material(materials(), "carbon");
    const auto sample = optics(carbon);
    const auto rc = default_rocking_curve();
    const auto ph = phantom_ellipsoids(n, n, 1.0, single_ellipsoid_layout());
    const auto g = forward_intensity(ph.thickness, sample, rc).intensity;
    const auto expected = expected_pccgi(ph.thickness, pccgi_constants(rc, sample), sample.mu);
    SpeckleParams sp;
    sp.rows = sp.cols = n;
    sp.mu0 = find_material(materials(), "copper").mu();
    sp.seed = 90001;

    auto standard = [&](std::size_t N) {
        SpeckleParams p = sp;
        p.count = N;
        const IidSpeckleSource src(p);
        return pccgi_reconstruct(acquire_pccgi_buckets(g, src, 1.0), src, ReconstructionMode::standard, 1.0);
    };
    const auto d = standard(16 * nm);
    std::vector<double> err(nm);
    double var = 0;
    for (std::size_t p = 0; p < nm; ++p) {
        err[p] = d[p] - expected[p];
        var += err[p] * err[p];
    }
    var /= static_cast<double>(nm);
    const double want = g.sum_squares() / static_cast<double>(16 * nm);
    const double pval = normality_p_value(err);

    SpeckleParams gp = sp;
    gp.count = nm / 2;
    const IidSpeckleSource gsrc(gp);
    const auto gs = pccgi_reconstruct(acquire_pccgi_buckets(g, gsrc, 1.0), gsrc, ReconstructionMode::gram_schmidt, 1.0);
    const double gs_rms = rms_difference(gs, expected);
    const double std_rms = rms_difference(standard(nm), expected);

    const bool ok = rel_dev(var, want) < 0.15 && pval > 0.01 && gs_rms < std_rms;
    return {ok, fmt("error var %.5f vs <g^2>/N %.5f, normality p %.3f, GS(0.5nm) rms %.4f < standard(nm) rms %.4f", var,
                    want, pval, gs_rms, std_rms)};
}

// 9 ------------------------------------------------------------------------
Verdict inverse_round_trip()
{
    const auto sample = optics(find_material(materials(), "carbon"));
    const auto k = pccgi_constants(default_rocking_curve(), sample);
    FilterSpec spec;
    spec.C = k.C;
    spec.G = k.G;
    spec.mu = sample.mu;

    const auto ph = phantom_ellipsoids(64, 64, 1.0, single_ellipsoid_layout());
    const auto image = expected_pccgi(ph.thickness, k, sample.mu);
    spec.symbol = FilterSymbol::discrete;
    const double discrete = ts::relative_rms(invert_pccgi(image, spec).thickness, ph.thickness);

    spec.symbol = FilterSymbol::continuous;
    const auto cont = invert_pccgi(image, spec).thickness;
    double err = 0, ref = 0;
    for (std::size_t i = 2; i + 2 < 64; ++i)
        for (std::size_t j = 2; j + 2 < 64; ++j) {
            bool inside = true;
            for (std::size_t a = i - 2; a <= i + 2; ++a)
                for (std::size_t b = j - 2; b <= j + 2; ++b) inside = inside && ph.thickness(a, b) > 0;
            if (!inside) continue;
            err += std::pow(cont(i, j) - ph.thickness(i, j), 2);
            ref += ph.thickness(i, j) * ph.thickness(i, j);
        }
    const double continuous = std::sqrt(err / ref);

    FilterSpec flat;
    flat.C = 1;
    flat.G = 0;
    flat.mu = sample.mu;
    ImageGrid absorb = ph.thickness;
    for (double& x : absorb.values()) x = std::exp(-flat.mu * x);
    double absorption = 0;
    const auto t = invert_pccgi(absorb, flat).thickness;
    for (std::size_t p = 0; p < t.size(); ++p) absorption = std::max(absorption, std::abs(t[p] - ph.thickness[p]));

    const bool ok = discrete < 1e-8 && continuous < 0.02 && absorption < 1e-10;
    return {ok, fmt("discrete %.3g, continuous interior %.4f, absorption limit max err %.3g mm", discrete, continuous,
                    absorption)};
}

// 10 -----------------------------------------------------------------------
Verdict scaled_ten_ellipsoids()
{
    const std::size_t n = 32, seeds = 200;
    const double pitch = 2.0, lambda = 1e8;
    const auto sample = optics(find_material(materials(), "carbon"));
    const auto rc = default_rocking_curve();
    const auto k = pccgi_constants(rc, sample);
    const auto ph = phantom_ellipsoids(n, n, pitch, ten_ellipsoid_layout());
    const auto g = forward_intensity(ph.thickness, sample, rc).intensity;
    const auto absorption = absorption_intensity(ph.thickness, sample);

    SpeckleParams sp;
    sp.rows = sp.cols = n;
    sp.count = 16 * n * n;
    sp.mu0 = find_material(materials(), "copper").mu();
    const double gain = speckle_psf_gain(sp);
    ImageGrid model = expected_speckle_reconstruction(g, sp);
    model *= 1.0 / gain;

    FilterSpec spec;
    spec.C = k.C;
    spec.G = k.G;
    spec.mu = sample.mu;
    // Residuals split into the component along the model image, which carries
    // the per-realization gain fluctuation of the speckle master, and the rest.
    const double norm = std::sqrt(model.sum_squares());
    PixelMoments perp(n * n);
    std::vector<double> along;
    double e_err = 0, f_err = 0;
    std::size_t wins = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
        sp.seed = 100000 + s;
        const SmoothedSpeckleSource src(sp);
        ImageGrid d = pccgi_reconstruct(acquire_pccgi_buckets(g, src, 1.0, ShotNoise{lambda, 200000 + s, 0}), src,
                                        ReconstructionMode::standard, pitch);
        d *= 1.0 / gain;
        ImageGrid f = pccgi_reconstruct(acquire_pccgi_buckets(absorption, src, 1.0, ShotNoise{lambda, 200000 + s, 1}),
                                        src, ReconstructionMode::standard, pitch);
        f *= 1.0 / gain;
        const double ee = rms_difference(invert_pccgi(d, spec).filtered, absorption);
        const double fe = rms_difference(f, absorption);
        e_err += ee;
        f_err += fe;
        wins += ee < fe;

        ImageGrid r = d;
        for (std::size_t p = 0; p < r.size(); ++p) r[p] -= model[p];
        const double a = frobenius(r, model) / norm;
        for (std::size_t p = 0; p < r.size(); ++p) r[p] -= a * model[p] / norm;
        along.push_back(a);
        perp.add(r);
    }
    e_err /= static_cast<double>(seeds);
    f_err /= static_cast<double>(seeds);
    const auto a = ts::moments(along);
    const double t = a.mean / std::sqrt(a.var / static_cast<double>(seeds));
    double chi2 = 0;
    for (std::size_t p = 0; p < n * n; ++p)
        chi2 += perp.mean(p) * perp.mean(p) / (perp.var(p) / static_cast<double>(seeds));
    chi2 /= static_cast<double>(n * n);
    const bool ok = std::abs(t) < 3.0 && chi2 < 2.0 && e_err < f_err;
    return {ok, fmt("(a) residual vs expectation (gain %.4f): t along model %.2f, chi2/pixel of the rest %.3f; "
                    "(b) mean rms (e) %.4f < (f) %.4f, (e) better in %zu/%zu seeds",
                    gain, t, chi2, e_err, f_err, wins, seeds)};
}

}  // namespace

int main()
{
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"SNR scaling law", snr_scaling},
        {"Gram-Schmidt variance model", gram_schmidt_variance},
        {"Completeness variance", completeness_variance},
        {"Direct-imaging noise", direct_noise},
        {"Dose-inequality consistency", dose_consistency},
        {"Rocking-curve linearization", rocking_linearization},
        {"Material physics", material_physics},
        {"Single ellipsoid at desk scale", desk_scale_single_ellipsoid},
        {"Inverse round trip", inverse_round_trip},
        {"Scaled ten-ellipsoid pipeline", scaled_ten_ellipsoids},
    };
    int failures = 0;
    int index = 0;
    for (const auto& [name, fn] : criteria) {
        ++index;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = fn();
        }
        catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %2d %s: %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", index, name, v.detail.c_str(), secs);
        std::fflush(stdout);
        failures += !v.pass;
    }
    return failures == 0 ? 0 : 1;
}

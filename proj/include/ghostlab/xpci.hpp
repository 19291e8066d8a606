#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <complex>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ghostlab/errors.hpp"
#include "ghostlab/fft.hpp"
#include "ghostlab/ghostcore.hpp"
#include "ghostlab/grid.hpp"
#include "ghostlab/orthonorm.hpp"
#include "ghostlab/parallel.hpp"
#include "ghostlab/randbasis.hpp"
#include "ghostlab/rng.hpp"
#include "ghostlab/summation.hpp"

namespace ghostlab {

// ---------------------------------------------------------------------------
// Materials
// ---------------------------------------------------------------------------

struct PhysicalConstants {
    double electron_radius_m = 2.8179403e-15;
    double avogadro_per_mol = 6.0221408e23;
    double hc_kev_nm = 1.23984193;
};

/// Energy at which the tabulated form factors apply.
inline constexpr double kFormFactorEnergyKeV = 39.19543;
/// Energy at which the tabulated attenuation coefficients apply.
inline constexpr double kAttenuationEnergyKeV = 40.0;

struct Material {
    std::string name;
    int Z = 0;
    double molar_mass = 0;   // g/mol
    double mu_over_rho = 0;  // cm^2/g
    double density = 0;      // g/cm^3
    double f1 = 0;

    void validate() const
    {
        if (name.empty()) throw ParameterError("material: empty name");
        if (Z < 1) throw ParameterError("material " + name + ": Z must be >= 1");
        if (!(molar_mass > 0) || !(mu_over_rho >= 0) || !(density > 0) || !std::isfinite(f1))
            throw ParameterError("material " + name + ": M_A and rho must be > 0, mu/rho >= 0, f1 finite");
    }

    /// Linear attenuation coefficient in mm^-1.
    [[nodiscard]] double mu() const { return mu_over_rho * density / 10.0; }
};

inline std::vector<Material> builtin_materials()
{
    return {
        {"carbon", 6, 12.011, 0.2076, 1.700, 6.00115},
        {"aluminium", 13, 26.982, 0.5685, 2.699, 13.0206},
        {"copper", 29, 63.546, 4.862, 8.960, 29.2497},
        {"gold", 79, 196.966, 12.98, 19.32, 79.1108},
    };
}

namespace detail {

inline std::string lower(std::string s)
{
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

inline std::string canonical_material_name(const std::string& name)
{
    const std::string n = lower(name);
    if (n == "c") return "carbon";
    if (n == "al" || n == "aluminum") return "aluminium";
    if (n == "cu") return "copper";
    if (n == "au") return "gold";
    return n;
}

}  // namespace detail

/// Case-insensitive lookup by name or chemical symbol.
inline const Material& find_material(const std::vector<Material>& table, const std::string& name)
{
    const std::string key = detail::canonical_material_name(name);
    for (const auto& m : table)
        if (detail::canonical_material_name(m.name) == key) return m;
    throw ParameterError("unknown material '" + name + "'");
}

/// Refractive-index decrement delta = n_a r0 lambda^2 f1 / (2 pi) with
/// n_a = rho N_A / M_A and lambda = hc / E.
inline double material_delta(const Material& mat, double energy_kev, const PhysicalConstants& k = {})
{
    if (!(energy_kev > 0) || !std::isfinite(energy_kev)) throw ParameterError("material_delta: energy must be > 0");
    mat.validate();
    const double n_a = mat.density * 1e6 * k.avogadro_per_mol / mat.molar_mass;  // atoms per m^3
    const double lambda = k.hc_kev_nm / energy_kev * 1e-9;                       // m
    return n_a * k.electron_radius_m * lambda * lambda * mat.f1 / (2.0 * std::numbers::pi);
}

/// The two optical constants the forward model consumes.
struct MaterialOptics {
    double mu = 0;     // mm^-1
    double delta = 0;  // dimensionless
};

inline MaterialOptics optics(const Material& mat, double energy_kev = kFormFactorEnergyKeV,
                             const PhysicalConstants& k = {})
{
    return {mat.mu(), material_delta(mat, energy_kev, k)};
}

// ---------------------------------------------------------------------------
// Rocking curve
// ---------------------------------------------------------------------------

enum class WorkingSide { positive, negative };

struct RockingCurve {
    double R0 = 1;
    double M = 1;
    double a = 1;       // urad
    double theta0 = 0;  // urad
    double alpha = 1;
    double beta = 0;  // per rad

    void validate() const
    {
        if (!(R0 > 0) || !(M > 0) || !(a > 0) || !std::isfinite(R0) || !std::isfinite(M) || !std::isfinite(a))
            throw ParameterError("rocking curve: R0, M and a must be finite and > 0");
    }

    [[nodiscard]] double beta_per_urad() const { return beta * 1e-6; }
};

inline double pearson_vii(double theta_urad, const RockingCurve& rc)
{
    rc.validate();
    return rc.R0 * std::pow(1.0 + theta_urad * theta_urad / (rc.M * rc.a * rc.a), -rc.M);
}

/// Linearizes the Pearson VII curve about the point where R / R0 equals
/// `relative_reflectivity`, on the chosen flank.
inline RockingCurve linearize_rocking(double R0, double M, double a, double relative_reflectivity,
                                      WorkingSide side = WorkingSide::positive)
{
    RockingCurve rc{R0, M, a, 0, 0, 0};
    rc.validate();
    if (!(relative_reflectivity > 0 && relative_reflectivity < 1))
        throw ParameterError("linearize_rocking: relative reflectivity must lie in (0, 1)");
    const double magnitude = a * std::sqrt(M * (std::pow(relative_reflectivity, -1.0 / M) - 1.0));
    rc.theta0 = side == WorkingSide::positive ? magnitude : -magnitude;
    const double base = 1.0 + rc.theta0 * rc.theta0 / (M * a * a);
    rc.alpha = R0 * std::pow(base, -M);
    rc.beta = -(2.0 * rc.theta0 * R0 / (a * a)) * std::pow(base, -M - 1.0) * 1e6;
    return rc;
}

/// Si(333) analyzer at 40 keV linearized at half maximum.
inline RockingCurve default_rocking_curve(WorkingSide side = WorkingSide::positive)
{
    return linearize_rocking(1.0, 2.3737, 0.7146, 0.5, side);
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

struct EllipsoidSpec {
    double cx = 0;  // mm
    double cy = 0;  // mm
    double aleph = 1;
    double radius = 1;  // mm
};

struct Phantom {
    ImageGrid thickness;
    std::vector<EllipsoidSpec> ellipsoids;
};

/// Pixel centres are symmetric about the optical axis:
/// x = (j - (cols-1)/2) pitch and y = (i - (rows-1)/2) pitch.
inline double pixel_x(std::size_t j, std::size_t cols, double pitch)
{
    return (static_cast<double>(j) - (static_cast<double>(cols) - 1.0) / 2.0) * pitch;
}

inline double pixel_y(std::size_t i, std::size_t rows, double pitch)
{
    return (static_cast<double>(i) - (static_cast<double>(rows) - 1.0) / 2.0) * pitch;
}

/// Projected thickness of a set of ellipsoids,
/// T = sum 2 Re sqrt((r/aleph)^2 - ((x-cx)/aleph)^2 - ((y-cy)/aleph)^2).
inline Phantom phantom_ellipsoids(std::size_t rows, std::size_t cols, double pitch,
                                  const std::vector<EllipsoidSpec>& specs)
{
    if (specs.empty()) throw ParameterError("phantom_ellipsoids: no ellipsoids");
    for (const auto& s : specs)
        if (!(s.radius > 0) || !(s.aleph > 0) || !std::isfinite(s.cx) || !std::isfinite(s.cy))
            throw ParameterError("phantom_ellipsoids: r and aleph must be > 0");
    ImageGrid t(rows, cols, pitch);
    for (std::size_t i = 0; i < rows; ++i) {
        const double y = pixel_y(i, rows, pitch);
        for (std::size_t j = 0; j < cols; ++j) {
            const double x = pixel_x(j, cols, pitch);
            double sum = 0;
            for (const auto& s : specs) {
                const double dx = x - s.cx, dy = y - s.cy;
                const double arg = s.radius * s.radius - dx * dx - dy * dy;
                if (arg > 0) sum += 2.0 * std::sqrt(arg) / s.aleph;
            }
            t(i, j) = sum;
        }
    }
    return {std::move(t), specs};
}

inline std::vector<EllipsoidSpec> single_ellipsoid_layout() { return {{0.0, 0.0, 8.0, 16.0}}; }

/// Ten non-overlapping carbon ellipsoids on a 64 x 64 mm field. Centres sit on
/// whole millimetres, half a pixel from every pixel centre, so no pixel centre
/// lies exactly on a rim.
inline std::vector<EllipsoidSpec> ten_ellipsoid_layout()
{
    return {
        {-18, -18, 4, 10}, {16, -19, 4, 9}, {-19, 10, 4, 8},  {4, 3, 4, 8},  {21, 13, 4, 7},
        {-2, -22, 4, 5},   {-3, 23, 4, 5},  {-24, -3, 4, 4},  {25, -3, 4, 4}, {13, 25, 4, 4},
    };
}

// ---------------------------------------------------------------------------
// Derivative along x
// ---------------------------------------------------------------------------

enum class DerivativeScheme { central, spectral };

/// d/dx along columns with periodic rows. `central` is the two-point stencil
/// (v[j+1] - v[j-1]) / (2 pitch); `spectral` multiplies by i k_x in Fourier
/// space with the Nyquist bin zeroed.
inline ImageGrid derivative_x(const ImageGrid& v, DerivativeScheme scheme = DerivativeScheme::central)
{
    const std::size_t n = v.rows(), m = v.cols();
    const double h = v.pitch();
    ImageGrid out(n, m, h);
    if (m < 2) return out;
    if (scheme == DerivativeScheme::central) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                out(i, j) = (v(i, (j + 1) % m) - v(i, (j + m - 1) % m)) / (2.0 * h);
        return out;
    }
    Fft1d fft(m);
    std::vector<std::complex<double>> row(m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) row[j] = v(i, j);
        fft.forward(row);
        for (std::size_t j = 0; j < m; ++j) {
            const double k = is_nyquist_bin(j, m) ? 0.0 : angular_frequency(j, m, h);
            row[j] *= std::complex<double>(0.0, k);
        }
        fft.backward(row);
        for (std::size_t j = 0; j < m; ++j) out(i, j) = row[j].real() / static_cast<double>(m);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward model
// ---------------------------------------------------------------------------

struct ForwardResult {
    ImageGrid intensity;
    /// Pixels where alpha + beta delta T_x < 0 was clamped to zero.
    std::size_t clamped = 0;
};

/// Intensity behind the sample and analyzer,
/// I = I0 exp(-mu T) (alpha + beta delta dT/dx), negative brackets clamped.
inline ForwardResult forward_intensity(const ImageGrid& thickness, const MaterialOptics& sample,
                                       const RockingCurve& rc, double I0 = 1.0,
                                       DerivativeScheme scheme = DerivativeScheme::central)
{
    if (!(I0 > 0)) throw ParameterError("forward_intensity: I0 must be > 0");
    const ImageGrid tx = derivative_x(thickness, scheme);
    ForwardResult r{ImageGrid(thickness.rows(), thickness.cols(), thickness.pitch()), 0};
    for (std::size_t p = 0; p < thickness.size(); ++p) {
        double bracket = rc.alpha + rc.beta * sample.delta * tx[p];
        if (bracket < 0) {
            bracket = 0;
            ++r.clamped;
        }
        r.intensity[p] = I0 * std::exp(-sample.mu * thickness[p]) * bracket;
    }
    return r;
}

inline ForwardResult forward_intensity(const Phantom& ph, const Material& mat, const RockingCurve& rc,
                                       double I0 = 1.0, DerivativeScheme scheme = DerivativeScheme::central)
{
    return forward_intensity(ph.thickness, optics(mat), rc, I0, scheme);
}

/// Relative reflectivity seen by each pixel, (alpha + beta delta T_x) / R0.
inline ImageGrid reflectivity_factor(const ImageGrid& thickness, const MaterialOptics& sample,
                                     const RockingCurve& rc, DerivativeScheme scheme = DerivativeScheme::central)
{
    ImageGrid out = derivative_x(thickness, scheme);
    for (double& v : out.values()) v = (rc.alpha + rc.beta * sample.delta * v) / rc.R0;
    return out;
}

/// Plain absorption image I0 exp(-mu T), as seen without the analyzer.
inline ImageGrid absorption_intensity(const ImageGrid& thickness, const MaterialOptics& sample, double I0 = 1.0)
{
    ImageGrid out = thickness;
    for (double& v : out.values()) v = I0 * std::exp(-sample.mu * v);
    return out;
}

struct PCCGIConstants {
    double C = 1;
    double G = 0;  // mm
};

inline PCCGIConstants pccgi_constants(const RockingCurve& rc, const MaterialOptics& sample)
{
    if (!(rc.alpha > 0)) throw ParameterError("pccgi_constants: alpha must be > 0");
    if (!(sample.mu > 0)) throw ParameterError("pccgi_constants: mu must be > 0");
    return {rc.alpha, rc.beta * sample.delta / (sample.mu * rc.alpha)};
}

/// C (1 - G d/dx) exp(-mu T), the derivative acting on the exponential.
inline ImageGrid expected_pccgi(const ImageGrid& thickness, const PCCGIConstants& k, double mu,
                                DerivativeScheme scheme = DerivativeScheme::central)
{
    if (!std::isfinite(k.C) || !std::isfinite(k.G) || !std::isfinite(mu))
        throw ParameterError("expected_pccgi: constants must be finite");
    ImageGrid e = thickness;
    for (double& v : e.values()) v = std::exp(-mu * v);
    const ImageGrid de = derivative_x(e, scheme);
    ImageGrid out(e.rows(), e.cols(), e.pitch());
    for (std::size_t p = 0; p < e.size(); ++p) out[p] = k.C * (e[p] - k.G * de[p]);
    return out;
}

// ---------------------------------------------------------------------------
// Buckets
// ---------------------------------------------------------------------------

/// Bucket through a mask of projected thickness R placed downstream of the
/// analyzer.
inline double pccgi_bucket(const ImageGrid& thickness, const ImageGrid& mask_thickness,
                           const MaterialOptics& sample, const MaterialOptics& mask, const RockingCurve& rc,
                           double I0 = 1.0, DerivativeScheme scheme = DerivativeScheme::central)
{
    thickness.require_shape(mask_thickness);
    const ImageGrid tx = derivative_x(thickness, scheme);
    CompensatedSum acc;
    for (std::size_t p = 0; p < thickness.size(); ++p) {
        const double bracket = std::max(0.0, rc.alpha + rc.beta * sample.delta * tx[p]);
        acc.add(I0 * std::exp(-sample.mu * thickness[p] - mask.mu * mask_thickness[p]) * bracket);
    }
    return acc.value();
}

/// Bucket with the mask upstream of the analyzer, so the mask's own refraction
/// adds beta delta0 dR/dx to the bracket.
inline double mask_upstream_bucket(const ImageGrid& thickness, const ImageGrid& mask_thickness,
                                   const MaterialOptics& sample, const MaterialOptics& mask, const RockingCurve& rc,
                                   double I0 = 1.0, DerivativeScheme scheme = DerivativeScheme::central)
{
    thickness.require_shape(mask_thickness);
    const ImageGrid tx = derivative_x(thickness, scheme);
    const ImageGrid rx = derivative_x(mask_thickness, scheme);
    CompensatedSum acc;
    for (std::size_t p = 0; p < thickness.size(); ++p) {
        const double bracket =
            std::max(0.0, rc.alpha + rc.beta * sample.delta * tx[p] + rc.beta * mask.delta * rx[p]);
        acc.add(I0 * std::exp(-sample.mu * thickness[p] - mask.mu * mask_thickness[p]) * bracket);
    }
    return acc.value();
}

/// Measured bucket P(B lambda') / lambda'. `channel` separates independent
/// acquisitions that share a seed and mask index.
inline double bucket_shot_noise(double B, double lambda_prime, std::uint64_t seed, std::uint32_t stream = 0,
                                std::uint32_t channel = 0)
{
    if (!(B >= 0) || !std::isfinite(B)) throw ParameterError("bucket_shot_noise: B must be finite and >= 0");
    if (!(lambda_prime > 0) || !std::isfinite(lambda_prime))
        throw ParameterError("bucket_shot_noise: lambda' must be finite and > 0");
    if (B == 0) return 0.0;
    CounterRng rng(seed, StreamDomain::bucket_noise, stream, channel);
    return static_cast<double>(poisson(B * lambda_prime, rng)) / lambda_prime;
}

// ---------------------------------------------------------------------------
// Speckle masks
// ---------------------------------------------------------------------------

/// Mask sources yield intensity patterns I0 exp(-mu0 R_k) through fill_member
/// and the underlying thickness R_k through fill_thickness.
template <class S>
concept ThicknessSource = MemberSource<S> && requires(const S& s, std::size_t k, std::span<double> out) {
    s.fill_thickness(k, out);
    { s.rows() } -> std::convertible_to<std::size_t>;
    { s.cols() } -> std::convertible_to<std::size_t>;
};

struct SpeckleParams {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t count = 0;
    double peak_thickness_mm = 0.25;
    double sigma_px = 2.0 / 3.0;
    /// Extra rows/columns of the master pattern; 0 selects the smallest pad
    /// that is at least the grid size and offers `count` distinct translations.
    std::size_t pad = 0;
    double mu0 = 0;  // mm^-1
    double I0 = 1.0;
    std::uint64_t seed = 0;
    /// Member 0 is an open beam (R = 0) instead of a speckle window.
    bool open_beam = false;

    void validate() const
    {
        if (rows < 1 || cols < 1) throw ParameterError("speckle: grid dimensions must be >= 1");
        if (count < 1) throw ParameterError("speckle: count must be >= 1");
        if (!(peak_thickness_mm > 0) || !std::isfinite(peak_thickness_mm))
            throw ParameterError("speckle: peak thickness must be > 0");
        if (!(mu0 >= 0) || !std::isfinite(mu0)) throw ParameterError("speckle: mu0 must be finite and >= 0");
        if (!(I0 > 0)) throw ParameterError("speckle: I0 must be > 0");
    }

    [[nodiscard]] std::size_t speckle_count() const { return open_beam ? count - 1 : count; }

    [[nodiscard]] std::size_t resolved_pad() const
    {
        if (pad != 0) return pad;
        std::size_t p = std::max(rows, cols);
        while ((p + 1) * (p + 1) < speckle_count()) ++p;
        return p;
    }
};

namespace detail {

/// Normalized 1D Gaussian taps over [-r, r] with r = ceil(4 sigma).
inline std::vector<double> gaussian_taps(double sigma)
{
    if (!(sigma > 0) || !std::isfinite(sigma)) throw ParameterError("speckle: sigma must be > 0");
    const int r = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> taps(2 * r + 1);
    for (int t = -r; t <= r; ++t) taps[t + r] = std::exp(-0.5 * t * t / (sigma * sigma));
    const double total = compensated_total(taps);
    for (double& w : taps) w /= total;
    return taps;
}

/// E[exp(-t U)] for U uniform on (0, a).
inline double uniform_mgf(double t, double a)
{
    const double x = t * a;
    if (x == 0.0) return 1.0;
    return -std::expm1(-x) / x;
}

}  // namespace detail

/// Gaussian-smoothed uniform thickness pattern viewed through translated
/// windows. Member k is the window at translations()[k] (shifted by one when
/// an open beam occupies member 0).
class SmoothedSpeckleSource {
public:
    explicit SmoothedSpeckleSource(const SpeckleParams& params) : p_(params)
    {
        p_.validate();
        p_.pad = p_.resolved_pad();
        if (p_.pad < std::max(p_.rows, p_.cols))
            throw ParameterError("speckle: pad must be at least the grid size");
        const std::size_t pool = (p_.pad + 1) * (p_.pad + 1);
        if (pool < p_.speckle_count())
            throw ParameterError("speckle: pad " + std::to_string(p_.pad) + " offers " + std::to_string(pool) +
                                 " translations, fewer than the " + std::to_string(p_.speckle_count()) + " requested");
        taps_ = detail::gaussian_taps(p_.sigma_px);
        build_master();
        draw_translations(pool);
    }

    [[nodiscard]] const SpeckleParams& params() const noexcept { return p_; }
    [[nodiscard]] std::size_t size() const noexcept { return p_.count; }
    [[nodiscard]] std::size_t rows() const noexcept { return p_.rows; }
    [[nodiscard]] std::size_t cols() const noexcept { return p_.cols; }
    [[nodiscard]] std::size_t master_rows() const noexcept { return p_.rows + p_.pad; }
    [[nodiscard]] std::size_t master_cols() const noexcept { return p_.cols + p_.pad; }
    [[nodiscard]] const std::vector<double>& master() const noexcept { return master_; }
    [[nodiscard]] const std::vector<std::pair<std::size_t, std::size_t>>& translations() const noexcept
    {
        return shifts_;
    }
    [[nodiscard]] const std::vector<double>& taps() const noexcept { return taps_; }

    void fill_thickness(std::size_t k, std::span<double> out) const
    {
        check(k, out);
        if (p_.open_beam && k == 0) {
            std::fill(out.begin(), out.end(), 0.0);
            return;
        }
        copy_window(master_, shifts_[p_.open_beam ? k - 1 : k], out);
    }

    void fill_member(std::size_t k, std::span<double> out) const
    {
        check(k, out);
        if (p_.open_beam && k == 0) {
            std::fill(out.begin(), out.end(), p_.I0);
            return;
        }
        copy_window(master_intensity_, shifts_[p_.open_beam ? k - 1 : k], out);
    }

    [[nodiscard]] ImageGrid thickness(std::size_t k) const
    {
        ImageGrid g(p_.rows, p_.cols);
        fill_thickness(k, g.values());
        return g;
    }

    [[nodiscard]] ImageGrid intensity(std::size_t k) const
    {
        ImageGrid g(p_.rows, p_.cols);
        fill_member(k, g.values());
        return g;
    }

private:
    void copy_window(const std::vector<double>& field, std::pair<std::size_t, std::size_t> shift,
                     std::span<double> out) const
    {
        const auto [dy, dx] = shift;
        const std::size_t mc = master_cols();
        for (std::size_t i = 0; i < p_.rows; ++i) {
            const double* src = field.data() + (i + dy) * mc + dx;
            std::copy(src, src + p_.cols, out.begin() + static_cast<std::ptrdiff_t>(i * p_.cols));
        }
    }

    void check(std::size_t k, std::span<double> out) const
    {
        if (k >= p_.count) throw IndexError("speckle: member index out of range");
        if (out.size() != p_.rows * p_.cols) throw ShapeError("speckle: output length != rows * cols");
    }

    void build_master()
    {
        const std::size_t r = (taps_.size() - 1) / 2;
        const std::size_t hr = master_rows() + 2 * r, hc = master_cols() + 2 * r;
        std::vector<double> raw(hr * hc);
        for (std::size_t q = 0; q < raw.size(); ++q) {
            CounterRng rng(p_.seed, StreamDomain::speckle_master, static_cast<std::uint32_t>(q >> 32),
                           static_cast<std::uint32_t>(q));
            raw[q] = p_.peak_thickness_mm * rng.uniform();
        }
        // Separable valid-region filtering: columns first, then rows.
        std::vector<double> tmp(master_rows() * hc, 0.0);
        for (std::size_t i = 0; i < master_rows(); ++i)
            for (std::size_t t = 0; t < taps_.size(); ++t) {
                const double w = taps_[t];
                const double* src = raw.data() + (i + t) * hc;
                double* dst = tmp.data() + i * hc;
                for (std::size_t j = 0; j < hc; ++j) dst[j] += w * src[j];
            }
        master_.assign(master_rows() * master_cols(), 0.0);
        for (std::size_t i = 0; i < master_rows(); ++i)
            for (std::size_t j = 0; j < master_cols(); ++j) {
                double s = 0;
                for (std::size_t t = 0; t < taps_.size(); ++t) s += taps_[t] * tmp[i * hc + j + t];
                master_[i * master_cols() + j] = s;
            }
        master_intensity_.resize(master_.size());
        for (std::size_t q = 0; q < master_.size(); ++q) master_intensity_[q] = p_.I0 * std::exp(-p_.mu0 * master_[q]);
    }

    void draw_translations(std::size_t pool)
    {
        const std::size_t wanted = p_.speckle_count();
        std::vector<std::uint32_t> ids(pool);
        for (std::size_t q = 0; q < pool; ++q) ids[q] = static_cast<std::uint32_t>(q);
        CounterRng rng(p_.seed, StreamDomain::speckle_shift, 0, 0);
        shifts_.reserve(wanted);
        const std::size_t side = p_.pad + 1;
        for (std::size_t k = 0; k < wanted; ++k) {
            const std::size_t j = k + static_cast<std::size_t>(rng.below(pool - k));
            std::swap(ids[k], ids[j]);
            shifts_.emplace_back(ids[k] / side, ids[k] % side);
        }
    }

    SpeckleParams p_;
    std::vector<double> taps_;
    std::vector<double> master_;
    std::vector<double> master_intensity_;
    std::vector<std::pair<std::size_t, std::size_t>> shifts_;
};

/// Masks whose thickness is i.i.d. uniform on (0, peak) at every pixel: one
/// independent speckle per pixel.
class IidSpeckleSource {
public:
    explicit IidSpeckleSource(const SpeckleParams& params) : p_(params) { p_.validate(); }

    [[nodiscard]] const SpeckleParams& params() const noexcept { return p_; }
    [[nodiscard]] std::size_t size() const noexcept { return p_.count; }
    [[nodiscard]] std::size_t rows() const noexcept { return p_.rows; }
    [[nodiscard]] std::size_t cols() const noexcept { return p_.cols; }

    void fill_thickness(std::size_t k, std::span<double> out) const
    {
        if (k >= p_.count) throw IndexError("iid speckle: member index out of range");
        if (out.size() != p_.rows * p_.cols) throw ShapeError("iid speckle: output length != rows * cols");
        if (p_.open_beam && k == 0) {
            std::fill(out.begin(), out.end(), 0.0);
            return;
        }
        CounterRng rng(p_.seed, StreamDomain::iid_mask, static_cast<std::uint32_t>(k), 0);
        for (double& v : out) v = p_.peak_thickness_mm * rng.uniform();
    }

    void fill_member(std::size_t k, std::span<double> out) const
    {
        fill_thickness(k, out);
        for (double& v : out) v = p_.I0 * std::exp(-p_.mu0 * v);
    }

    [[nodiscard]] ImageGrid thickness(std::size_t k) const
    {
        ImageGrid g(p_.rows, p_.cols);
        fill_thickness(k, g.values());
        return g;
    }

    [[nodiscard]] ImageGrid intensity(std::size_t k) const
    {
        ImageGrid g(p_.rows, p_.cols);
        fill_member(k, g.values());
        return g;
    }

private:
    SpeckleParams p_;
};

/// Materialized smoothed-speckle intensity masks.
inline MaskSet speckle_masks(const SpeckleParams& params)
{
    const SmoothedSpeckleSource src(params);
    MaskSet out;
    out.source = MaskSource::smoothed_speckle;
    out.masks.reserve(src.size());
    for (std::size_t k = 0; k < src.size(); ++k) out.masks.push_back(src.intensity(k));
    double lo = out.masks[0].min(), hi = out.masks[0].max();
    for (const auto& m : out.masks) {
        lo = std::min(lo, m.min());
        hi = std::max(hi, m.max());
    }
    out.min = lo;
    out.max = hi;
    out.xi = hi - lo;
    return out;
}

/// Analytic intensity autocovariance of a smoothed speckle pattern,
/// C(d) = I0^2 [prod_s M(mu0 (w_s + w_{s+d})) - prod_s M(mu0 w_s)^2] with M the
/// Laplace transform of the uniform thickness law. Returned on a
/// (4r+1) x (4r+1) grid centred on d = 0.
inline ImageGrid speckle_intensity_covariance(const SpeckleParams& params)
{
    params.validate();
    const auto taps = detail::gaussian_taps(params.sigma_px);
    const int r = static_cast<int>((taps.size() - 1) / 2);
    const int R = 2 * r;
    auto w = [&](int a, int b) -> double {
        if (std::abs(a) > r || std::abs(b) > r) return 0.0;
        return taps[a + r] * taps[b + r];
    };
    const double a = params.peak_thickness_mm, mu0 = params.mu0;
    double log_mean = 0;
    for (int s = -r; s <= r; ++s)
        for (int t = -r; t <= r; ++t) log_mean += std::log(detail::uniform_mgf(mu0 * w(s, t), a));
    ImageGrid cov(2 * R + 1, 2 * R + 1);
    for (int dy = -R; dy <= R; ++dy)
        for (int dx = -R; dx <= R; ++dx) {
            double log_joint = 0;
            for (int s = -R - r; s <= R + r; ++s)
                for (int t = -R - r; t <= R + r; ++t) {
                    const double tw = w(s, t) + w(s + dy, t + dx);
                    if (tw > 0) log_joint += std::log(detail::uniform_mgf(mu0 * tw, a));
                }
            cov(dy + R, dx + R) = params.I0 * params.I0 * (std::exp(log_joint) - std::exp(2.0 * log_mean));
        }
    return cov;
}

/// Total weight sum_d C(d) / C(0) of the normalized intensity autocovariance:
/// the DC gain of the blur a standard-formula reconstruction applies to the
/// image. Equal to 1 for spatially uncorrelated masks.
inline double speckle_psf_gain(const SpeckleParams& params)
{
    const ImageGrid cov = speckle_intensity_covariance(params);
    const double c0 = cov(cov.rows() / 2, cov.cols() / 2);
    if (!(c0 > 0)) throw DegenerateError("speckle_psf_gain: masks have zero variance");
    return cov.sum() / c0;
}

namespace detail {

/// Shared core of the expected speckle reconstruction. `hist` holds the
/// (possibly expected) number of ordered translation pairs at each
/// difference D, on a (2 span_y + 1) x (2 span_x + 1) grid.
inline ImageGrid speckle_expectation(const ImageGrid& g, const SpeckleParams& p, const std::vector<double>& hist,
                                     int span_y, int span_x, double N)
{
    const ImageGrid cov = speckle_intensity_covariance(p);
    const int R = static_cast<int>(cov.rows() / 2);
    const double c0 = cov(R, R);
    if (!(c0 > 0)) throw DegenerateError("expected reconstruction: masks have zero variance");
    const int n = static_cast<int>(p.rows), m = static_cast<int>(p.cols);
    const int hx = 2 * span_x + 1;
    auto C = [&](int dy, int dx) -> double {
        if (std::abs(dy) > R || std::abs(dx) > R) return 0.0;
        return cov(dy + R, dx + R);
    };

    // K(u) = sum_D H(D) C(u + D) for pixel offsets u.
    const int uy = n - 1, ux = m - 1;
    std::vector<double> K(static_cast<std::size_t>((2 * uy + 1) * (2 * ux + 1)), 0.0);
    for (int ay = -uy; ay <= uy; ++ay)
        for (int ax = -ux; ax <= ux; ++ax) {
            double s = 0;
            for (int dy = -R; dy <= R; ++dy)
                for (int dx = -R; dx <= R; ++dx) {
                    const double c = C(dy, dx);
                    if (c == 0.0) continue;
                    const int Dy = dy - ay, Dx = dx - ax;
                    if (std::abs(Dy) > span_y || std::abs(Dx) > span_x) continue;
                    s += c * hist[static_cast<std::size_t>((Dy + span_y) * hx + Dx + span_x)];
                }
            K[static_cast<std::size_t>((ay + uy) * (2 * ux + 1) + ax + ux)] = s;
        }

    ImageGrid out(g.rows(), g.cols(), g.pitch());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double direct = 0, overlap = 0;
            for (int pi = 0; pi < n; ++pi)
                for (int pj = 0; pj < m; ++pj) {
                    const double gv = g(static_cast<std::size_t>(pi), static_cast<std::size_t>(pj));
                    direct += gv * C(pi - i, pj - j);
                    overlap += gv * K[static_cast<std::size_t>((pi - i + uy) * (2 * ux + 1) + pj - j + ux)];
                }
            out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = (direct - overlap / (N * N)) / c0;
        }
    return out;
}

inline void check_expectation_inputs(const ImageGrid& g, const SpeckleParams& p)
{
    if (g.rows() != p.rows || g.cols() != p.cols) throw ShapeError("expected reconstruction: shape mismatch");
    if (p.open_beam) throw ParameterError("expected reconstruction: open-beam member not supported");
}

inline std::pair<int, int> expectation_span(const SpeckleParams& p)
{
    const int R = 2 * static_cast<int>((gaussian_taps(p.sigma_px).size() - 1) / 2);
    return {static_cast<int>(p.rows) - 1 + 2 * R, static_cast<int>(p.cols) - 1 + 2 * R};
}

}  // namespace detail

/// Expectation, over the master pattern, of the standard-formula
/// reconstruction through one SmoothedSpeckleSource when the ideal image is g:
/// g blurred by the normalized intensity autocovariance, minus the bias the
/// bucket mean picks up from windows that overlap one another. `g` is the
/// image arriving at the masks divided by I0.
inline ImageGrid expected_speckle_reconstruction(const ImageGrid& g, const SmoothedSpeckleSource& src)
{
    const auto& p = src.params();
    detail::check_expectation_inputs(g, p);
    const auto [span_y, span_x] = detail::expectation_span(p);
    const std::size_t side = p.pad + 1;
    std::vector<unsigned char> occupied(side * side, 0);
    for (const auto& [ty, tx] : src.translations()) occupied[ty * side + tx] = 1;
    const int hx = 2 * span_x + 1;
    std::vector<double> hist(static_cast<std::size_t>((2 * span_y + 1) * hx), 0.0);
    for (const auto& [ty, tx] : src.translations())
        for (int dy = -span_y; dy <= span_y; ++dy) {
            const long yy = static_cast<long>(ty) + dy;
            if (yy < 0 || yy >= static_cast<long>(side)) continue;
            for (int dx = -span_x; dx <= span_x; ++dx) {
                const long xx = static_cast<long>(tx) + dx;
                if (xx < 0 || xx >= static_cast<long>(side)) continue;
                if (occupied[static_cast<std::size_t>(yy) * side + static_cast<std::size_t>(xx)])
                    hist[static_cast<std::size_t>((dy + span_y) * hx + dx + span_x)] += 1.0;
            }
        }
    return detail::speckle_expectation(g, p, hist, span_y, span_x, static_cast<double>(src.translations().size()));
}

/// As above, additionally averaged over the seeded draw of translations, which
/// are uniform without replacement over the (pad + 1)^2 pool.
inline ImageGrid expected_speckle_reconstruction(const ImageGrid& g, const SpeckleParams& params)
{
    params.validate();
    SpeckleParams p = params;
    p.pad = p.resolved_pad();
    detail::check_expectation_inputs(g, p);
    const auto [span_y, span_x] = detail::expectation_span(p);
    const double side = static_cast<double>(p.pad + 1);
    const double pool = side * side;
    const double N = static_cast<double>(p.speckle_count());
    const double pair_prob = pool > 1 ? N * (N - 1.0) / (pool * (pool - 1.0)) : 0.0;
    const int hx = 2 * span_x + 1;
    std::vector<double> hist(static_cast<std::size_t>((2 * span_y + 1) * hx), 0.0);
    for (int dy = -span_y; dy <= span_y; ++dy)
        for (int dx = -span_x; dx <= span_x; ++dx) {
            const double ny = side - std::abs(dy), nx = side - std::abs(dx);
            double h = 0;
            if (dy == 0 && dx == 0)
                h = N;
            else if (ny > 0 && nx > 0)
                h = pair_prob * ny * nx;
            hist[static_cast<std::size_t>((dy + span_y) * hx + dx + span_x)] = h;
        }
    return detail::speckle_expectation(g, p, hist, span_y, span_x, N);
}

// ---------------------------------------------------------------------------
// Acquisition and reconstruction
// ---------------------------------------------------------------------------

struct ShotNoise {
    double lambda_tilde = 1e8;
    std::uint64_t seed = 0;
    std::uint32_t channel = 0;
};

/// Buckets B_k = <g, I_k> / I0 for the image g arriving at the masks; with
/// noise each becomes P(B_k lambda') / lambda' where lambda' = lambda <I_k>.
template <MemberSource Source>
BucketSeries acquire_pccgi_buckets(const ImageGrid& g, const Source& masks, double I0,
                                   std::optional<ShotNoise> noise = std::nullopt)
{
    if (!(I0 > 0)) throw ParameterError("acquire: I0 must be > 0");
    BucketSeries out;
    out.values.resize(masks.size());
    const BlockRange range{masks.size(), 64};
    parallel_blocks(range.blocks(), [&](std::size_t b) {
        std::vector<double> buf(g.size());
        for (std::size_t k = range.begin(b); k < range.end(b); ++k) {
            masks.fill_member(k, buf);
            double v = compensated_dot(g.values(), buf) / I0;
            if (noise) {
                const double lambda_prime = noise->lambda_tilde * compensated_total(buf);
                v = bucket_shot_noise(std::max(0.0, v), lambda_prime, noise->seed, static_cast<std::uint32_t>(k),
                                      noise->channel);
            }
            out.values[k] = v;
        }
    });
    if (noise) {
        out.lambda_tilde = noise->lambda_tilde;
        out.seed = noise->seed;
    }
    return out;
}

enum class ReconstructionMode { standard, gram_schmidt };

inline std::string to_string(ReconstructionMode m)
{
    return m == ReconstructionMode::standard ? "standard" : "gram_schmidt";
}

/// Standard mode: correlation formula normalized by the empirical variance of
/// all mask intensities. Gram-Schmidt mode: project the buckets onto the
/// orthonormalized intensity patterns (needs N <= nm).
template <MemberSource Source>
ImageGrid pccgi_reconstruct(const BucketSeries& buckets, const Source& masks, ReconstructionMode mode,
                            std::size_t rows, std::size_t cols, double pitch = 1.0)
{
    const std::size_t n = buckets.size();
    const std::size_t pix = rows * cols;
    if (n != masks.size()) throw ShapeError("pccgi_reconstruct: bucket count != mask count");
    if (n < 1) throw ParameterError("pccgi_reconstruct: no buckets");

    if (mode == ReconstructionMode::gram_schmidt) {
        if (n > pix) throw ParameterError("pccgi_reconstruct: Gram-Schmidt needs N <= nm");
        Eigen::MatrixXd a(static_cast<Eigen::Index>(pix), static_cast<Eigen::Index>(n));
        for (std::size_t k = 0; k < n; ++k)
            masks.fill_member(k, std::span<double>(a.col(static_cast<Eigen::Index>(k)).data(), pix));
        const HouseholderFactorization qr(std::move(a));
        const Eigen::VectorXd c = qr.orthonormal_coefficients(buckets.values);
        const Eigen::VectorXd v = qr.expand(c, static_cast<Eigen::Index>(n));
        return ImageGrid(rows, cols, pitch, std::vector<double>(v.data(), v.data() + v.size()));
    }

    if (n < 2) throw ParameterError("pccgi_reconstruct: standard mode needs at least two buckets");
    const double mean_b = buckets.mean();
    const BlockRange range{n, 64};
    struct Partial {
        CompensatedField field;
        CompensatedSum s1, s2;
    };
    std::vector<Partial> partial(range.blocks());
    parallel_blocks(range.blocks(), [&](std::size_t b) {
        std::vector<double> buf(pix);
        Partial acc{CompensatedField(pix), {}, {}};
        for (std::size_t k = range.begin(b); k < range.end(b); ++k) {
            masks.fill_member(k, buf);
            acc.field.axpy(buckets.values[k] - mean_b, buf);
            for (double v : buf) {
                acc.s1.add(v);
                acc.s2.add(v * v);
            }
        }
        partial[b] = std::move(acc);
    });
    CompensatedField total(pix);
    CompensatedSum s1, s2;
    for (const auto& p : partial) {
        total.merge(p.field);
        s1.merge(p.s1);
        s2.merge(p.s2);
    }
    const double count = static_cast<double>(n * pix);
    const double mean_i = s1.value() / count;
    const double var_i = s2.value() / count - mean_i * mean_i;
    if (!(var_i > 0)) throw DegenerateError("pccgi_reconstruct: mask intensities have zero variance");
    ImageGrid out(rows, cols, pitch, total.values());
    out *= 1.0 / (static_cast<double>(n) * var_i);
    return out;
}

template <class Source>
    requires ThicknessSource<Source>
ImageGrid pccgi_reconstruct(const BucketSeries& buckets, const Source& masks, ReconstructionMode mode,
                            double pitch = 1.0)
{
    return pccgi_reconstruct(buckets, masks, mode, masks.rows(), masks.cols(), pitch);
}

inline ImageGrid pccgi_reconstruct(const BucketSeries& buckets, const MaskSet& masks, ReconstructionMode mode)
{
    if (masks.size() == 0) throw ParameterError("pccgi_reconstruct: empty mask set");
    const ImageGrid& first = masks[0];
    return pccgi_reconstruct(buckets, masks, mode, first.rows(), first.cols(), first.pitch());
}

}  // namespace ghostlab

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ghostlab/errors.hpp"
#include "ghostlab/grid.hpp"
#include "ghostlab/randbasis.hpp"
#include "ghostlab/rng.hpp"
#include "ghostlab/summation.hpp"

namespace ghostlab {

/// Relative residual below which a Gram–Schmidt step counts as rank deficient.
inline constexpr double kDependenceTolerance = 1e-12;

/// Householder QR of the nm x K matrix whose columns are vectorized basis
/// members. The factor signs are normalized so that R has a positive diagonal,
/// which makes column k of Q identical to the k-th classical Gram–Schmidt
/// output.
class HouseholderFactorization {
public:
    explicit HouseholderFactorization(Eigen::MatrixXd columns) : qr_(columns.rows(), columns.cols())
    {
        const Eigen::Index k_max = columns.cols();
        if (k_max < 1) throw ParameterError("orthonormalize: no members");
        if (k_max > columns.rows())
            throw ParameterError("orthonormalize: more members (" + std::to_string(k_max) + ") than pixels (" +
                                 std::to_string(columns.rows()) + ")");
        Eigen::VectorXd norms = columns.colwise().norm();
        qr_.compute(columns);
        const auto& packed = qr_.matrixQR();
        signs_.resize(k_max);
        for (Eigen::Index k = 0; k < k_max; ++k) {
            const double rkk = packed(k, k);
            if (!(std::abs(rkk) >= kDependenceTolerance * norms(k)) || norms(k) == 0.0)
                throw DependenceError(static_cast<std::size_t>(k),
                                      "orthonormalize: member " + std::to_string(k) +
                                          " is linearly dependent on its predecessors");
            signs_(k) = rkk < 0 ? -1.0 : 1.0;
        }
    }

    [[nodiscard]] Eigen::Index pixels() const { return qr_.matrixQR().rows(); }
    [[nodiscard]] Eigen::Index columns() const { return qr_.matrixQR().cols(); }

    /// R with positive diagonal.
    [[nodiscard]] Eigen::MatrixXd r_factor() const
    {
        const Eigen::Index k = columns();
        Eigen::MatrixXd r = qr_.matrixQR().topRows(k).triangularView<Eigen::Upper>();
        return signs_.asDiagonal() * r;
    }

    /// Orthonormal members as the columns of an nm x K matrix.
    [[nodiscard]] Eigen::MatrixXd thin_q() const
    {
        Eigen::MatrixXd q = qr_.householderQ() * Eigen::MatrixXd::Identity(pixels(), columns());
        return q * signs_.asDiagonal();
    }

    /// Given w_k = <f, A_k> for every input column, returns <f, Q_k>, i.e.
    /// solves R^T y = w.
    [[nodiscard]] Eigen::VectorXd orthonormal_coefficients(std::span<const double> weights) const
    {
        if (static_cast<Eigen::Index>(weights.size()) != columns())
            throw ShapeError("orthonormal_coefficients: weight count != member count");
        const Eigen::Index k = columns();
        Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(weights.data(), k);
        qr_.matrixQR().topRows(k).triangularView<Eigen::Upper>().transpose().solveInPlace(y);
        return signs_.cwiseProduct(y);
    }

    /// sum_{k < count} c_k Q_k as a length-nm vector.
    [[nodiscard]] Eigen::VectorXd expand(const Eigen::VectorXd& coeffs, Eigen::Index count) const
    {
        if (count > columns() || count > coeffs.size()) throw ParameterError("expand: count exceeds member count");
        Eigen::VectorXd v = Eigen::VectorXd::Zero(pixels());
        v.head(count) = signs_.head(count).cwiseProduct(coeffs.head(count));
        return qr_.householderQ() * v;
    }

    /// <f, Q_k> for k < K computed directly from f.
    [[nodiscard]] Eigen::VectorXd project_coefficients(std::span<const double> f) const
    {
        if (static_cast<Eigen::Index>(f.size()) != pixels()) throw ShapeError("project: length mismatch");
        const Eigen::VectorXd v =
            qr_.householderQ().adjoint() * Eigen::Map<const Eigen::VectorXd>(f.data(), pixels());
        return signs_.cwiseProduct(v.head(columns()));
    }

private:
    Eigen::HouseholderQR<Eigen::MatrixXd> qr_;
    Eigen::VectorXd signs_;
};

/// Strictly orthonormal basis derived from a random one.
struct OrthonormalBasis {
    std::vector<ImageGrid> members;
    /// Member 0 is the constant 1/sqrt(nm).
    bool augmented = false;
    std::uint64_t source_seed = 0;
    DistributionSpec source_dist;

    [[nodiscard]] std::size_t size() const noexcept { return members.size(); }
    [[nodiscard]] const ImageGrid& operator[](std::size_t k) const { return members[k]; }
    [[nodiscard]] std::size_t rows() const { return members.front().rows(); }
    [[nodiscard]] std::size_t cols() const { return members.front().cols(); }
    [[nodiscard]] std::size_t pixels() const { return members.front().size(); }

    void fill_member(std::size_t k, std::span<double> out) const
    {
        const auto v = members.at(k).values();
        std::copy(v.begin(), v.end(), out.begin());
    }

    /// Largest |<Q_k, Q_l> - delta_kl|.
    [[nodiscard]] double gram_residual() const
    {
        double worst = 0.0;
        for (std::size_t k = 0; k < size(); ++k)
            for (std::size_t l = k; l < size(); ++l)
                worst = std::max(worst, std::abs(frobenius(members[k], members[l]) - (k == l ? 1.0 : 0.0)));
        return worst;
    }
};

namespace detail {

inline Eigen::MatrixXd stack_columns(std::span<const ImageGrid* const> members, bool augment)
{
    const std::size_t pix = members.front()->size();
    const Eigen::Index k_total = static_cast<Eigen::Index>(members.size() + (augment ? 1 : 0));
    Eigen::MatrixXd a(static_cast<Eigen::Index>(pix), k_total);
    Eigen::Index col = 0;
    if (augment) a.col(col++).setConstant(1.0 / std::sqrt(static_cast<double>(pix)));
    for (const ImageGrid* m : members) {
        if (m->size() != pix) throw ShapeError("orthonormalize: members differ in size");
        a.col(col++) = Eigen::Map<const Eigen::VectorXd>(m->values().data(), static_cast<Eigen::Index>(pix));
    }
    return a;
}

inline OrthonormalBasis orthonormalize_members(std::span<const ImageGrid* const> members, bool augment,
                                               std::uint64_t seed, const DistributionSpec& dist)
{
    if (members.empty()) throw ParameterError("orthonormalize: empty basis");
    const std::size_t rows = members.front()->rows();
    const std::size_t cols = members.front()->cols();
    const std::size_t pix = rows * cols;
    const std::size_t total = members.size() + (augment ? 1 : 0);
    if (total > pix)
        throw ParameterError("orthonormalize: " + std::to_string(total) + " members exceed nm = " +
                             std::to_string(pix));

    std::unique_ptr<HouseholderFactorization> qr;
    try {
        qr = std::make_unique<HouseholderFactorization>(stack_columns(members, augment));
    } catch (const DependenceError& e) {
        const std::size_t idx = e.index();
        if (augment && idx == 0) throw;
        const std::size_t input = augment ? idx - 1 : idx;
        throw DependenceError(input, "orthonormalize: input member " + std::to_string(input) +
                                         " is linearly dependent on its predecessors");
    }
    const Eigen::MatrixXd q = qr->thin_q();

    OrthonormalBasis out;
    out.augmented = augment;
    out.source_seed = seed;
    out.source_dist = dist;
    out.members.reserve(total);
    for (Eigen::Index k = 0; k < q.cols(); ++k)
        out.members.emplace_back(rows, cols, 1.0, std::vector<double>(q.col(k).data(), q.col(k).data() + pix));
    if (augment) out.members.front() = ImageGrid(rows, cols, 1.0, 1.0 / std::sqrt(static_cast<double>(pix)));
    return out;
}

}  // namespace detail

/// Orthonormalizes a random basis, optionally prepending the constant member
/// 1/sqrt(nm). Member k of the result is a combination of inputs 0..k only.
inline OrthonormalBasis orthonormalize(const RandomBasis& basis, bool augment_constant)
{
    std::vector<const ImageGrid*> ptrs;
    ptrs.reserve(basis.size());
    for (const auto& m : basis.members()) ptrs.push_back(&m);
    return detail::orthonormalize_members(ptrs, augment_constant, basis.seed(), basis.dist());
}

/// Converts weights taken against the raw members into weights against the
/// orthonormal members (the weight half of the Gram–Schmidt recursion).
///
/// For an augmented basis, weights[0] is the weight against the constant
/// member and weights[k] (k >= 1) against basis member k-1.
inline std::vector<double> transform_weights(std::span<const double> weights, const RandomBasis& basis,
                                             const OrthonormalBasis& onb)
{
    const std::size_t k_total = onb.size();
    if (weights.size() != k_total) throw ShapeError("transform_weights: weight count != orthonormal member count");
    if (basis.size() + (onb.augmented ? 1 : 0) != k_total)
        throw ShapeError("transform_weights: orthonormal basis was not derived from this basis");

    const ImageGrid constant(onb.rows(), onb.cols(), 1.0, 1.0 / std::sqrt(static_cast<double>(onb.pixels())));
    auto input = [&](std::size_t k) -> const ImageGrid& {
        if (onb.augmented) return k == 0 ? constant : basis[k - 1];
        return basis[k];
    };

    // <Q_l, A_k> = R(l,k) for l <= k; forward substitution on R^T y = w.
    std::vector<double> out(k_total);
    for (std::size_t k = 0; k < k_total; ++k) {
        const ImageGrid& a = input(k);
        CompensatedSum acc(weights[k]);
        for (std::size_t l = 0; l < k; ++l) acc.add(-frobenius(onb[l], a) * out[l]);
        const double rkk = frobenius(onb[k], a);
        out[k] = acc.value() / rkk;
    }
    return out;
}

/// f^(N) = sum_{k < N} <f, Q_k> Q_k.
inline ImageGrid reconstruct_gs(const ImageGrid& f, const OrthonormalBasis& onb, std::size_t count)
{
    if (count > onb.size()) throw ParameterError("reconstruct_gs: N exceeds the number of members");
    if (onb.size() == 0 || onb.rows() != f.rows() || onb.cols() != f.cols())
        throw ShapeError("reconstruct_gs: dimension mismatch");
    CompensatedField acc(f.size());
    for (std::size_t k = 0; k < count; ++k) acc.axpy(frobenius(f, onb[k]), onb[k].values());
    return ImageGrid(f.rows(), f.cols(), f.pitch(), acc.values());
}

/// Averages reconstruct_gs over `trials` seeded random orderings of the input
/// members; the constant member (when augmenting) always stays first.
inline ImageGrid reconstruct_gs_averaged(const ImageGrid& f, const RandomBasis& basis, std::size_t count,
                                         bool augment_constant, std::size_t trials, std::uint64_t seed)
{
    if (trials < 1) throw ParameterError("reconstruct_gs_averaged: trials must be >= 1");
    CompensatedField acc(f.size());
    for (std::size_t t = 0; t < trials; ++t) {
        std::vector<const ImageGrid*> order;
        for (const auto& m : basis.members()) order.push_back(&m);
        if (t > 0) {
            CounterRng rng(seed, StreamDomain::permutation, static_cast<std::uint32_t>(t), 0);
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        }
        const OrthonormalBasis onb = detail::orthonormalize_members(order, augment_constant, basis.seed(), basis.dist());
        acc.axpy(1.0, reconstruct_gs(f, onb, count).values());
    }
    ImageGrid out(f.rows(), f.cols(), f.pitch(), acc.values());
    out *= 1.0 / static_cast<double>(trials);
    return out;
}

struct GsVariancePrediction {
    double variance = 0;
    /// +infinity for a complete basis.
    double snr = 0;
};

/// Var[f^(N)] = Var[f](1 - N/nm) and the matching global SNR.
inline GsVariancePrediction predict_variance_gs(const ImageGrid& f, std::size_t count)
{
    const std::size_t nm = f.size();
    if (count < 1 || count > nm) throw ParameterError("predict_variance_gs: need 1 <= N <= nm");
    const double var_f = f.spatial_variance();
    if (count == nm) return {0.0, std::numeric_limits<double>::infinity()};
    const double frac = static_cast<double>(count) / static_cast<double>(nm);
    const double var = var_f * (1.0 - frac);
    const double snr = std::sqrt(f.sum_squares() / (var_f * static_cast<double>(nm - count)));
    return {var, snr};
}

}  // namespace ghostlab

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ghostlab/errors.hpp"
#include "ghostlab/orthonorm.hpp"
#include "support.hpp"

using namespace ghostlab;
namespace ts = ghostlab::test_support;

namespace {

/// Textbook classical Gram–Schmidt, used as an independent reference.
std::vector<ImageGrid> classical_gram_schmidt(const std::vector<ImageGrid>& in)
{
    std::vector<ImageGrid> out;
    for (const auto& a : in) {
        ImageGrid v = a;
        for (const auto& q : out) {
            const double c = frobenius(a, q);
            for (std::size_t p = 0; p < v.size(); ++p) v[p] -= c * q[p];
        }
        v *= 1.0 / std::sqrt(v.sum_squares());
        out.push_back(std::move(v));
    }
    return out;
}

OrthonormalBasis from_members(const std::vector<ImageGrid>& members, bool augment)
{
    std::vector<const ImageGrid*> ptrs;
    for (const auto& m : members) ptrs.push_back(&m);
    return detail::orthonormalize_members(ptrs, augment, 0, DistributionSpec::point_mass(0));
}

}  // namespace

TEST(Orthonormalize, TwoVectorExample)
{
    const std::vector<ImageGrid> in{ImageGrid(1, 2, 1.0, {1.0, 0.0}), ImageGrid(1, 2, 1.0, {1.0, 1.0})};
    const auto onb = from_members(in, false);
    ASSERT_EQ(onb.size(), 2u);
    EXPECT_NEAR(onb[0][0], 1.0, 1e-15);
    EXPECT_NEAR(onb[0][1], 0.0, 1e-15);
    EXPECT_NEAR(onb[1][0], 0.0, 1e-15);
    EXPECT_NEAR(onb[1][1], 1.0, 1e-15);
}

TEST(Orthonormalize, MatchesClassicalGramSchmidt)
{
    const auto basis = gen_random_basis(6, 6, 12, DistributionSpec::uniform(-0.5, 0.5), 2);
    const auto onb = orthonormalize(basis, false);
    const auto ref = classical_gram_schmidt(basis.members());
    for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_LT(rms_difference(onb[k], ref[k]), 1e-10) << "member " << k;
}

TEST(Orthonormalize, AugmentedConstantIsExact)
{
    const auto basis = gen_random_basis(5, 4, 6, DistributionSpec::uniform(0, 1), 9);
    const auto onb = orthonormalize(basis, true);
    ASSERT_EQ(onb.size(), 7u);
    EXPECT_TRUE(onb.augmented);
    for (double v : onb[0].values()) EXPECT_EQ(v, 1.0 / std::sqrt(20.0));
    EXPECT_LT(onb.gram_residual(), 1e-12);
}

TEST(Orthonormalize, CompleteSetHasTinyGramResidual)
{
    const auto onb = orthonormalize(gen_random_basis(16, 16, 256, DistributionSpec::uniform(-0.5, 0.5), 4), false);
    EXPECT_LT(onb.gram_residual(), 1e-10);
}

TEST(Orthonormalize, ReportsDependentMemberIndex)
{
    auto members = gen_random_basis(3, 3, 4, DistributionSpec::gaussian(0, 1), 5).members();
    members[2] = members[0];
    members[2] *= 3.0;
    try {
        from_members(members, false);
        FAIL() << "expected DependenceError";
    } catch (const DependenceError& e) {
        EXPECT_EQ(e.index(), 2u);
    }
    try {
        from_members(members, true);
        FAIL() << "expected DependenceError";
    } catch (const DependenceError& e) {
        EXPECT_EQ(e.index(), 2u);
    }
    members[2] = ImageGrid(3, 3, 1.0, 1.0);
    try {
        from_members(members, true);
        FAIL() << "expected DependenceError";
    } catch (const DependenceError& e) {
        EXPECT_EQ(e.index(), 2u);
    }
}

TEST(Orthonormalize, RejectsTooManyMembers)
{
    EXPECT_THROW(orthonormalize(gen_random_basis(3, 3, 10, DistributionSpec::gaussian(0, 1), 1), false),
                 ParameterError);
    EXPECT_THROW(orthonormalize(gen_random_basis(3, 3, 9, DistributionSpec::gaussian(0, 1), 1), true),
                 ParameterError);
}

TEST(TransformWeights, AgreesWithDirectProjection)
{
    const auto basis = gen_random_basis(8, 8, 40, DistributionSpec::uniform(-0.5, 0.5), 6);
    const auto onb = orthonormalize(basis, true);
    const auto f = ts::textured_target(8, 8);
    std::vector<double> w{frobenius(f, onb[0])};
    for (const auto& m : basis.members()) w.push_back(frobenius(f, m));
    const auto t = transform_weights(w, basis, onb);
    for (std::size_t k = 0; k < onb.size(); ++k) EXPECT_NEAR(t[k], frobenius(f, onb[k]), 1e-8) << "member " << k;

    const auto zero = transform_weights(std::vector<double>(w.size(), 0.0), basis, onb);
    for (double v : zero) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(transform_weights(std::vector<double>(3, 0.0), basis, onb), ShapeError);
}

TEST(TransformWeights, ConstantTargetLoadsOnlyTheConstantMember)
{
    const auto basis = gen_random_basis(4, 4, 8, DistributionSpec::uniform(-0.5, 0.5), 6);
    const auto onb = orthonormalize(basis, true);
    const ImageGrid f(4, 4, 1.0, 0.7);
    std::vector<double> w{frobenius(f, onb[0])};
    for (const auto& m : basis.members()) w.push_back(frobenius(f, m));
    const auto t = transform_weights(w, basis, onb);
    EXPECT_NEAR(t[0], 0.7 * 4.0, 1e-12);
    for (std::size_t k = 1; k < t.size(); ++k) EXPECT_NEAR(t[k], 0.0, 1e-12);
}

TEST(ReconstructGs, CompleteSetIsExact)
{
    const auto f = ts::textured_target(8, 8);
    const auto onb = orthonormalize(gen_random_basis(8, 8, 63, DistributionSpec::uniform(-0.5, 0.5), 8), true);
    EXPECT_LT(rms_difference(reconstruct_gs(f, onb, 64), f), 1e-12);
}

TEST(ReconstructGs, FirstMemberGivesTheMean)
{
    const auto f = ts::textured_target(8, 8);
    const auto onb = orthonormalize(gen_random_basis(8, 8, 10, DistributionSpec::uniform(-0.5, 0.5), 8), true);
    const auto r = reconstruct_gs(f, onb, 1);
    for (double v : r.values()) EXPECT_NEAR(v, f.mean(), 1e-14);
    EXPECT_THROW(reconstruct_gs(f, onb, 12), ParameterError);
    EXPECT_THROW(reconstruct_gs(ImageGrid(4, 4), onb, 1), ShapeError);
}

TEST(ReconstructGs, ProjectionIsIdempotentAndErrorIsMonotone)
{
    const auto f = ts::textured_target(8, 8);
    const auto onb = orthonormalize(gen_random_basis(8, 8, 50, DistributionSpec::gaussian(0, 1), 10), true);
    const auto once = reconstruct_gs(f, onb, 20);
    EXPECT_LT(rms_difference(reconstruct_gs(once, onb, 20), once), 1e-13);
    double prev = rms_difference(reconstruct_gs(f, onb, 0), f);
    for (std::size_t n = 1; n <= onb.size(); ++n) {
        const double e = rms_difference(reconstruct_gs(f, onb, n), f);
        EXPECT_LE(e, prev + 1e-14) << "N = " << n;
        prev = e;
    }
}

TEST(ReconstructGs, DependsOnMemberOrderingButAverageIsSmooth)
{
    const auto f = ts::textured_target(8, 8);
    const auto basis = gen_random_basis(8, 8, 30, DistributionSpec::uniform(-0.5, 0.5), 11);
    const auto single = reconstruct_gs_averaged(f, basis, 20, true, 1, 3);
    const auto direct = reconstruct_gs(f, orthonormalize(basis, true), 20);
    EXPECT_LT(rms_difference(single, direct), 1e-13);
    const auto averaged = reconstruct_gs_averaged(f, basis, 20, true, 8, 3);
    EXPECT_GT(rms_difference(averaged, direct), 1e-6);
    EXPECT_THROW(reconstruct_gs_averaged(f, basis, 20, true, 0, 3), ParameterError);
}

TEST(PredictVarianceGs, ClosedForm)
{
    const auto f = ts::checkerboard(4, 4);
    EXPECT_EQ(predict_variance_gs(f, 16).variance, 0.0);
    EXPECT_TRUE(std::isinf(predict_variance_gs(f, 16).snr));
    EXPECT_DOUBLE_EQ(predict_variance_gs(f, 4).variance, 0.25 * 0.75);
    EXPECT_DOUBLE_EQ(predict_variance_gs(f, 8).snr, std::sqrt(8.0 / (0.25 * 8.0)));
    EXPECT_EQ(predict_variance_gs(ImageGrid(4, 4, 1.0, 2.0), 3).variance, 0.0);
    EXPECT_THROW(predict_variance_gs(f, 0), ParameterError);
    EXPECT_THROW(predict_variance_gs(f, 17), ParameterError);
}

TEST(PredictVarianceGs, MatchesEnsembleMeanSquaredError)
{
    const auto f = ts::textured_target(8, 8);
    const std::size_t N = 32, seeds = 200;
    double mse = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto onb = orthonormalize(gen_random_basis(8, 8, N - 1, DistributionSpec::uniform(-0.5, 0.5), 300 + s), true);
        const double e = rms_difference(reconstruct_gs(f, onb, N), f);
        mse += e * e;
    }
    mse /= static_cast<double>(seeds);
    EXPECT_NEAR(mse / predict_variance_gs(f, N).variance, 1.0, 0.15);
}

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "ghostlab/errors.hpp"
#include "ghostlab/grid.hpp"
#include "ghostlab/parallel.hpp"
#include "ghostlab/rng.hpp"
#include "ghostlab/summation.hpp"
#include "support.hpp"

using namespace ghostlab;

TEST(Philox, KnownAnswerZero)
{
    const auto out = Philox4x32::generate({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(out[0], 0x6627e8d5u);
    EXPECT_EQ(out[1], 0xe169c58du);
    EXPECT_EQ(out[2], 0xbc57ac4cu);
    EXPECT_EQ(out[3], 0x9b00dbd8u);
}

TEST(Philox, KnownAnswerAllOnes)
{
    const std::uint32_t f = 0xffffffffu;
    const auto out = Philox4x32::generate({f, f, f, f}, {f, f});
    EXPECT_EQ(out[0], 0x408f276du);
    EXPECT_EQ(out[1], 0x41c83b0eu);
    EXPECT_EQ(out[2], 0xa20bc7c6u);
    EXPECT_EQ(out[3], 0x6d5451fdu);
}

TEST(Philox, KnownAnswerPi)
{
    const auto out =
        Philox4x32::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
    EXPECT_EQ(out[0], 0xd16cfe09u);
    EXPECT_EQ(out[1], 0x94fdccebu);
    EXPECT_EQ(out[2], 0x5001e420u);
    EXPECT_EQ(out[3], 0x24126ea1u);
}

TEST(CounterRng, AddressDeterminesOutput)
{
    CounterRng a(42, StreamDomain::test, 3, 9), b(42, StreamDomain::test, 3, 9);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    CounterRng c(42, StreamDomain::test, 3, 10), d(43, StreamDomain::test, 3, 9), e(42, StreamDomain::basis, 3, 9);
    CounterRng ref(42, StreamDomain::test, 3, 9);
    const auto first = ref.next_u64();
    EXPECT_NE(first, c.next_u64());
    EXPECT_NE(first, d.next_u64());
    EXPECT_NE(first, e.next_u64());
}

TEST(CounterRng, UniformIsOpenAndCentred)
{
    CounterRng rng(1, StreamDomain::test, 0, 0);
    double s = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GT(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
    }
    EXPECT_NEAR(s / n, 0.5, 5.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST(CounterRng, NormalMoments)
{
    CounterRng rng(2, StreamDomain::test, 0, 0);
    std::vector<double> v(200000);
    for (double& x : v) x = rng.normal();
    const auto m = test_support::moments(v);
    EXPECT_NEAR(m.mean, 0.0, 5.0 / std::sqrt(200000.0));
    EXPECT_NEAR(m.var, 1.0, 0.02);
}

TEST(CounterRng, BelowIsUniformAndRejectsZero)
{
    CounterRng rng(3, StreamDomain::test, 0, 0);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) ++counts[rng.below(7)];
    for (int c : counts) EXPECT_NEAR(c, 10000, 5 * std::sqrt(10000.0));
    EXPECT_THROW(rng.below(0), ParameterError);
}

class PoissonMoments : public ::testing::TestWithParam<double> {};

TEST_P(PoissonMoments, MeanAndVarianceMatch)
{
    const double lambda = GetParam();
    const int n = 20000;
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) {
        CounterRng rng(11, StreamDomain::test, 1, static_cast<std::uint32_t>(i));
        v[i] = static_cast<double>(poisson(lambda, rng));
    }
    const auto m = test_support::moments(v);
    EXPECT_NEAR(m.mean, lambda, 5.0 * std::sqrt(lambda / n));
    EXPECT_NEAR(m.var / lambda, 1.0, 0.1);
}

INSTANTIATE_TEST_SUITE_P(Means, PoissonMoments, ::testing::Values(0.3, 4.0, 29.9, 30.0, 250.0, 1e6, 1e12));

TEST(Poisson, EdgeCases)
{
    CounterRng rng(1, StreamDomain::test, 0, 0);
    EXPECT_EQ(poisson(0.0, rng), 0);
    EXPECT_THROW(poisson(-1.0, rng), ParameterError);
    EXPECT_THROW(poisson(std::nan(""), rng), ParameterError);
}

TEST(Poisson, LogPmfMatchesLgamma)
{
    for (double k : {10.0, 35.0, 400.0, 1e5})
        for (double lambda : {k * 0.9, k, k * 1.1}) {
            const double ref = -lambda + k * std::log(lambda) - std::lgamma(k + 1.0);
            EXPECT_NEAR(detail::log_poisson_pmf(k, lambda), ref, 1e-9 * std::max(1.0, std::abs(ref)));
        }
}

TEST(Summation, CompensatedBeatsNaive)
{
    CompensatedSum s;
    s.add(1.0);
    for (int i = 0; i < 1000000; ++i) s.add(1e-16);
    EXPECT_NEAR(s.value(), 1.0 + 1e-10, 1e-22);
    CompensatedSum a(1e100), b;
    a.add(1.0);
    a.add(-1e100);
    EXPECT_EQ(a.value(), 1.0);
    b.merge(a);
    EXPECT_EQ(b.value(), 1.0);
}

TEST(Summation, DotRejectsMismatch)
{
    std::vector<double> a{1, 2}, b{1};
    EXPECT_THROW(compensated_dot(a, b), ShapeError);
}

TEST(Grid, FrobeniusExamples)
{
    const auto a = ImageGrid::from_rows({{1, 2}, {3, 4}});
    EXPECT_EQ(frobenius(a, a), 30.0);
    EXPECT_EQ(frobenius(a, ImageGrid(2, 2)), 0.0);
    const auto i2 = ImageGrid::from_rows({{1, 0}, {0, 1}});
    const auto x2 = ImageGrid::from_rows({{0, 1}, {1, 0}});
    EXPECT_EQ(frobenius(i2, x2), 0.0);
    EXPECT_THROW(frobenius(a, ImageGrid(2, 3)), ShapeError);
}

TEST(Grid, FrobeniusBilinear)
{
    ImageGrid a(5, 7), b(5, 7), c(5, 7);
    CounterRng rng(5, StreamDomain::test, 0, 0);
    for (std::size_t p = 0; p < a.size(); ++p) {
        a[p] = rng.normal();
        b[p] = rng.normal();
        c[p] = rng.normal();
    }
    const double lhs = frobenius(2.5 * a + (-1.25) * b, c);
    const double rhs = 2.5 * frobenius(a, c) - 1.25 * frobenius(b, c);
    EXPECT_NEAR(lhs, rhs, 1e-13 * (std::abs(lhs) + 1));
}

TEST(Grid, ValidatesConstruction)
{
    EXPECT_THROW(ImageGrid(0, 3), ParameterError);
    EXPECT_THROW(ImageGrid(3, 3, 0.0), ParameterError);
    EXPECT_THROW(ImageGrid(2, 2, 1.0, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_THROW(ImageGrid(1, 2, 1.0, std::vector<double>{1, std::nan("")}), ParameterError);
    EXPECT_THROW(ImageGrid::from_rows({{1, 2}, {3}}), ShapeError);
}

TEST(Grid, SpatialStatistics)
{
    const auto g = ImageGrid::from_rows({{1, 2}, {3, 4}});
    EXPECT_DOUBLE_EQ(g.mean(), 2.5);
    EXPECT_DOUBLE_EQ(g.spatial_variance(), 1.25);
    EXPECT_DOUBLE_EQ(g.sum_squares(), 30.0);
    EXPECT_DOUBLE_EQ(rms(g), std::sqrt(7.5));
}

TEST(Parallel, BlocksAreIndependentOfThreadCount)
{
    auto run = [](std::size_t threads) {
        set_thread_limit(threads);
        std::vector<double> out(1000);
        parallel_for(out.size(), [&](std::size_t i) {
            CounterRng rng(9, StreamDomain::test, 0, static_cast<std::uint32_t>(i));
            out[i] = rng.normal();
        }, 7);
        return out;
    };
    const auto one = run(1), four = run(4);
    set_thread_limit(0);
    EXPECT_EQ(one, four);
}

TEST(Parallel, PropagatesExceptions)
{
    set_thread_limit(3);
    EXPECT_THROW(parallel_for(100, [](std::size_t i) {
        if (i == 57) throw ShapeError("boom");
    }, 5),
                 ShapeError);
    set_thread_limit(0);
}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ghostlab/grid.hpp"
#include "ghostlab/randbasis.hpp"

namespace ghostlab::test_support {

/// Smooth-plus-edges target with values in [0.1, 0.9].
inline ImageGrid textured_target(std::size_t n, std::size_t m)
{
    ImageGrid f(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            const double x = static_cast<double>(j) / static_cast<double>(m);
            const double y = static_cast<double>(i) / static_cast<double>(n);
            double v = 0.5 + 0.25 * std::sin(6.0 * x + 1.0) * std::cos(4.0 * y);
            if (i > n / 4 && i < n / 2 && j > m / 3 && j < 2 * m / 3) v += 0.15;
            f(i, j) = std::clamp(v, 0.1, 0.9);
        }
    return f;
}

inline ImageGrid checkerboard(std::size_t n, std::size_t m, double lo = 0.0, double hi = 1.0)
{
    ImageGrid f(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) f(i, j) = ((i + j) % 2) ? hi : lo;
    return f;
}

inline double relative_rms(const ImageGrid& a, const ImageGrid& ref) { return rms_difference(a, ref) / rms(ref); }

/// Sample mean and unbiased variance.
struct Moments {
    double mean = 0;
    double var = 0;
};

inline Moments moments(const std::vector<double>& v)
{
    double s = 0;
    for (double x : v) s += x;
    const double mean = s / static_cast<double>(v.size());
    double s2 = 0;
    for (double x : v) s2 += (x - mean) * (x - mean);
    return {mean, s2 / static_cast<double>(v.size() - 1)};
}

}  // namespace ghostlab::test_support

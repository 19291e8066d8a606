#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ghostlab/errors.hpp"

namespace ghostlab {

/// Neumaier (improved Kahan–Babuška) running sum.
class CompensatedSum {
public:
    constexpr CompensatedSum() = default;
    constexpr explicit CompensatedSum(double init) : sum_(init) {}

    constexpr void add(double x) noexcept
    {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }

    constexpr CompensatedSum& operator+=(double x) noexcept
    {
        add(x);
        return *this;
    }

    constexpr void merge(const CompensatedSum& other) noexcept
    {
        add(other.sum_);
        add(other.comp_);
    }

    [[nodiscard]] constexpr double value() const noexcept { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

inline double compensated_dot(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) throw ShapeError("compensated_dot: length mismatch");
    CompensatedSum s;
    for (std::size_t i = 0; i < a.size(); ++i) s.add(a[i] * b[i]);
    return s.value();
}

inline double compensated_total(std::span<const double> a)
{
    CompensatedSum s;
    for (double v : a) s.add(v);
    return s.value();
}

/// Element-wise compensated accumulator for whole images.
class CompensatedField {
public:
    CompensatedField() = default;
    explicit CompensatedField(std::size_t size) : sum_(size, 0.0), comp_(size, 0.0) {}

    [[nodiscard]] std::size_t size() const noexcept { return sum_.size(); }

    /// this += scale * x
    void axpy(double scale, std::span<const double> x)
    {
        if (x.size() != sum_.size()) throw ShapeError("CompensatedField: length mismatch");
        for (std::size_t i = 0; i < sum_.size(); ++i) {
            const double v = scale * x[i];
            const double s = sum_[i];
            const double t = s + v;
            if (std::abs(s) >= std::abs(v))
                comp_[i] += (s - t) + v;
            else
                comp_[i] += (v - t) + s;
            sum_[i] = t;
        }
    }

    void merge(const CompensatedField& other)
    {
        axpy(1.0, other.sum_);
        axpy(1.0, other.comp_);
    }

    [[nodiscard]] std::vector<double> values() const
    {
        std::vector<double> out(sum_.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = sum_[i] + comp_[i];
        return out;
    }

private:
    std::vector<double> sum_;
    std::vector<double> comp_;
};

}  // namespace ghostlab

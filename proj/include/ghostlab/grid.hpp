#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "ghostlab/errors.hpp"
#include "ghostlab/summation.hpp"

namespace ghostlab {

/// Row-major n x m field of real values with a physical pixel pitch (mm).
///
/// Row index i runs along y, column index j along x.
class ImageGrid {
public:
    ImageGrid() = default;

    ImageGrid(std::size_t rows, std::size_t cols, double pitch = 1.0, double fill = 0.0)
        : rows_(rows), cols_(cols), pitch_(pitch), data_(rows * cols, fill)
    {
        check_geometry();
    }

    ImageGrid(std::size_t rows, std::size_t cols, double pitch, std::vector<double> data)
        : rows_(rows), cols_(cols), pitch_(pitch), data_(std::move(data))
    {
        check_geometry();
        if (data_.size() != rows_ * cols_) throw ShapeError("ImageGrid: data length != rows*cols");
        if (!std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); }))
            throw ParameterError("ImageGrid: non-finite value");
    }

    static ImageGrid from_rows(std::initializer_list<std::initializer_list<double>> rows, double pitch = 1.0)
    {
        const std::size_t n = rows.size();
        const std::size_t m = n ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(n * m);
        for (const auto& r : rows) {
            if (r.size() != m) throw ShapeError("ImageGrid::from_rows: ragged rows");
            data.insert(data.end(), r.begin(), r.end());
        }
        return ImageGrid(n, m, pitch, std::move(data));
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] double pitch() const noexcept { return pitch_; }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }
    double& operator[](std::size_t idx) noexcept { return data_[idx]; }
    double operator[](std::size_t idx) const noexcept { return data_[idx]; }

    [[nodiscard]] std::span<double> values() & noexcept { return data_; }
    [[nodiscard]] std::span<const double> values() const& noexcept { return data_; }
    [[nodiscard]] std::vector<double> values() && { return std::move(data_); }
    [[nodiscard]] const std::vector<double>& vector() const noexcept { return data_; }

    [[nodiscard]] bool same_shape(const ImageGrid& other) const noexcept
    {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    [[nodiscard]] bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    [[nodiscard]] double min() const { return *std::min_element(data_.begin(), data_.end()); }
    [[nodiscard]] double max() const { return *std::max_element(data_.begin(), data_.end()); }
    [[nodiscard]] double sum() const { return compensated_total(data_); }
    [[nodiscard]] double mean() const { return sum() / static_cast<double>(data_.size()); }

    /// Sum of squares, <f^2> in the Frobenius sense.
    [[nodiscard]] double sum_squares() const { return compensated_dot(data_, data_); }

    /// Spatial variance about the spatial mean, (1/nm) sum (fbar - f)^2.
    [[nodiscard]] double spatial_variance() const
    {
        const double mu = mean();
        CompensatedSum s;
        for (double v : data_) s.add((v - mu) * (v - mu));
        return s.value() / static_cast<double>(data_.size());
    }

    ImageGrid& operator+=(const ImageGrid& o)
    {
        require_shape(o);
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
        return *this;
    }
    ImageGrid& operator-=(const ImageGrid& o)
    {
        require_shape(o);
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
        return *this;
    }
    ImageGrid& operator*=(double s) noexcept
    {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend ImageGrid operator+(ImageGrid a, const ImageGrid& b) { return a += b; }
    friend ImageGrid operator-(ImageGrid a, const ImageGrid& b) { return a -= b; }
    friend ImageGrid operator*(ImageGrid a, double s) { return a *= s; }
    friend ImageGrid operator*(double s, ImageGrid a) { return a *= s; }

    void require_shape(const ImageGrid& o) const
    {
        if (!same_shape(o)) throw ShapeError("ImageGrid: dimension mismatch");
    }

    friend bool operator==(const ImageGrid&, const ImageGrid&) = default;

private:
    void check_geometry() const
    {
        if (rows_ < 1 || cols_ < 1) throw ParameterError("ImageGrid: rows and cols must be >= 1");
        if (!(pitch_ > 0.0) || !std::isfinite(pitch_)) throw ParameterError("ImageGrid: pitch must be > 0");
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    double pitch_ = 1.0;
    std::vector<double> data_;
};

/// Frobenius inner product sum_ij A(i,j) B(i,j).
inline double frobenius(const ImageGrid& a, const ImageGrid& b)
{
    a.require_shape(b);
    return compensated_dot(a.values(), b.values());
}

/// Root-mean-square of a - b over all pixels.
inline double rms_difference(const ImageGrid& a, const ImageGrid& b)
{
    a.require_shape(b);
    CompensatedSum s;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = a[k] - b[k];
        s.add(d * d);
    }
    return std::sqrt(s.value() / static_cast<double>(a.size()));
}

inline double rms(const ImageGrid& a)
{
    return std::sqrt(a.sum_squares() / static_cast<double>(a.size()));
}

}  // namespace ghostlab

#pragma once

#include <complex>
#include <cstddef>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include <fftw3.h>

#include "ghostlab/errors.hpp"

namespace ghostlab {

namespace detail {

/// FFTW's planner is not re-entrant.
inline std::mutex& fftw_planner_mutex()
{
    static std::mutex m;
    return m;
}

}  // namespace detail

/// Unnormalized 1D complex DFT of fixed length. Forward uses e^{-ikx};
/// backward e^{+ikx}. Plans use FFTW_ESTIMATE so the algorithm, and hence the
/// rounding, is the same on every run.
class Fft1d {
public:
    explicit Fft1d(std::size_t length) : length_(length)
    {
        if (length < 1) throw ParameterError("Fft1d: length must be >= 1");
        buffer_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * length));
        if (!buffer_) throw std::bad_alloc();
        std::lock_guard lock(detail::fftw_planner_mutex());
        const int n = static_cast<int>(length);
        forward_ = fftw_plan_dft_1d(n, buffer_, buffer_, FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
        backward_ = fftw_plan_dft_1d(n, buffer_, buffer_, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
    }

    Fft1d(const Fft1d&) = delete;
    Fft1d& operator=(const Fft1d&) = delete;

    ~Fft1d()
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(backward_);
        fftw_free(buffer_);
    }

    [[nodiscard]] std::size_t size() const noexcept { return length_; }

    void forward(std::span<std::complex<double>> data) { run(forward_, data); }
    void backward(std::span<std::complex<double>> data) { run(backward_, data); }

private:
    void run(fftw_plan plan, std::span<std::complex<double>> data)
    {
        if (data.size() != length_) throw ShapeError("Fft1d: length mismatch");
        auto* raw = reinterpret_cast<fftw_complex*>(data.data());
        fftw_execute_dft(plan, raw, raw);
    }

    std::size_t length_;
    fftw_complex* buffer_ = nullptr;
    fftw_plan forward_ = nullptr;
    fftw_plan backward_ = nullptr;
};

/// Angular frequency of DFT bin j for n samples at the given pitch, with bins
/// at and above n/2 mapped to negative frequencies.
inline double angular_frequency(std::size_t j, std::size_t n, double pitch)
{
    const double idx = (2 * j < n) ? static_cast<double>(j) : static_cast<double>(j) - static_cast<double>(n);
    return 2.0 * std::numbers::pi * idx / (static_cast<double>(n) * pitch);
}

inline bool is_nyquist_bin(std::size_t j, std::size_t n) { return n % 2 == 0 && 2 * j == n; }

}  // namespace ghostlab

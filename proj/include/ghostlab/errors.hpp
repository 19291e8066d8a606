#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ghostlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid scalar parameter (negative count, bad distribution, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Mismatched dimensions or lengths.
class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// A distribution or mask set whose spread is zero where a spread is needed.
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// Linear dependence detected while orthonormalizing; carries the 0-based
/// index of the offending input member.
class DependenceError : public Error {
public:
    DependenceError(std::size_t index, const std::string& what)
        : Error(what), index_(index) {}
    [[nodiscard]] std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// Numerical quality failure (e.g. too many clamped pixels in an inversion).
class QualityError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents; carries the byte offset where parsing failed.
class FormatError : public Error {
public:
    FormatError(std::size_t offset, const std::string& what)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    [[nodiscard]] std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class IoError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void require(bool ok, const char* msg)
{
    if (!ok) throw ParameterError(msg);
}

}  // namespace detail

}  // namespace ghostlab

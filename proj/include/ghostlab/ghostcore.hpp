#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ghostlab/errors.hpp"
#include "ghostlab/grid.hpp"
#include "ghostlab/orthonorm.hpp"
#include "ghostlab/parallel.hpp"
#include "ghostlab/randbasis.hpp"
#include "ghostlab/summation.hpp"

namespace ghostlab {

enum class MaskSource { orthonormal_basis, smoothed_speckle, iid_speckle };

inline std::string to_string(MaskSource s)
{
    switch (s) {
    case MaskSource::orthonormal_basis: return "orthonormal-basis-mapped";
    case MaskSource::smoothed_speckle: return "smoothed-speckle";
    case MaskSource::iid_speckle: return "iid-speckle";
    }
    return "unknown";
}

/// Non-negative illumination masks with the affine metadata that maps them
/// back onto an orthonormal basis: I_k = (R_k - min) / xi.
struct MaskSet {
    std::vector<ImageGrid> masks;
    double min = 0;
    double max = 0;
    double xi = 0;
    /// min / (1/sqrt(nm) - min); only defined for augmented basis-mapped sets.
    std::optional<double> eta;
    MaskSource source = MaskSource::orthonormal_basis;

    [[nodiscard]] std::size_t size() const noexcept { return masks.size(); }
    [[nodiscard]] const ImageGrid& operator[](std::size_t k) const { return masks[k]; }

    void fill_member(std::size_t k, std::span<double> out) const
    {
        const auto v = masks.at(k).values();
        std::copy(v.begin(), v.end(), out.begin());
    }
};

/// Maps an orthonormal basis onto masks in [0, 1] using the global range of
/// all members.
inline MaskSet to_masks(const OrthonormalBasis& onb)
{
    if (onb.size() == 0) throw ParameterError("to_masks: empty basis");
    double lo = onb[0].min(), hi = onb[0].max();
    for (const auto& m : onb.members) {
        lo = std::min(lo, m.min());
        hi = std::max(hi, m.max());
    }
    if (!(hi > lo)) throw DegenerateError("to_masks: basis values span no range (max == min)");
    MaskSet out;
    out.min = lo;
    out.max = hi;
    out.xi = hi - lo;
    out.source = MaskSource::orthonormal_basis;
    out.masks.reserve(onb.size());
    for (const auto& m : onb.members) {
        ImageGrid mask = m;
        for (double& v : mask.values()) v = std::clamp((v - lo) / out.xi, 0.0, 1.0);
        out.masks.push_back(std::move(mask));
    }
    if (onb.augmented) out.eta = lo / (1.0 / std::sqrt(static_cast<double>(onb.pixels())) - lo);
    return out;
}

/// Bucket reading B = <f, mask>.
inline double bucket(const ImageGrid& f, const ImageGrid& mask) { return frobenius(f, mask); }

struct BucketSeries {
    std::vector<double> values;
    /// Imaging-quanta scale; empty for ideal (noise-free) readings.
    std::optional<double> lambda_tilde;
    std::optional<std::uint64_t> seed;

    [[nodiscard]] std::size_t size() const noexcept { return values.size(); }
    [[nodiscard]] double mean() const { return compensated_total(values) / static_cast<double>(values.size()); }
};

/// Ideal bucket readings of f through every mask of a source.
template <MemberSource Source>
BucketSeries acquire_buckets(const ImageGrid& f, const Source& masks)
{
    BucketSeries out;
    out.values.resize(masks.size());
    parallel_blocks(BlockRange{masks.size(), 64}.blocks(), [&](std::size_t b) {
        const BlockRange range{masks.size(), 64};
        std::vector<double> buf(f.size());
        for (std::size_t k = range.begin(b); k < range.end(b); ++k) {
            masks.fill_member(k, buf);
            out.values[k] = compensated_dot(f.values(), buf);
        }
    });
    return out;
}

/// Ideal readings through basis-mapped masks in the xi-scaled convention
/// B_k = xi <I_k, f> consumed by gi_orthonormal.
inline BucketSeries basis_readings(const ImageGrid& f, const MaskSet& masks)
{
    BucketSeries out = acquire_buckets(f, masks);
    for (double& b : out.values) b *= masks.xi;
    return out;
}

/// Standard correlation ghost image
/// (1/(N * normalization)) sum_k (B_k - mean(B)) I_k,
/// with mean(B) the empirical mean of the series.
template <MemberSource Source>
ImageGrid gi_standard(const BucketSeries& buckets, const Source& masks, double normalization, std::size_t rows,
                      std::size_t cols, double pitch = 1.0)
{
    const std::size_t n = buckets.size();
    if (n != masks.size()) throw ShapeError("gi_standard: bucket count != mask count");
    if (n < 2) throw ParameterError("gi_standard: need at least two buckets");
    if (!(normalization > 0.0)) throw ParameterError("gi_standard: normalization must be > 0");
    const double mean_b = buckets.mean();
    const std::size_t pix = rows * cols;

    const BlockRange range{n, 64};
    std::vector<CompensatedField> partial(range.blocks());
    parallel_blocks(range.blocks(), [&](std::size_t b) {
        std::vector<double> buf(pix);
        CompensatedField acc(pix);
        for (std::size_t k = range.begin(b); k < range.end(b); ++k) {
            masks.fill_member(k, buf);
            acc.axpy(buckets.values[k] - mean_b, buf);
        }
        partial[b] = std::move(acc);
    });
    CompensatedField total(pix);
    for (const auto& p : partial) total.merge(p);
    ImageGrid out(rows, cols, pitch, total.values());
    out *= 1.0 / (static_cast<double>(n) * normalization);
    return out;
}

inline ImageGrid gi_standard(const BucketSeries& buckets, const MaskSet& masks, double normalization)
{
    if (masks.size() == 0) throw ParameterError("gi_standard: empty mask set");
    const ImageGrid& first = masks[0];
    return gi_standard(buckets, masks, normalization, first.rows(), first.cols(), first.pitch());
}

/// Orthonormal-basis ghost image U = sum_k (B_k + eta B_1) R_k where B_1 is the
/// reading through the constant member's mask. Buckets use the xi-scaled
/// convention of basis_readings.
inline ImageGrid gi_orthonormal(const BucketSeries& buckets, const OrthonormalBasis& onb, double eta)
{
    if (!onb.augmented) throw ParameterError("gi_orthonormal: basis must carry the constant member");
    if (buckets.size() != onb.size()) throw ShapeError("gi_orthonormal: bucket count != member count");
    const double shift = eta * buckets.values[0];
    CompensatedField acc(onb.pixels());
    for (std::size_t k = 0; k < onb.size(); ++k) acc.axpy(buckets.values[k] + shift, onb[k].values());
    return ImageGrid(onb.rows(), onb.cols(), 1.0, acc.values());
}

}  // namespace ghostlab

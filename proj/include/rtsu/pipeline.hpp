#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "rtsu/conv.hpp"
#include "rtsu/tensor.hpp"
#include "rtsu/volume.hpp"

namespace rtsu {

inline constexpr double kClampLo = -1200.0;
inline constexpr double kClampHi = 400.0;

struct PreprocessRecord {
    Dims3 original_dims{};       // (z, y, x)
    Spacing original_spacing{};  // mm per (z, y, x) step
    Dims3 resampled_dims{};      // before z padding
    Spacing resampled_spacing{};
    std::int64_t z_pad = 0;      // appended slices
    std::int64_t inplane = 256;
    double clamp_lo = kClampLo;
    double clamp_hi = kClampHi;
};

// Nearest-neighbor resample with the same center convention as the trilinear
// sampler: src = (i + 0.5) * in/out - 0.5, rounded, clamped.
inline std::vector<std::uint8_t> resample_labels_nn(const std::vector<std::uint8_t>& in,
                                                    const Dims3& from, const Dims3& to) {
    require(std::int64_t(in.size()) == from[0] * from[1] * from[2],
            str("resample_labels_nn: ", in.size(), " values for dims ", from[0], "x", from[1],
                "x", from[2]));
    std::vector<std::uint8_t> out(std::size_t(to[0] * to[1] * to[2]));
    auto src_index = [](std::int64_t i, std::int64_t from_n, std::int64_t to_n) {
        double s = (double(i) + 0.5) * double(from_n) / double(to_n) - 0.5;
        auto r = std::int64_t(std::llround(s));
        return std::max<std::int64_t>(0, std::min(from_n - 1, r));
    };
    for (std::int64_t d = 0; d < to[0]; ++d) {
        std::int64_t sd = src_index(d, from[0], to[0]);
        for (std::int64_t h = 0; h < to[1]; ++h) {
            std::int64_t sh = src_index(h, from[1], to[1]);
            for (std::int64_t w = 0; w < to[2]; ++w) {
                std::int64_t sw = src_index(w, from[2], to[2]);
                out[std::size_t((d * to[1] + h) * to[2] + w)] =
                    in[std::size_t((sd * from[1] + sh) * from[2] + sw)];
            }
        }
    }
    return out;
}

// Clamp to [-1200, 400] HU, rescale into [0, 1], resample to the in-plane
// target with isotropic z, pad z to a multiple of 16.
inline std::pair<Tensor<double>, PreprocessRecord> preprocess(const Volume& scan,
                                                              std::int64_t inplane_target = 256) {
    require(inplane_target >= 1, str("preprocess: in-plane target ", inplane_target));
    PreprocessRecord rec;
    rec.original_dims = scan.dhw();
    rec.original_spacing = scan.spacing_dhw();
    rec.inplane = inplane_target;

    std::vector<double> v(scan.data.size());
    double range = kClampHi - kClampLo;
    for (std::size_t i = 0; i < v.size(); ++i) {
        double x = scan.data[i];
        x = std::min(kClampHi, std::max(kClampLo, x));
        v[i] = (x - kClampLo) / range;
    }
    Dims3 d = rec.original_dims;
    auto t = Tensor<double>::from({1, 1, d[0], d[1], d[2]}, std::move(v));

    // in-plane target fixes the new x spacing; z is resampled to match it
    double sx = rec.original_spacing[2] * double(d[2]) / double(inplane_target);
    double sy = rec.original_spacing[1] * double(d[1]) / double(inplane_target);
    auto zn = std::max<std::int64_t>(
        1, std::int64_t(std::llround(double(d[0]) * rec.original_spacing[0] / sx)));
    NoGradGuard ng;
    t = resize_trilinear(t, zn, inplane_target, inplane_target);
    rec.resampled_dims = {zn, inplane_target, inplane_target};
    rec.resampled_spacing = {sx, sy, sx};

    rec.z_pad = (16 - zn % 16) % 16;
    if (rec.z_pad > 0) t = pad_spatial(t, {0, rec.z_pad, 0, 0, 0, 0});
    return {t, rec};
}

inline Dims3 preprocessed_dims(const PreprocessRecord& rec) {
    return {rec.resampled_dims[0] + rec.z_pad, rec.resampled_dims[1], rec.resampled_dims[2]};
}

// Crop the z padding and resample labels back to the original grid.
inline LabelVolume postprocess(const std::vector<std::uint8_t>& labels,
                               const PreprocessRecord& rec) {
    Dims3 padded = preprocessed_dims(rec);
    require(std::int64_t(labels.size()) == padded[0] * padded[1] * padded[2],
            str("postprocess: ", labels.size(), " labels do not match pre-processed dims ",
                padded[0], "x", padded[1], "x", padded[2]));
    std::vector<std::uint8_t> cropped(
        labels.begin(),
        labels.begin() + rec.resampled_dims[0] * padded[1] * padded[2]);
    auto restored = resample_labels_nn(cropped, rec.resampled_dims, rec.original_dims);
    LabelVolume out;
    out.dims_xyz = {rec.original_dims[2], rec.original_dims[1], rec.original_dims[0]};
    out.spacing_xyz = {rec.original_spacing[2], rec.original_spacing[1], rec.original_spacing[0]};
    out.labels = std::move(restored);
    return out;
}

// Reference labels on the pre-processed grid (nearest neighbor, zero in the
// z padding).
inline std::vector<std::uint8_t> preprocess_labels(const LabelVolume& ref,
                                                   const PreprocessRecord& rec) {
    require(ref.dhw() == rec.original_dims,
            str("preprocess_labels: reference dims do not match the record"));
    auto res = resample_labels_nn(ref.labels, rec.original_dims, rec.resampled_dims);
    if (rec.z_pad > 0) {
        Dims3 padded = preprocessed_dims(rec);
        res.resize(std::size_t(padded[0] * padded[1] * padded[2]), 0);
    }
    return res;
}

}  // namespace rtsu

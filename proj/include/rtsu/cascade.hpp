#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <vector>

#include "rtsu/losses.hpp"
#include "rtsu/runet.hpp"

namespace rtsu {

// Valid-convolution margin of the second-stage network: its output sits 44
// voxels inside the input window on every side, for any legal input size.
inline constexpr std::int64_t kPatchMargin = 44;

// One tile of the sliding-window pass. offset is both the input-window origin
// in the padded stage-2 volume and the output-region origin in scan space;
// the claimed region is the part of the output this tile contributes to the
// stitched result (boundary tiles shift inward, so claims never overlap).
struct PatchSpec {
    Dims3 offset{};
    std::int64_t in_size = 116;
    std::int64_t out_size = 28;
    Dims3 out_offset{};          // offset + margin, in padded coordinates
    Dims3 claim_lo{}, claim_hi{};
};

// Partition of a stage-2 volume into non-overlapping output regions. Inputs
// are windows of in_size around each region in the margin-padded volume.
inline std::vector<PatchSpec> tile(const Dims3& dims, std::int64_t in_size = 116) {
    std::int64_t out = valid_output_extent(in_size);
    require(out == in_size - 2 * kPatchMargin,
            str("tile: patch input ", in_size, " maps to output ", out,
                ", expected margin ", kPatchMargin));
    std::array<std::vector<std::int64_t>, 3> starts;
    for (int a = 0; a < 3; ++a) {
        require(dims[a] >= out, str("tile: volume extent ", dims[a], " on axis ", a,
                                    " is below the output size ", out));
        std::int64_t count = (dims[a] + out - 1) / out;
        for (std::int64_t k = 0; k < count; ++k)
            starts[std::size_t(a)].push_back(std::min(k * out, dims[a] - out));
    }
    std::vector<PatchSpec> specs;
    for (std::size_t iz = 0; iz < starts[0].size(); ++iz)
        for (std::size_t iy = 0; iy < starts[1].size(); ++iy)
            for (std::size_t ix = 0; ix < starts[2].size(); ++ix) {
                PatchSpec s;
                s.offset = {starts[0][iz], starts[1][iy], starts[2][ix]};
                s.in_size = in_size;
                s.out_size = out;
                std::size_t idx3[3] = {iz, iy, ix};
                for (int a = 0; a < 3; ++a) {
                    s.out_offset[a] = s.offset[a] + kPatchMargin;
                    // claims follow the nominal grid; the last tile takes the
                    // remaining unclaimed voxels
                    s.claim_lo[a] = std::int64_t(idx3[a]) * out;
                    s.claim_hi[a] = std::min<std::int64_t>((std::int64_t(idx3[a]) + 1) * out,
                                                           dims[a]);
                }
                specs.push_back(s);
            }
    return specs;
}

// Linear decay of the hard-example pool fraction from 1.0 to 0.2.
inline double k_schedule(std::int64_t step, std::int64_t total_steps) {
    require(total_steps >= 1, "k_schedule: total_steps must be positive");
    require(step >= 0 && step <= total_steps,
            str("k_schedule: step ", step, " outside [0,", total_steps, "]"));
    double k = 1.0 - 0.8 * double(step) / double(total_steps);
    return std::max(0.2, std::min(1.0, k));
}

// Ranks tiles by the integral over their claimed region of the per-voxel
// squared error between the upsampled stage-1 lobe probabilities and the
// one-hot reference, and keeps the top ceil(k_fraction * P). Ties keep scan
// order.
template <class Real>
std::vector<std::size_t> ohem_select(const Tensor<Real>& stage1_up_lobes,
                                     const std::vector<std::uint8_t>& ref_labels,
                                     const std::vector<PatchSpec>& specs, double k_fraction) {
    require(k_fraction > 0 && k_fraction <= 1,
            str("ohem_select: k_fraction ", k_fraction, " outside (0,1]"));
    const Shape& s = stage1_up_lobes.shape();
    require(s.size() == 5 && s[0] == 1 && s[1] == 6,
            str("ohem_select: expected 1x6xDxHxW probabilities, got ", shape_str(s)));
    Dims3 dims{s[2], s[3], s[4]};
    std::int64_t sp = dims[0] * dims[1] * dims[2];
    require(std::int64_t(ref_labels.size()) == sp,
            str("ohem_select: ", ref_labels.size(), " reference labels for ", sp, " voxels"));
    // per-voxel MSE summed over the 6 channels
    std::vector<double> mse(static_cast<std::size_t>(sp));
    const Real* p = stage1_up_lobes.values().data();
    for (std::int64_t v = 0; v < sp; ++v) {
        double acc = 0;
        for (std::int64_t c = 0; c < 6; ++c) {
            double r = ref_labels[std::size_t(v)] == c ? 1.0 : 0.0;
            double d = double(p[c * sp + v]) - r;
            acc += d * d;
        }
        mse[std::size_t(v)] = acc;
    }
    std::vector<double> integral(specs.size(), 0.0);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& ps = specs[i];
        for (std::int64_t z = ps.claim_lo[0]; z < ps.claim_hi[0]; ++z)
            for (std::int64_t y = ps.claim_lo[1]; y < ps.claim_hi[1]; ++y)
                for (std::int64_t x = ps.claim_lo[2]; x < ps.claim_hi[2]; ++x)
                    integral[i] += mse[std::size_t((z * dims[1] + y) * dims[2] + x)];
    }
    std::vector<std::size_t> order(specs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return integral[a] > integral[b]; });
    auto keep = std::size_t(std::ceil(k_fraction * double(specs.size())));
    order.resize(std::max<std::size_t>(1, std::min(order.size(), keep)));
    return order;
}

template <class Real>
struct CascadeOutput {
    DualHead<Real> stage1;           // half-resolution heads
    Tensor<Real> stage1_up_lobes;    // upsampled to scan resolution
    Tensor<Real> stage1_up_border;
    Tensor<Real> lobes;              // stitched stage-2 probabilities
    Tensor<Real> border;
    std::vector<std::uint8_t> labels;  // per-voxel argmax, lowest label wins ties
    Dims3 dims{};
};

// Builds the 8-channel stage-2 input (scan + upsampled stage-1 heads) on the
// autodiff tape, so patch losses propagate into stage-1 parameters.
template <class Real>
struct Stage2Input {
    DualHead<Real> stage1;
    Tensor<Real> up_lobes, up_border;
    Tensor<Real> padded;  // 8 channels, margin-padded
    Dims3 dims{};
};

template <class Real>
Stage2Input<Real> stage2_input(const Tensor<Real>& scan, RUNet<Real>& stage1,
                               BatchNormMode bn_mode) {
    const Shape& s = scan.shape();
    require(s.size() == 5 && s[0] == 1 && s[1] == 1,
            str("cascade: expected 1x1xDxHxW scan, got ", shape_str(s)));
    require(s[2] % 16 == 0, str("cascade: z extent ", s[2],
                                " not padded to a multiple of 16"));
    require(s[3] % 16 == 0 && s[4] % 16 == 0,
            str("cascade: in-plane extent ", s[3], "x", s[4], " must be a multiple of 16"));
    Stage2Input<Real> out;
    out.dims = {s[2], s[3], s[4]};
    auto half = resize_trilinear(scan, s[2] / 2, s[3] / 2, s[4] / 2);
    MuSource mu1{{s[2] / 2, s[3] / 2, s[4] / 2}, {0, 0, 0}, false};
    out.stage1 = stage1.forward(half, mu1, bn_mode);
    out.up_lobes = resize_trilinear(out.stage1.lobes, s[2], s[3], s[4]);
    out.up_border = resize_trilinear(out.stage1.border, s[2], s[3], s[4]);
    auto cat = concat_channels<Real>({scan, out.up_lobes, out.up_border});
    out.padded = pad_spatial(cat, {kPatchMargin, kPatchMargin, kPatchMargin, kPatchMargin,
                                   kPatchMargin, kPatchMargin});
    return out;
}

// Runs stage 2 on one tile of the padded input. patch_offset_in_scan may be
// negative for boundary tiles; geometric coordinates are clamped there.
template <class Real>
DualHead<Real> run_patch(const Stage2Input<Real>& in, RUNet<Real>& stage2, const PatchSpec& ps,
                         BatchNormMode bn_mode) {
    auto patch = crop(in.padded, {0, 0, ps.offset[0], ps.offset[1], ps.offset[2]},
                      {1, 8, ps.in_size, ps.in_size, ps.in_size});
    MuSource mu{in.dims,
                {ps.offset[0] - kPatchMargin, ps.offset[1] - kPatchMargin,
                 ps.offset[2] - kPatchMargin},
                true};
    return stage2.forward(patch, mu, bn_mode);
}

// Full two-stage inference: coarse pass, upsample+concat, tiled stage-2 pass,
// stitching, argmax labels.
template <class Real>
CascadeOutput<Real> forward_full(const Tensor<Real>& scan, RUNet<Real>& stage1,
                                 RUNet<Real>& stage2, std::int64_t patch_in = 116) {
    NoGradGuard no_grad;
    auto in = stage2_input(scan, stage1, BatchNormMode::Eval);
    CascadeOutput<Real> out;
    out.dims = in.dims;
    out.stage1 = in.stage1;
    out.stage1_up_lobes = in.up_lobes;
    out.stage1_up_border = in.up_border;
    std::int64_t sp = in.dims[0] * in.dims[1] * in.dims[2];
    std::vector<Real> lobes(std::size_t(6 * sp), Real(0));
    std::vector<Real> border(std::size_t(sp), Real(0));
    auto specs = tile(in.dims, patch_in);
    for (const auto& ps : specs) {
        auto heads = run_patch(in, stage2, ps, BatchNormMode::Eval);
        const Real* pl = heads.lobes.values().data();
        const Real* pb = heads.border.values().data();
        std::int64_t o = ps.out_size, osp = o * o * o;
        for (std::int64_t z = ps.claim_lo[0]; z < ps.claim_hi[0]; ++z)
            for (std::int64_t y = ps.claim_lo[1]; y < ps.claim_hi[1]; ++y)
                for (std::int64_t x = ps.claim_lo[2]; x < ps.claim_hi[2]; ++x) {
                    std::int64_t local = ((z - ps.offset[0]) * o + (y - ps.offset[1])) * o +
                                         (x - ps.offset[2]);
                    std::int64_t global = (z * in.dims[1] + y) * in.dims[2] + x;
                    for (std::int64_t c = 0; c < 6; ++c)
                        lobes[std::size_t(c * sp + global)] = pl[c * osp + local];
                    border[std::size_t(global)] = pb[local];
                }
    }
    out.lobes = Tensor<Real>::from({1, 6, in.dims[0], in.dims[1], in.dims[2]}, std::move(lobes));
    out.border = Tensor<Real>::from({1, 1, in.dims[0], in.dims[1], in.dims[2]},
                                    std::move(border));
    out.labels.resize(std::size_t(sp));
    const Real* pl = out.lobes.values().data();
    for (std::int64_t v = 0; v < sp; ++v) {
        int best = 0;
        Real bv = pl[v];
        for (int c = 1; c < 6; ++c)
            if (pl[c * sp + v] > bv) {  // strict: the lowest label wins ties
                bv = pl[c * sp + v];
                best = c;
            }
        out.labels[std::size_t(v)] = std::uint8_t(best);
    }
    return out;
}

}  // namespace rtsu

#pragma once

#include <cstdint>
#include <vector>

#include "rtsu/runet.hpp"
#include "rtsu/tensor.hpp"

namespace rtsu {

// One-hot reference with per-label voxel counts (labels without any voxels
// are excluded from the generalized Dice sums; their 1/N^2 weight is
// singular).
struct LabelStats {
    std::vector<std::int64_t> counts;  // per label
    std::int64_t voxels = 0;
};

inline LabelStats label_stats(const std::vector<std::uint8_t>& labels, std::int64_t num_classes) {
    LabelStats s;
    s.counts.assign(std::size_t(num_classes), 0);
    s.voxels = std::int64_t(labels.size());
    for (auto l : labels) {
        require(l < num_classes, str("labels: value ", int(l), " outside 0..", num_classes - 1));
        ++s.counts[l];
    }
    return s;
}

// Border reference: nonzero voxels with at least one 6-neighbor carrying a
// different label. Out-of-volume neighbors do not count as different.
inline std::vector<std::uint8_t> border_target(const std::vector<std::uint8_t>& labels,
                                               const Dims3& dims) {
    std::int64_t D = dims[0], H = dims[1], W = dims[2];
    require(std::int64_t(labels.size()) == D * H * W,
            str("border_target: ", labels.size(), " labels for ", D * H * W, " voxels"));
    std::vector<std::uint8_t> out(labels.size(), 0);
    auto at = [&](std::int64_t d, std::int64_t h, std::int64_t w) {
        return labels[std::size_t((d * H + h) * W + w)];
    };
    for (std::int64_t d = 0; d < D; ++d)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) {
                std::uint8_t c = at(d, h, w);
                if (c == 0) continue;
                bool border = (d > 0 && at(d - 1, h, w) != c) ||
                              (d + 1 < D && at(d + 1, h, w) != c) ||
                              (h > 0 && at(d, h - 1, w) != c) ||
                              (h + 1 < H && at(d, h + 1, w) != c) ||
                              (w > 0 && at(d, h, w - 1) != c) ||
                              (w + 1 < W && at(d, h, w + 1) != c);
                out[std::size_t((d * H + h) * W + w)] = border ? 1 : 0;
            }
    return out;
}

// Generalized Dice loss over the label set: 1 - 2 * sum_l w_l <r_l, p_l> /
// sum_l w_l (N_l + sum p_l), w_l = 1/N_l^2. pred is (1,C,D,H,W) softmax
// probabilities, labels one value per voxel.
template <class Real>
Tensor<Real> generalized_dice(const Tensor<Real>& pred, const std::vector<std::uint8_t>& labels) {
    const Shape& s = pred.shape();
    require(s.size() == 5 && s[0] == 1,
            str("generalized_dice: expected 1xCxDxHxW predictions, got ", shape_str(s)));
    std::int64_t C = s[1], sp = s[2] * s[3] * s[4];
    require(std::int64_t(labels.size()) == sp,
            str("generalized_dice: ", labels.size(), " labels for ", sp, " voxels"));
    auto stats = label_stats(labels, C);
    Tensor<Real> num, den;
    bool any = false;
    for (std::int64_t l = 0; l < C; ++l) {
        std::int64_t nl = stats.counts[std::size_t(l)];
        if (nl == 0) continue;
        Real w = Real(1.0 / (double(nl) * double(nl)));
        std::vector<Real> mask(std::size_t(sp), Real(0));
        for (std::int64_t v = 0; v < sp; ++v)
            if (labels[std::size_t(v)] == l) mask[std::size_t(v)] = Real(1);
        auto mask_t = Tensor<Real>::from({1, 1, s[2], s[3], s[4]}, std::move(mask));
        auto pl = crop(pred, {0, l, 0, 0, 0}, {1, 1, s[2], s[3], s[4]});
        auto inter = scale(sum_all(mul(pl, mask_t)), w);
        auto both = scale(add_const(sum_all(pl), Real(nl)), w);
        num = any ? add(num, inter) : inter;
        den = any ? add(den, both) : both;
        any = true;
    }
    require(any, "generalized_dice: every label is empty");
    return const_minus(Real(1), scale(div(num, den), Real(2)));
}

// Binary (border / non-border) generalized Dice on a 1-channel sigmoid map.
template <class Real>
Tensor<Real> generalized_dice_binary(const Tensor<Real>& pred,
                                     const std::vector<std::uint8_t>& target) {
    const Shape& s = pred.shape();
    require(s.size() == 5 && s[0] == 1 && s[1] == 1,
            str("generalized_dice_binary: expected 1x1xDxHxW, got ", shape_str(s)));
    std::int64_t sp = s[2] * s[3] * s[4];
    require(std::int64_t(target.size()) == sp,
            str("generalized_dice_binary: ", target.size(), " targets for ", sp, " voxels"));
    std::int64_t n1 = 0;
    for (auto t : target) n1 += t ? 1 : 0;
    std::int64_t n0 = sp - n1;
    std::vector<Real> mask(static_cast<std::size_t>(sp));
    for (std::int64_t v = 0; v < sp; ++v) mask[std::size_t(v)] = target[std::size_t(v)] ? 1 : 0;
    auto m1 = Tensor<Real>::from(s, std::move(mask));
    auto p0 = const_minus(Real(1), pred);
    Tensor<Real> num, den;
    bool any = false;
    if (n1 > 0) {
        Real w = Real(1.0 / (double(n1) * double(n1)));
        num = scale(sum_all(mul(pred, m1)), w);
        den = scale(add_const(sum_all(pred), Real(n1)), w);
        any = true;
    }
    if (n0 > 0) {
        Real w = Real(1.0 / (double(n0) * double(n0)));
        auto m0 = const_minus(Real(1), m1);
        auto i0 = scale(sum_all(mul(p0, m0)), w);
        auto d0 = scale(add_const(sum_all(p0), Real(n0)), w);
        num = any ? add(num, i0) : i0;
        den = any ? add(den, d0) : d0;
        any = true;
    }
    require(any, "generalized_dice_binary: empty volume");
    return const_minus(Real(1), scale(div(num, den), Real(2)));
}

// Mean of the largest ceil(k_fraction*N) per-voxel cross-entropies; the
// gradient flows only through the selected voxels.
template <class Real>
Tensor<Real> topk_ce(const Tensor<Real>& pred, const std::vector<std::uint8_t>& labels,
                     double k_fraction = 0.3) {
    require(k_fraction > 0 && k_fraction <= 1,
            str("topk_ce: k_fraction ", k_fraction, " outside (0,1]"));
    auto picked = gather_label_probs(pred, labels);
    auto ce = const_minus(Real(0), log_clamped(picked, Real(1e-12)));
    auto k = std::int64_t(std::ceil(k_fraction * double(ce.size())));
    return topk_mean(ce, k);
}

enum class TrainingMode { Initial, Retrain };

template <class Real>
struct LossBreakdown {
    Tensor<Real> total;
    double lobes1 = 0, border1 = 0, lobes2 = 0, border2 = 0;
};

struct LossRefs {
    std::vector<std::uint8_t> labels_coarse, border_coarse;
    std::vector<std::uint8_t> labels_patch, border_patch;
};

// Summed dual-head objective: four generalized Dice terms, plus top-K
// cross-entropy on both lobe heads when retraining.
template <class Real>
LossBreakdown<Real> total_loss(const DualHead<Real>& stage1, const DualHead<Real>& stage2,
                               const LossRefs& refs, TrainingMode mode,
                               double k_fraction = 0.3) {
    LossBreakdown<Real> out;
    auto l1 = generalized_dice(stage1.lobes, refs.labels_coarse);
    auto b1 = generalized_dice_binary(stage1.border, refs.border_coarse);
    auto l2 = generalized_dice(stage2.lobes, refs.labels_patch);
    auto b2 = generalized_dice_binary(stage2.border, refs.border_patch);
    out.lobes1 = double(l1.item());
    out.border1 = double(b1.item());
    out.lobes2 = double(l2.item());
    out.border2 = double(b2.item());
    // left-associated so the total equals the components summed in order
    out.total = add(add(add(l1, b1), l2), b2);
    if (mode == TrainingMode::Retrain) {
        auto ce1 = topk_ce(stage1.lobes, refs.labels_coarse, k_fraction);
        auto ce2 = topk_ce(stage2.lobes, refs.labels_patch, k_fraction);
        out.total = add(out.total, add(ce1, ce2));
    }
    return out;
}

}  // namespace rtsu

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rtsu/core.hpp"
#include "rtsu/geometry.hpp"

namespace rtsu {

using Spacing = std::array<double, 3>;  // mm per (d,h,w) step

// Surface voxels of a binary mask: members with at least one in-volume
// 6-neighbor outside the mask. A mask filling the whole volume has no
// surface.
inline std::vector<std::int64_t> surface_voxels(const std::vector<std::uint8_t>& mask,
                                                const Dims3& dims) {
    std::int64_t D = dims[0], H = dims[1], W = dims[2];
    std::vector<std::int64_t> out;
    auto at = [&](std::int64_t d, std::int64_t h, std::int64_t w) {
        return mask[std::size_t((d * H + h) * W + w)] != 0;
    };
    for (std::int64_t d = 0; d < D; ++d)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) {
                if (!at(d, h, w)) continue;
                bool border = (d > 0 && !at(d - 1, h, w)) || (d + 1 < D && !at(d + 1, h, w)) ||
                              (h > 0 && !at(d, h - 1, w)) || (h + 1 < H && !at(d, h + 1, w)) ||
                              (w > 0 && !at(d, h, w - 1)) || (w + 1 < W && !at(d, h, w + 1));
                if (border) out.push_back((d * H + h) * W + w);
            }
    return out;
}

namespace detail {

// Felzenszwalb-Huttenlocher exact squared Euclidean distance transform along
// one axis with physical spacing.
inline void edt_pass(double* f, std::int64_t n, double step) {
    if (n == 1) return;
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    std::vector<double> z(static_cast<std::size_t>(n + 1)), d(static_cast<std::size_t>(n));
    std::int64_t k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    auto sq = [](double x) { return x * x; };
    for (std::int64_t q = 1; q < n; ++q) {
        double fq = f[q];
        while (true) {
            std::int64_t p = v[std::size_t(k)];
            double s = (fq + sq(q * step) - f[p] - sq(p * step)) / (2.0 * step * (q - p));
            if (s <= z[std::size_t(k)]) {
                --k;
                continue;
            }
            v[std::size_t(++k)] = q;
            z[std::size_t(k)] = s;
            z[std::size_t(k + 1)] = std::numeric_limits<double>::infinity();
            break;
        }
    }
    k = 0;
    for (std::int64_t q = 0; q < n; ++q) {
        while (z[std::size_t(k + 1)] < q * step) ++k;
        std::int64_t p = v[std::size_t(k)];
        d[std::size_t(q)] = sq((q - p) * step) + f[p];
    }
    for (std::int64_t q = 0; q < n; ++q) f[q] = d[std::size_t(q)];
}

// squared distance (mm^2) from every voxel to the nearest seed voxel
inline std::vector<double> edt_sq(const std::vector<std::int64_t>& seeds, const Dims3& dims,
                                  const Spacing& sp) {
    std::int64_t D = dims[0], H = dims[1], W = dims[2];
    std::vector<double> g(std::size_t(D * H * W), std::numeric_limits<double>::infinity());
    for (auto s : seeds) g[std::size_t(s)] = 0.0;
    std::vector<double> line(std::size_t(std::max({D, H, W})));
    for (std::int64_t d = 0; d < D; ++d)  // along w
        for (std::int64_t h = 0; h < H; ++h) edt_pass(g.data() + (d * H + h) * W, W, sp[2]);
    for (std::int64_t d = 0; d < D; ++d)  // along h
        for (std::int64_t w = 0; w < W; ++w) {
            for (std::int64_t h = 0; h < H; ++h) line[std::size_t(h)] = g[std::size_t((d * H + h) * W + w)];
            edt_pass(line.data(), H, sp[1]);
            for (std::int64_t h = 0; h < H; ++h) g[std::size_t((d * H + h) * W + w)] = line[std::size_t(h)];
        }
    for (std::int64_t h = 0; h < H; ++h)  // along d
        for (std::int64_t w = 0; w < W; ++w) {
            for (std::int64_t d = 0; d < D; ++d) line[std::size_t(d)] = g[std::size_t((d * H + h) * W + w)];
            edt_pass(line.data(), D, sp[0]);
            for (std::int64_t d = 0; d < D; ++d) g[std::size_t((d * H + h) * W + w)] = line[std::size_t(d)];
        }
    return g;
}

inline double min_dist_brute(std::int64_t voxel, const std::vector<std::int64_t>& others,
                             const Dims3& dims, const Spacing& sp) {
    std::int64_t H = dims[1], W = dims[2];
    std::int64_t d0 = voxel / (H * W), h0 = (voxel / W) % H, w0 = voxel % W;
    double best = std::numeric_limits<double>::infinity();
    for (auto o : others) {
        double dd = double(o / (H * W) - d0) * sp[0];
        double dh = double((o / W) % H - h0) * sp[1];
        double dw = double(o % W - w0) * sp[2];
        best = std::min(best, dd * dd + dh * dh + dw * dw);
    }
    return std::sqrt(best);
}

inline constexpr std::int64_t kBruteForceLimit = 10000;

// sum of min distances from the voxels of `from` to the set `to`
inline double surface_distance_sum(const std::vector<std::int64_t>& from,
                                   const std::vector<std::int64_t>& to, const Dims3& dims,
                                   const Spacing& sp) {
    double sum = 0;
    if (std::int64_t(from.size()) + std::int64_t(to.size()) <= kBruteForceLimit) {
        for (auto v : from) sum += min_dist_brute(v, to, dims, sp);
    } else {
        auto dt = edt_sq(to, dims, sp);
        for (auto v : from) sum += std::sqrt(dt[std::size_t(v)]);
    }
    return sum;
}

}  // namespace detail

// |X ∩ Y| / |X ∪ Y|; two empty masks count as identical.
inline double iou(const std::vector<std::uint8_t>& x, const std::vector<std::uint8_t>& y) {
    require(x.size() == y.size(), str("iou: mask sizes ", x.size(), " vs ", y.size()));
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        bool a = x[i] != 0, b = y[i] != 0;
        inter += a && b;
        uni += a || b;
    }
    if (uni == 0) return 1.0;
    return double(inter) / double(uni);
}

// Average symmetric surface distance in mm; undefined (throws) for empty
// masks or masks without a surface.
inline double assd(const std::vector<std::uint8_t>& x, const std::vector<std::uint8_t>& y,
                   const Dims3& dims, const Spacing& spacing) {
    require(x.size() == y.size(), str("assd: mask sizes ", x.size(), " vs ", y.size()));
    auto sx = surface_voxels(x, dims);
    auto sy = surface_voxels(y, dims);
    require(!sx.empty() && !sy.empty(), "assd: undefined for an empty surface");
    double total = detail::surface_distance_sum(sx, sy, dims, spacing) +
                   detail::surface_distance_sum(sy, sx, dims, spacing);
    return total / double(sx.size() + sy.size());
}

// Interlobar border voxels: nonzero voxels with a 6-neighbor holding a
// different nonzero label.
inline std::vector<std::int64_t> interlobar_voxels(const std::vector<std::uint8_t>& labels,
                                                   const Dims3& dims) {
    std::int64_t D = dims[0], H = dims[1], W = dims[2];
    std::vector<std::int64_t> out;
    auto at = [&](std::int64_t d, std::int64_t h, std::int64_t w) {
        return labels[std::size_t((d * H + h) * W + w)];
    };
    for (std::int64_t d = 0; d < D; ++d)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) {
                std::uint8_t c = at(d, h, w);
                if (c == 0) continue;
                auto differs = [&](std::uint8_t n) { return n != 0 && n != c; };
                bool border = (d > 0 && differs(at(d - 1, h, w))) ||
                              (d + 1 < D && differs(at(d + 1, h, w))) ||
                              (h > 0 && differs(at(d, h - 1, w))) ||
                              (h + 1 < H && differs(at(d, h + 1, w))) ||
                              (w > 0 && differs(at(d, h, w - 1))) ||
                              (w + 1 < W && differs(at(d, h, w + 1)));
                if (border) out.push_back((d * H + h) * W + w);
            }
    return out;
}

inline double interlobar_assd(const std::vector<std::uint8_t>& pred,
                              const std::vector<std::uint8_t>& ref, const Dims3& dims,
                              const Spacing& spacing) {
    auto sp_ = interlobar_voxels(pred, dims);
    auto sr = interlobar_voxels(ref, dims);
    require(!sp_.empty(), "interlobar_assd: prediction has no interlobar border");
    require(!sr.empty(), "interlobar_assd: reference has no interlobar border");
    double total = detail::surface_distance_sum(sp_, sr, dims, spacing) +
                   detail::surface_distance_sum(sr, sp_, dims, spacing);
    return total / double(sp_.size() + sr.size());
}

// ---------------------------------------------------------------------------
// per-scan report
// ---------------------------------------------------------------------------

inline const std::array<const char*, 5>& lobe_keys() {
    static const std::array<const char*, 5> k{"lul", "lll", "rul", "rll", "rml"};
    return k;
}

struct MetricsReport {
    std::array<double, 5> iou_lobe{};                 // labels 1..5
    std::array<std::optional<double>, 5> assd_lobe{};  // undefined stays empty
    std::array<bool, 5> lobe_present{};               // in pred or ref
    double iou_lungs = 0;
    std::optional<double> assd_lungs;
    double iou_overall = 0;
    std::optional<double> assd_overall;
    std::optional<double> assd_interlobar;
};

inline MetricsReport report(const std::vector<std::uint8_t>& pred,
                            const std::vector<std::uint8_t>& ref, const Dims3& dims,
                            const Spacing& spacing) {
    for (auto v : pred) require(v <= 5, str("report: prediction label ", int(v), " > 5"));
    for (auto v : ref) require(v <= 5, str("report: reference label ", int(v), " > 5"));
    MetricsReport r;
    auto mask_of = [&](const std::vector<std::uint8_t>& vol, std::uint8_t lo, std::uint8_t hi) {
        std::vector<std::uint8_t> m(vol.size());
        for (std::size_t i = 0; i < vol.size(); ++i) m[i] = (vol[i] >= lo && vol[i] <= hi) ? 1 : 0;
        return m;
    };
    double iou_sum = 0, assd_sum = 0;
    int present = 0, assd_count = 0;
    for (int l = 1; l <= 5; ++l) {
        auto mp = mask_of(pred, std::uint8_t(l), std::uint8_t(l));
        auto mr = mask_of(ref, std::uint8_t(l), std::uint8_t(l));
        bool any = false;
        for (std::size_t i = 0; i < mp.size() && !any; ++i) any = mp[i] || mr[i];
        r.lobe_present[std::size_t(l - 1)] = any;
        if (!any) continue;  // skipped from the overall mean
        r.iou_lobe[std::size_t(l - 1)] = iou(mp, mr);
        iou_sum += r.iou_lobe[std::size_t(l - 1)];
        ++present;
        try {
            double a = assd(mp, mr, dims, spacing);
            r.assd_lobe[std::size_t(l - 1)] = a;
            assd_sum += a;
            ++assd_count;
        } catch (const std::exception&) {
            // one side empty: ASSD stays undefined for this lobe
        }
    }
    r.iou_overall = present ? iou_sum / present : 1.0;
    if (assd_count == present && present > 0) r.assd_overall = assd_sum / assd_count;
    auto lp = mask_of(pred, 1, 5);
    auto lr = mask_of(ref, 1, 5);
    r.iou_lungs = iou(lp, lr);
    try {
        r.assd_lungs = assd(lp, lr, dims, spacing);
    } catch (const std::exception&) {
    }
    try {
        r.assd_interlobar = interlobar_assd(pred, ref, dims, spacing);
    } catch (const std::exception&) {
    }
    return r;
}

// JSON-style document with fixed key names, one scan per document.
inline std::string report_to_json(const MetricsReport& r, int indent = 2) {
    std::ostringstream os;
    std::string pad(std::size_t(indent), ' ');
    os << "{\n";
    auto emit_num = [&](const std::string& key, double v, bool comma = true) {
        os << pad << "\"" << key << "\": " << v << (comma ? ",\n" : "\n");
    };
    auto emit_opt = [&](const std::string& key, const std::optional<double>& v,
                        bool comma = true) {
        os << pad << "\"" << key << "\": ";
        if (v)
            os << *v;
        else
            os << "null";
        os << (comma ? ",\n" : "\n");
    };
    for (int l = 0; l < 5; ++l) {
        const char* k = lobe_keys()[std::size_t(l)];
        if (r.lobe_present[std::size_t(l)])
            emit_num(str("iou_", k), r.iou_lobe[std::size_t(l)]);
        else
            os << pad << "\"iou_" << k << "\": null,\n";
        emit_opt(str("assd_", k), r.assd_lobe[std::size_t(l)]);
    }
    emit_num("iou_lungs", r.iou_lungs);
    emit_opt("assd_lungs", r.assd_lungs);
    emit_opt("assd_interlobar", r.assd_interlobar);
    emit_opt("assd_overall", r.assd_overall);
    emit_num("iou_overall", r.iou_overall, false);
    os << "}";
    return os.str();
}

}  // namespace rtsu

#pragma once

#include <array>
#include <cstdint>

#include "rtsu/tensor.hpp"

namespace rtsu {

using Dims3 = std::array<std::int64_t, 3>;

// Normalized receptive-field-center coordinates for a feature grid, one
// 3-vector column per position in (d,h,w) scan order. The coordinate of
// position p along an axis is ((p + 0.5) * stride + offset) / source - 0.5.
template <class Real>
struct GeometricMap {
    Tensor<Real> coords;  // (3, P), constant
    Dims3 feature_dims;
    Dims3 source_shape;
    Dims3 patch_offset;
    std::int64_t stride;

    std::int64_t positions() const {
        return feature_dims[0] * feature_dims[1] * feature_dims[2];
    }
};

namespace detail {

template <class Real>
GeometricMap<Real> make_geometric_map(const Dims3& fdims, std::int64_t stride, const Dims3& offset,
                                      const Dims3& source, bool clamp) {
    require(stride >= 1, str("geometric_map: stride ", stride, " < 1"));
    for (int a = 0; a < 3; ++a) {
        require(fdims[a] >= 1 && source[a] >= 1,
                str("geometric_map: empty axis ", a, " (feature ", fdims[a], ", source ",
                    source[a], ")"));
        // every receptive-field center must land inside the source, i.e. all
        // coordinates stay within [-0.5, 0.5]
        if (!clamp)
            require(offset[a] >= 0 && (2 * fdims[a] - 1) * stride + 2 * offset[a] <= 2 * source[a],
                    str("geometric_map: feature centers of patch at offset ", offset[a],
                        " fall outside source axis ", a, " of extent ", source[a]));
    }
    std::int64_t P = fdims[0] * fdims[1] * fdims[2];
    std::vector<Real> c(static_cast<std::size_t>(3 * P));
    std::int64_t p = 0;
    for (std::int64_t d = 0; d < fdims[0]; ++d)
        for (std::int64_t h = 0; h < fdims[1]; ++h)
            for (std::int64_t w = 0; w < fdims[2]; ++w, ++p) {
                std::int64_t idx[3] = {d, h, w};
                for (int a = 0; a < 3; ++a) {
                    double v = ((double(idx[a]) + 0.5) * double(stride) + double(offset[a])) /
                                   double(source[a]) - 0.5;
                    if (clamp) v = std::min(0.5, std::max(-0.5, v));
                    c[std::size_t(a * P + p)] = Real(v);
                }
            }
    GeometricMap<Real> m;
    m.coords = Tensor<Real>::from({3, P}, std::move(c));
    m.feature_dims = fdims;
    m.source_shape = source;
    m.patch_offset = offset;
    m.stride = stride;
    return m;
}

}  // namespace detail

template <class Real>
GeometricMap<Real> geometric_map(const Dims3& feature_dims, std::int64_t stride,
                                 const Dims3& patch_offset, const Dims3& source_shape) {
    return detail::make_geometric_map<Real>(feature_dims, stride, patch_offset, source_shape,
                                            false);
}

// Variant for boundary patches whose receptive-field centers fall into the
// zero-padded margin: coordinates are clamped into [-0.5, 0.5] instead of
// rejecting the patch.
template <class Real>
GeometricMap<Real> geometric_map_clamped(const Dims3& feature_dims, std::int64_t stride,
                                         const Dims3& patch_offset, const Dims3& source_shape) {
    return detail::make_geometric_map<Real>(feature_dims, stride, patch_offset, source_shape,
                                            true);
}

// tau(mu_i, mu_j) = max(0, (Womega mu_i) . (Wrho mu_j)) as a full P x P
// matrix. Differentiable in both embedding matrices.
template <class Real>
Tensor<Real> pairwise_geometric_term(const GeometricMap<Real>& mu, const Tensor<Real>& w_omega,
                                     const Tensor<Real>& w_rho) {
    require(w_omega.shape().size() == 2 && w_omega.dim(1) == 3,
            str("pairwise_geometric_term: W_omega must be C'x3, got ",
                shape_str(w_omega.shape())));
    require(w_rho.shape() == w_omega.shape(),
            str("pairwise_geometric_term: W_rho shape ", shape_str(w_rho.shape()),
                " differs from W_omega ", shape_str(w_omega.shape())));
    auto u = matmul(w_omega, mu.coords);
    auto v = matmul(w_rho, mu.coords);
    return relu(matmul(transpose2d(u), v));
}

}  // namespace rtsu

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "rtsu/gemm.hpp"
#include "rtsu/simd.hpp"
#include "rtsu/tensor.hpp"

namespace rtsu {

enum class Padding { Same, Valid };

struct ConvSpec {
    std::int64_t kernel = 3;  // 1 or 3
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    Padding padding = Padding::Same;
};

namespace detail {

// Direct-sweep convolution kernels. The channel counts of these networks are
// small relative to the volumes, which makes an im2col+GEMM lowering
// allocation- and traffic-bound; plain row sweeps vectorize well and keep the
// working set in cache. All accumulation orders are fixed, so results are
// run-to-run deterministic.

// One (kd,kh) tap pair, all three kw taps: acc[ow] += sum_kw wt[kw] *
// src[ow + kw - q] with out-of-range source entries dropped. Output row has
// src_w - 2 + 2q entries.
template <class Real>
inline void conv_row_sweep(Real* acc, const Real* src, const Real* wt, std::int64_t src_w,
                           std::int64_t q) {
    std::int64_t out_w = src_w - 2 + 2 * q;
    Real w0 = wt[0], w1 = wt[1], w2 = wt[2];
    std::int64_t lo = q, hi = src_w + q - 2;  // fused range: all three taps valid
    if (hi > lo) {
        const Real* s = src - q;
        for (std::int64_t ow = lo; ow < hi; ++ow)
            acc[ow] += w0 * s[ow] + w1 * s[ow + 1] + w2 * s[ow + 2];
    }
    for (std::int64_t ow = 0; ow < std::min(lo, out_w); ++ow)
        for (std::int64_t kw = 0; kw < 3; ++kw) {
            std::int64_t iw = ow + kw - q;
            if (iw >= 0 && iw < src_w) acc[ow] += wt[kw] * src[iw];
        }
    for (std::int64_t ow = std::max(hi, std::int64_t(0)); ow < out_w; ++ow)
        for (std::int64_t kw = 0; kw < 3; ++kw) {
            std::int64_t iw = ow + kw - q;
            if (iw >= 0 && iw < src_w) acc[ow] += wt[kw] * src[iw];
        }
}

// y (possibly pre-filled) accumulates a 3x3x3 convolution with padding q in
// {0,1,2}; when bias is null the destination is accumulated into instead of
// initialized.
template <class Real>
void conv3_sweep(const Real* x, Real* y, const Real* w, const Real* b, std::int64_t C,
                 std::int64_t O, std::int64_t D, std::int64_t H, std::int64_t W, std::int64_t q) {
    std::int64_t OD = D - 2 + 2 * q, OH = H - 2 + 2 * q, OW = W - 2 + 2 * q;
    for (std::int64_t od = 0; od < OD; ++od) {
        if (b)
            for (std::int64_t o = 0; o < O; ++o) {
                Real* plane = y + (o * OD + od) * OH * OW;
                std::fill(plane, plane + OH * OW, b[o]);
            }
        std::int64_t kd_lo = std::max<std::int64_t>(0, q - od);
        std::int64_t kd_hi = std::min<std::int64_t>(3, D + q - od);
        for (std::int64_t ci = 0; ci < C; ++ci)
            for (std::int64_t kd = kd_lo; kd < kd_hi; ++kd) {
                const Real* slice = x + (ci * D + od + kd - q) * H * W;
                for (std::int64_t o = 0; o < O; ++o) {
                    Real* plane = y + (o * OD + od) * OH * OW;
                    const Real* wt = w + ((o * C + ci) * 3 + kd) * 9;
                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                        Real* acc = plane + oh * OW;
                        std::int64_t kh_lo = std::max<std::int64_t>(0, q - oh);
                        std::int64_t kh_hi = std::min<std::int64_t>(3, H + q - oh);
                        for (std::int64_t kh = kh_lo; kh < kh_hi; ++kh)
                            conv_row_sweep(acc, slice + (oh + kh - q) * W, wt + kh * 3, W, q);
                    }
                }
            }
    }
}

// dx += transposed convolution of gy: equivalently a conv3_sweep of gy with
// channel roles swapped, taps flipped, and padding 2 - q.
template <class Real>
void conv3_backward_input(Real* gx, const Real* gy, const Real* w, std::int64_t C, std::int64_t O,
                          std::int64_t D, std::int64_t H, std::int64_t W, std::int64_t q) {
    std::int64_t OD = D - 2 + 2 * q, OH = H - 2 + 2 * q, OW = W - 2 + 2 * q;
    std::vector<Real> flipped(static_cast<std::size_t>(C * O * 27));
    for (std::int64_t o = 0; o < O; ++o)
        for (std::int64_t ci = 0; ci < C; ++ci)
            for (std::int64_t t = 0; t < 27; ++t)
                flipped[std::size_t((ci * O + o) * 27 + t)] =
                    w[(o * C + ci) * 27 + (26 - t)];
    conv3_sweep<Real>(gy, gx, flipped.data(), nullptr, O, C, OD, OH, OW, 2 - q);
}

// all three kw correlations of one (gy row, x row) pair
template <class Real>
inline void dot3_rows(const Real* gyr, const Real* xr, std::int64_t ow_count, std::int64_t src_w,
                      std::int64_t q, Real* out3) {
    if (q == 0) {  // x row has ow_count + 2 entries
        simd::dot3(gyr, xr, ow_count, out3);
    } else {
        for (std::int64_t kw = 0; kw < 3; ++kw) {
            std::int64_t lo = std::max<std::int64_t>(0, q - kw);
            std::int64_t hi = std::min<std::int64_t>(ow_count, src_w + q - kw);
            if (hi <= lo) continue;
            out3[kw] += simd::dot(gyr + lo, xr + lo + kw - q, hi - lo);
        }
    }
}

template <class Real>
void conv3_backward_weights(const Real* x, const Real* gy, Real* gw, Real* gb, bool need_w,
                            bool need_b, std::int64_t C, std::int64_t O, std::int64_t D,
                            std::int64_t H, std::int64_t W, std::int64_t q) {
    std::int64_t OD = D - 2 + 2 * q, OH = H - 2 + 2 * q, OW = W - 2 + 2 * q;
    if (need_b) {
        std::vector<Real> ones(static_cast<std::size_t>(OW), Real(1));
        for (std::int64_t o = 0; o < O; ++o) {
            Real s = 0;
            for (std::int64_t r = 0; r < OD * OH; ++r)
                s += simd::dot(gy + (o * OD * OH + r) * OW, ones.data(), OW);
            gb[o] += s;
        }
    }
    if (!need_w) return;
    // per-o tap accumulator kept hot across the whole volume sweep
    std::vector<Real> acc(static_cast<std::size_t>(C * 27));
    for (std::int64_t o = 0; o < O; ++o) {
        std::fill(acc.begin(), acc.end(), Real(0));
        for (std::int64_t od = 0; od < OD; ++od) {
            std::int64_t kd_lo = std::max<std::int64_t>(0, q - od);
            std::int64_t kd_hi = std::min<std::int64_t>(3, D + q - od);
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                const Real* gyr = gy + ((o * OD + od) * OH + oh) * OW;
                std::int64_t kh_lo = std::max<std::int64_t>(0, q - oh);
                std::int64_t kh_hi = std::min<std::int64_t>(3, H + q - oh);
                for (std::int64_t ci = 0; ci < C; ++ci) {
                    const Real* xc = x + ci * D * H * W;
                    for (std::int64_t kd = kd_lo; kd < kd_hi; ++kd) {
                        const Real* xs = xc + (od + kd - q) * H * W;
                        for (std::int64_t kh = kh_lo; kh < kh_hi; ++kh)
                            dot3_rows(gyr, xs + (oh + kh - q) * W, OW, W, q,
                                      acc.data() + (ci * 3 + kd) * 9 + kh * 3);
                    }
                }
            }
        }
        Real* gwo = gw + o * C * 27;
        for (std::int64_t i = 0; i < C * 27; ++i) gwo[i] += acc[static_cast<std::size_t>(i)];
    }
}

}  // namespace detail

// 3D convolution, stride 1, kernel 1 or 3, Same (zero pad 1) or Valid.
// weights: (O, I, k, k, k), bias: (O).
template <class Real>
Tensor<Real> conv3d(const Tensor<Real>& x, const Tensor<Real>& weights, const Tensor<Real>& bias,
                    Padding padding) {
    const Shape& xs = x.shape();
    const Shape& ws = weights.shape();
    require(xs.size() == 5, str("conv3d: expected NCDHW input, got ", shape_str(xs)));
    require(ws.size() == 5 && ws[2] == ws[3] && ws[3] == ws[4] && (ws[2] == 1 || ws[2] == 3),
            str("conv3d: bad weight shape ", shape_str(ws)));
    std::int64_t N = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
    std::int64_t O = ws[0], I = ws[1], k = ws[2];
    require(C == I, str("conv3d: input has ", C, " channels, weights expect ", I));
    require(bias.shape() == Shape{O}, str("conv3d: bias shape ", shape_str(bias.shape()),
                                          " does not match ", O, " filters"));
    std::int64_t pad = (padding == Padding::Same) ? (k - 1) / 2 : 0;
    std::int64_t shrink = (padding == Padding::Valid) ? k - 1 : 0;
    if (padding == Padding::Valid && k == 3) {
        const char* names[3] = {"depth", "height", "width"};
        std::int64_t dims[3] = {D, H, W};
        for (int a = 0; a < 3; ++a)
            require(dims[a] >= k, str("conv3d: ", names[a], " ", dims[a],
                                      " too small for valid 3x3x3 kernel"));
    }
    std::int64_t OD = D - shrink, OH = H - shrink, OW = W - shrink;
    std::int64_t osp = OD * OH * OW;
    std::vector<Real> out(std::size_t(N * O * osp));

    const Real* wp = weights.values().data();
    const Real* bp = bias.values().data();
    const Real* xp = x.values().data();
    for (std::int64_t n = 0; n < N; ++n) {
        Real* yp = out.data() + n * O * osp;
        const Real* xn_ptr = xp + n * C * D * H * W;
        if (k == 1) {
            for (std::int64_t o = 0; o < O; ++o) {
                Real* plane = yp + o * osp;
                std::fill(plane, plane + osp, bp[o]);
                for (std::int64_t ci = 0; ci < C; ++ci) {
                    Real wv = wp[o * C + ci];
                    const Real* src = xn_ptr + ci * osp;
                    for (std::int64_t i = 0; i < osp; ++i) plane[i] += wv * src[i];
                }
            }
        } else {
            detail::conv3_sweep(xn_ptr, yp, wp, bp, C, O, D, H, W, pad);
        }
    }

    auto xn = x.node(), wn = weights.node(), bn = bias.node();
    return make_op<Real>(
        {N, O, OD, OH, OW}, std::move(out), {x, weights, bias},
        [xn, wn, bn, N, C, D, H, W, O, k, pad, osp](Node<Real>& onode) {
            const Real* gy = onode.grad.data();
            const Real* wp = wn->values.data();
            for (std::int64_t n = 0; n < N; ++n) {
                const Real* gyn = gy + n * O * osp;
                const Real* xn_ptr = xn->values.data() + n * C * D * H * W;
                if (k == 1) {
                    if (bn->requires_grad) {
                        Real* gb = bn->grad_buf();
                        for (std::int64_t o = 0; o < O; ++o) {
                            const Real* gp = gyn + o * osp;
                            Real s = 0;
                            for (std::int64_t i = 0; i < osp; ++i) s += gp[i];
                            gb[o] += s;
                        }
                    }
                    if (wn->requires_grad) {
                        Real* gw = wn->grad_buf();
                        for (std::int64_t o = 0; o < O; ++o)
                            for (std::int64_t ci = 0; ci < C; ++ci)
                                gw[o * C + ci] += simd::dot(gyn + o * osp,
                                                                    xn_ptr + ci * osp, osp);
                    }
                    if (xn->requires_grad) {
                        Real* gx = xn->grad_buf() + n * C * osp;
                        for (std::int64_t ci = 0; ci < C; ++ci)
                            for (std::int64_t o = 0; o < O; ++o) {
                                Real wv = wp[o * C + ci];
                                const Real* gp = gyn + o * osp;
                                Real* gxp = gx + ci * osp;
                                for (std::int64_t i = 0; i < osp; ++i) gxp[i] += wv * gp[i];
                            }
                    }
                } else {
                    detail::conv3_backward_weights(
                        xn_ptr, gyn, wn->requires_grad ? wn->grad_buf() : nullptr,
                        bn->requires_grad ? bn->grad_buf() : nullptr, wn->requires_grad,
                        bn->requires_grad, C, O, D, H, W, pad);
                    if (xn->requires_grad)
                        detail::conv3_backward_input(xn->grad_buf() + n * C * D * H * W, gyn, wp,
                                                     C, O, D, H, W, pad);
                }
            }
        });
}

inline Shape conv3d_output_shape(const Shape& in, const ConvSpec& spec) {
    std::int64_t shrink = (spec.padding == Padding::Valid) ? spec.kernel - 1 : 0;
    return {in[0], spec.out_channels, in[2] - shrink, in[3] - shrink, in[4] - shrink};
}

// 2x2x2 max pooling, stride 2. Ties route the gradient to the first window
// position in (d,h,w) scan order.
template <class Real>
Tensor<Real> maxpool3d(const Tensor<Real>& x) {
    const Shape& s = x.shape();
    require(s.size() == 5, str("maxpool3d: expected NCDHW, got ", shape_str(s)));
    std::int64_t N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    const char* names[3] = {"depth", "height", "width"};
    std::int64_t dims[3] = {D, H, W};
    for (int a = 0; a < 3; ++a)
        require(dims[a] % 2 == 0, str("maxpool3d: odd ", names[a], " ", dims[a]));
    std::int64_t OD = D / 2, OH = H / 2, OW = W / 2, osp = OD * OH * OW;
    std::vector<Real> out(std::size_t(N * C * osp));
    std::vector<std::int64_t> argmax(std::size_t(N * C * osp));
    const Real* xp = x.values().data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const Real* src = xp + nc * D * H * W;
        Real* dst = out.data() + nc * osp;
        std::int64_t* am = argmax.data() + nc * osp;
        for (std::int64_t od = 0; od < OD; ++od)
            for (std::int64_t oh = 0; oh < OH; ++oh)
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    Real best = -std::numeric_limits<Real>::infinity();
                    std::int64_t bidx = -1;
                    for (std::int64_t kd = 0; kd < 2; ++kd)
                        for (std::int64_t kh = 0; kh < 2; ++kh)
                            for (std::int64_t kw = 0; kw < 2; ++kw) {
                                std::int64_t idx =
                                    ((od * 2 + kd) * H + oh * 2 + kh) * W + ow * 2 + kw;
                                if (src[idx] > best) {
                                    best = src[idx];
                                    bidx = idx;
                                }
                            }
                    std::int64_t o = (od * OH + oh) * OW + ow;
                    dst[o] = best;
                    am[o] = nc * D * H * W + bidx;
                }
    }
    auto xn = x.node();
    return make_op<Real>({N, C, OD, OH, OW}, std::move(out), {x},
                         [xn, argmax](Node<Real>& o) {
                             Real* g = xn->grad_buf();
                             for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 g[argmax[i]] += o.grad[i];
                         });
}

namespace detail {

struct LinSample {
    std::int64_t i0, i1;
    double w1;  // weight of i1; i0 gets 1-w1
};

// align_corners=false sampling: src = (i + 0.5) / scale - 0.5, borders clamped
inline std::vector<LinSample> linear_samples(std::int64_t out, std::int64_t in) {
    std::vector<LinSample> v(static_cast<std::size_t>(out));
    double scale = double(out) / double(in);
    for (std::int64_t i = 0; i < out; ++i) {
        double src = (double(i) + 0.5) / scale - 0.5;
        double f = std::floor(src);
        auto i0 = std::int64_t(f);
        double w1 = src - f;
        std::int64_t i1 = i0 + 1;
        if (i0 < 0) i0 = 0;
        if (i1 < 0) i1 = 0;
        if (i0 > in - 1) i0 = in - 1;
        if (i1 > in - 1) i1 = in - 1;
        v[std::size_t(i)] = {i0, i1, w1};
    }
    return v;
}

}  // namespace detail

template <class Real>
Tensor<Real> resize_trilinear(const Tensor<Real>& x, std::int64_t od, std::int64_t oh,
                              std::int64_t ow) {
    const Shape& s = x.shape();
    require(s.size() == 5, str("resize_trilinear: expected NCDHW, got ", shape_str(s)));
    require(od >= 1 && oh >= 1 && ow >= 1,
            str("resize_trilinear: non-positive target ", od, "x", oh, "x", ow));
    std::int64_t N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    auto sd = detail::linear_samples(od, D);
    auto sh = detail::linear_samples(oh, H);
    auto sw = detail::linear_samples(ow, W);
    std::int64_t osp = od * oh * ow;
    std::vector<Real> out(std::size_t(N * C * osp));
    const Real* xp = x.values().data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const Real* src = xp + nc * D * H * W;
        Real* dst = out.data() + nc * osp;
        for (std::int64_t d = 0; d < od; ++d)
            for (std::int64_t h = 0; h < oh; ++h)
                for (std::int64_t w = 0; w < ow; ++w) {
                    const auto &a = sd[std::size_t(d)], &b = sh[std::size_t(h)],
                               &c = sw[std::size_t(w)];
                    double v = 0;
                    for (int dd = 0; dd < 2; ++dd)
                        for (int hh = 0; hh < 2; ++hh)
                            for (int ww = 0; ww < 2; ++ww) {
                                double wt = (dd ? a.w1 : 1 - a.w1) * (hh ? b.w1 : 1 - b.w1) *
                                            (ww ? c.w1 : 1 - c.w1);
                                std::int64_t idx = ((dd ? a.i1 : a.i0) * H + (hh ? b.i1 : b.i0)) *
                                                       W + (ww ? c.i1 : c.i0);
                                v += wt * double(src[idx]);
                            }
                    dst[(d * oh + h) * ow + w] = Real(v);
                }
    }
    auto xn = x.node();
    return make_op<Real>({N, C, od, oh, ow}, std::move(out), {x},
                         [xn, sd, sh, sw, N, C, D, H, W, od, oh, ow, osp](Node<Real>& o) {
                             Real* g = xn->grad_buf();
                             for (std::int64_t nc = 0; nc < N * C; ++nc) {
                                 const Real* gy = o.grad.data() + nc * osp;
                                 Real* gx = g + nc * D * H * W;
                                 for (std::int64_t d = 0; d < od; ++d)
                                     for (std::int64_t h = 0; h < oh; ++h)
                                         for (std::int64_t w = 0; w < ow; ++w) {
                                             const auto &a = sd[std::size_t(d)],
                                                        &b = sh[std::size_t(h)],
                                                        &c = sw[std::size_t(w)];
                                             Real gv = gy[(d * oh + h) * ow + w];
                                             for (int dd = 0; dd < 2; ++dd)
                                                 for (int hh = 0; hh < 2; ++hh)
                                                     for (int ww = 0; ww < 2; ++ww) {
                                                         double wt = (dd ? a.w1 : 1 - a.w1) *
                                                                     (hh ? b.w1 : 1 - b.w1) *
                                                                     (ww ? c.w1 : 1 - c.w1);
                                                         std::int64_t idx =
                                                             ((dd ? a.i1 : a.i0) * H +
                                                              (hh ? b.i1 : b.i0)) * W +
                                                             (ww ? c.i1 : c.i0);
                                                         gx[idx] += Real(wt) * gv;
                                                     }
                                         }
                             }
                         });
}

template <class Real>
Tensor<Real> resize_trilinear(const Tensor<Real>& x, double factor) {
    const Shape& s = x.shape();
    require(s.size() == 5, str("resize_trilinear: expected NCDHW, got ", shape_str(s)));
    // floor, so x0.5 on an odd dim shrinks rather than rounds up
    auto tgt = [factor](std::int64_t d) { return std::int64_t(std::floor(double(d) * factor)); };
    return resize_trilinear(x, tgt(s[2]), tgt(s[3]), tgt(s[4]));
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

template <class Real>
struct BatchNormState {
    std::vector<Real> running_mean;
    std::vector<Real> running_var;

    explicit BatchNormState(std::int64_t channels = 0)
        : running_mean(std::size_t(channels), Real(0)),
          running_var(std::size_t(channels), Real(1)) {}
};

enum class BatchNormMode {
    Train,          // batch statistics + running update
    TrainFrozen,    // batch statistics, no running update (pure function)
    Eval,           // running statistics
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <class Real>
Tensor<Real> batchnorm3d(const Tensor<Real>& x, const Tensor<Real>& gamma,
                         const Tensor<Real>& beta, BatchNormState<Real>& state,
                         BatchNormMode mode) {
    const Shape& s = x.shape();
    require(s.size() == 5, str("batchnorm3d: expected NCDHW, got ", shape_str(s)));
    std::int64_t N = s[0], C = s[1], sp = s[2] * s[3] * s[4];
    require(gamma.shape() == Shape{C} && beta.shape() == Shape{C} &&
                std::int64_t(state.running_mean.size()) == C,
            str("batchnorm3d: channel count mismatch, input has ", C, " channels, gamma ",
                shape_str(gamma.shape()), ", state ", state.running_mean.size()));
    std::int64_t m = N * sp;
    std::vector<Real> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
    const Real* xp = x.values().data();
    bool use_batch = (mode != BatchNormMode::Eval);
    if (use_batch) {
        for (std::int64_t c = 0; c < C; ++c) {
            double mu = 0;
            for (std::int64_t n = 0; n < N; ++n) {
                const Real* src = xp + (n * C + c) * sp;
                for (std::int64_t i = 0; i < sp; ++i) mu += double(src[i]);
            }
            mu /= double(m);
            double var = 0;
            for (std::int64_t n = 0; n < N; ++n) {
                const Real* src = xp + (n * C + c) * sp;
                for (std::int64_t i = 0; i < sp; ++i) {
                    double d = double(src[i]) - mu;
                    var += d * d;
                }
            }
            var /= double(m);
            mean[std::size_t(c)] = Real(mu);
            inv_std[std::size_t(c)] = Real(1.0 / std::sqrt(var + kBatchNormEps));
            if (mode == BatchNormMode::Train) {
                double unbiased = (m > 1) ? var * double(m) / double(m - 1) : var;
                state.running_mean[std::size_t(c)] =
                    Real((1 - kBatchNormMomentum) * double(state.running_mean[std::size_t(c)]) +
                         kBatchNormMomentum * mu);
                state.running_var[std::size_t(c)] =
                    Real((1 - kBatchNormMomentum) * double(state.running_var[std::size_t(c)]) +
                         kBatchNormMomentum * unbiased);
            }
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[std::size_t(c)] = state.running_mean[std::size_t(c)];
            inv_std[std::size_t(c)] =
                Real(1.0 / std::sqrt(double(state.running_var[std::size_t(c)]) + kBatchNormEps));
        }
    }
    std::vector<Real> out(x.values().size());
    const Real* gp = gamma.values().data();
    const Real* bp = beta.values().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const Real* src = xp + (n * C + c) * sp;
            Real* dst = out.data() + (n * C + c) * sp;
            Real mu = mean[std::size_t(c)], is = inv_std[std::size_t(c)];
            Real ga = gp[c], be = bp[c];
            for (std::int64_t i = 0; i < sp; ++i) dst[i] = ga * (src[i] - mu) * is + be;
        }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_op<Real>(
        s, std::move(out), {x, gamma, beta},
        [xn, gn, bn, mean, inv_std, use_batch, N, C, sp, m](Node<Real>& o) {
            const Real* gy = o.grad.data();
            const Real* xv = xn->values.data();
            for (std::int64_t c = 0; c < C; ++c) {
                Real mu = mean[std::size_t(c)], is = inv_std[std::size_t(c)];
                Real ga = gn->values[std::size_t(c)];
                double sum_gy = 0, sum_gy_xhat = 0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const Real* gyc = gy + (n * C + c) * sp;
                    const Real* xc = xv + (n * C + c) * sp;
                    for (std::int64_t i = 0; i < sp; ++i) {
                        double xhat = double(xc[i] - mu) * double(is);
                        sum_gy += double(gyc[i]);
                        sum_gy_xhat += double(gyc[i]) * xhat;
                    }
                }
                if (gn->requires_grad) gn->grad_buf()[c] += Real(sum_gy_xhat);
                if (bn->requires_grad) bn->grad_buf()[c] += Real(sum_gy);
                if (xn->requires_grad) {
                    Real* gx = xn->grad_buf();
                    if (use_batch) {
                        double mg = sum_gy / double(m), mgx = sum_gy_xhat / double(m);
                        for (std::int64_t n = 0; n < N; ++n) {
                            const Real* gyc = gy + (n * C + c) * sp;
                            const Real* xc = xv + (n * C + c) * sp;
                            Real* gxc = gx + (n * C + c) * sp;
                            for (std::int64_t i = 0; i < sp; ++i) {
                                double xhat = double(xc[i] - mu) * double(is);
                                gxc[i] += Real(double(ga) * double(is) *
                                               (double(gyc[i]) - mg - xhat * mgx));
                            }
                        }
                    } else {
                        for (std::int64_t n = 0; n < N; ++n) {
                            const Real* gyc = gy + (n * C + c) * sp;
                            Real* gxc = gx + (n * C + c) * sp;
                            for (std::int64_t i = 0; i < sp; ++i) gxc[i] += ga * is * gyc[i];
                        }
                    }
                }
            }
        });
}

}  // namespace rtsu

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "rtsu/geometry.hpp"
#include "rtsu/tensor.hpp"

namespace rtsu {

// Embedding matrices of the relational non-local module. Layouts are chosen
// so every embedding is a plain matrix-vector product per position:
// w_theta/w_phi/w_g: (C', C), w_omega/w_rho: (C', 3), w_r: (C, C').
template <class Real>
struct NonLocalParams {
    Tensor<Real> w_theta, w_phi, w_g;
    Tensor<Real> w_omega, w_rho;
    Tensor<Real> w_r;
    std::int64_t steps = 3;

    std::int64_t channels() const { return w_theta.dim(1); }
    std::int64_t embed_dim() const { return w_theta.dim(0); }

    static NonLocalParams init(std::int64_t c, std::int64_t c_embed, Rng& rng,
                               std::int64_t steps = 3) {
        NonLocalParams p;
        auto make = [&rng](std::int64_t rows, std::int64_t cols) {
            std::vector<Real> v(std::size_t(rows * cols));
            double std_dev = std::sqrt(2.0 / double(cols));  // fan-in
            for (auto& e : v) e = Real(rng.normal() * std_dev);
            return Tensor<Real>::from({rows, cols}, std::move(v), true);
        };
        p.w_theta = make(c_embed, c);
        p.w_phi = make(c_embed, c);
        p.w_g = make(c_embed, c);
        p.w_omega = make(c_embed, 3);
        p.w_rho = make(c_embed, 3);
        p.w_r = make(c, c_embed);
        p.steps = steps;
        return p;
    }
};

namespace detail {

// Criss-cross neighborhood bookkeeping. Omega_i is the union of the three
// axis-aligned lines through i; position i itself appears exactly once (its
// slot on the x line), giving |Omega_i| = D + H + W - 2. Slots are
// canonical so that a_ij can be looked up from either endpoint.
struct CrissCross {
    std::int64_t D, H, W, K;

    CrissCross(std::int64_t d, std::int64_t h, std::int64_t w)
        : D(d), H(h), W(w), K(w + h + d - 2) {}

    std::int64_t pos(std::int64_t d, std::int64_t h, std::int64_t w) const {
        return (d * H + h) * W + w;
    }

    // j-index of slot s in Omega_i
    std::int64_t neighbor(std::int64_t i, std::int64_t s) const {
        std::int64_t d = i / (H * W), h = (i / W) % H, w = i % W;
        if (s < W) return pos(d, h, s);
        s -= W;
        if (s < H - 1) {
            std::int64_t hh = s < h ? s : s + 1;
            return pos(d, hh, w);
        }
        s -= H - 1;
        std::int64_t dd = s < d ? s : s + 1;
        return pos(dd, h, w);
    }

    // slot of j in Omega_i; j must share at least two coordinates with i
    std::int64_t slot(std::int64_t i, std::int64_t j) const {
        std::int64_t di = i / (H * W), hi = (i / W) % H, wi = i % W;
        std::int64_t dj = j / (H * W), hj = (j / W) % H, wj = j % W;
        if (di == dj && hi == hj) return wj;
        if (di == dj && wi == wj) return W + (hj < hi ? hj : hj - 1);
        return W + H - 1 + (dj < di ? dj : dj - 1);
    }
};

// Sparse attention aggregation over the criss-cross neighborhood:
//   y_i = sum_{j in Omega_i} softmax_j(theta_i.phi_j + max(0, u_i.v_j)) g_j
// All operands are (C', P). Time and space O(C' * P * (D+H+W-2)).
template <class Real>
Tensor<Real> line_attention(const Tensor<Real>& theta, const Tensor<Real>& phi,
                            const Tensor<Real>& u, const Tensor<Real>& v, const Tensor<Real>& g,
                            std::int64_t D, std::int64_t H, std::int64_t W) {
    std::int64_t Cp = theta.dim(0), P = theta.dim(1);
    require(P == D * H * W, str("line_attention: ", P, " positions vs grid ", D, "x", H, "x", W));
    CrissCross cc(D, H, W);
    std::int64_t K = cc.K;
    const Real* tp = theta.values().data();
    const Real* pp = phi.values().data();
    const Real* up = u.values().data();
    const Real* vp = v.values().data();
    const Real* gp = g.values().data();

    auto dot_cols = [Cp, P](const Real* a, std::int64_t i, const Real* b, std::int64_t j) {
        double acc = 0;
        for (std::int64_t c = 0; c < Cp; ++c)
            acc += double(a[c * P + i]) * double(b[c * P + j]);
        return acc;
    };

    // attn[i*K + s] is the post-softmax weight of slot s in row i
    auto attn = std::make_shared<std::vector<Real>>(std::size_t(P * K));
    std::vector<Real> out(std::size_t(Cp * P), Real(0));
    std::vector<double> logits(static_cast<std::size_t>(K));
    for (std::int64_t i = 0; i < P; ++i) {
        double mx = -1e300;
        for (std::int64_t s = 0; s < K; ++s) {
            std::int64_t j = cc.neighbor(i, s);
            double tau = dot_cols(up, i, vp, j);
            double l = dot_cols(tp, i, pp, j) + (tau > 0 ? tau : 0.0);
            logits[std::size_t(s)] = l;
            mx = std::max(mx, l);
        }
        double z = 0;
        for (std::int64_t s = 0; s < K; ++s) {
            double e = std::exp(logits[std::size_t(s)] - mx);
            (*attn)[std::size_t(i * K + s)] = Real(e);
            z += e;
        }
        for (std::int64_t s = 0; s < K; ++s) {
            Real a = Real(double((*attn)[std::size_t(i * K + s)]) / z);
            (*attn)[std::size_t(i * K + s)] = a;
            std::int64_t j = cc.neighbor(i, s);
            for (std::int64_t c = 0; c < Cp; ++c) out[std::size_t(c * P + i)] += a * gp[c * P + j];
        }
    }

    auto tn = theta.node(), pn = phi.node(), un = u.node(), vn = v.node(), gn = g.node();
    return make_op<Real>(
        {Cp, P}, std::move(out), {theta, phi, u, v, g},
        [tn, pn, un, vn, gn, attn, cc, Cp, P, K](Node<Real>& o) {
            const Real* tp = tn->values.data();
            const Real* pp = pn->values.data();
            const Real* up = un->values.data();
            const Real* vp = vn->values.data();
            const Real* gp = gn->values.data();
            const Real* gy = o.grad.data();
            auto dot_cols = [Cp, P](const Real* a, std::int64_t i, const Real* b,
                                    std::int64_t j) {
                double acc = 0;
                for (std::int64_t c = 0; c < Cp; ++c)
                    acc += double(a[c * P + i]) * double(b[c * P + j]);
                return acc;
            };
            // R_i = sum_s a_is (gy_i . g_js)
            std::vector<double> row_dot(std::size_t(P), 0.0);
            for (std::int64_t i = 0; i < P; ++i) {
                double r = 0;
                for (std::int64_t s = 0; s < K; ++s) {
                    std::int64_t j = cc.neighbor(i, s);
                    r += double((*attn)[std::size_t(i * K + s)]) * dot_cols(gy, i, gp, j);
                }
                row_dot[std::size_t(i)] = r;
            }
            // dl_ij = a_ij ((gy_i . g_j) - R_i)
            auto dlogit = [&](std::int64_t i, std::int64_t j) {
                double a = double((*attn)[std::size_t(i * K + cc.slot(i, j))]);
                return a * (dot_cols(gy, i, gp, j) - row_dot[std::size_t(i)]);
            };
            bool need_theta = tn->requires_grad, need_phi = pn->requires_grad;
            bool need_u = un->requires_grad, need_v = vn->requires_grad;
            bool need_g = gn->requires_grad;
            Real* gt = need_theta ? tn->grad_buf() : nullptr;
            Real* gph = need_phi ? pn->grad_buf() : nullptr;
            Real* gu = need_u ? un->grad_buf() : nullptr;
            Real* gv = need_v ? vn->grad_buf() : nullptr;
            Real* gg = need_g ? gn->grad_buf() : nullptr;
            for (std::int64_t i = 0; i < P; ++i) {
                for (std::int64_t s = 0; s < K; ++s) {
                    std::int64_t j = cc.neighbor(i, s);
                    double dl = dlogit(i, j);
                    if (need_theta || need_u) {
                        // row-side accumulation for position i
                        if (need_theta)
                            for (std::int64_t c = 0; c < Cp; ++c)
                                gt[c * P + i] += Real(dl * double(pp[c * P + j]));
                        if (need_u && dot_cols(up, i, vp, j) > 0)
                            for (std::int64_t c = 0; c < Cp; ++c)
                                gu[c * P + i] += Real(dl * double(vp[c * P + j]));
                    }
                    // column-side accumulation for position j, gathered via the
                    // symmetric neighborhood (i in Omega_j)
                    double dl_ji = dlogit(j, i);
                    if (need_phi)
                        for (std::int64_t c = 0; c < Cp; ++c)
                            gph[c * P + i] += Real(dl_ji * double(tp[c * P + j]));
                    if (need_v && dot_cols(up, j, vp, i) > 0)
                        for (std::int64_t c = 0; c < Cp; ++c)
                            gv[c * P + i] += Real(dl_ji * double(up[c * P + j]));
                    if (need_g) {
                        double a_ji = double((*attn)[std::size_t(j * K + cc.slot(j, i))]);
                        for (std::int64_t c = 0; c < Cp; ++c)
                            gg[c * P + i] += Real(a_ji * double(gy[c * P + j]));
                    }
                }
            }
        });
}

template <class Real>
struct EmbeddedFeatures {
    Tensor<Real> flat;  // (C, P)
    Tensor<Real> theta, phi, g, u, v;
};

template <class Real>
EmbeddedFeatures<Real> embed_features(const Tensor<Real>& x, const GeometricMap<Real>& mu,
                                      const NonLocalParams<Real>& p) {
    const Shape& s = x.shape();
    require(s.size() == 5, str("non-local: expected NCDHW input, got ", shape_str(s)));
    require(s[0] == 1, str("non-local: batch dim must be 1, got ", s[0]));
    require(s[1] == p.channels(), str("non-local: input has ", s[1], " channels, params expect ",
                                      p.channels()));
    std::int64_t P = s[2] * s[3] * s[4];
    require(mu.positions() == P,
            str("non-local: geometric map covers ", mu.positions(), " positions, feature grid has ",
                P));
    EmbeddedFeatures<Real> e;
    e.flat = reshape(x, {s[1], P});
    e.theta = matmul(p.w_theta, e.flat);
    e.phi = matmul(p.w_phi, e.flat);
    e.g = matmul(p.w_g, e.flat);
    e.u = matmul(p.w_omega, mu.coords);
    e.v = matmul(p.w_rho, mu.coords);
    return e;
}

}  // namespace detail

// Dense (all-pairs) relational non-local response with residual:
//   z = W_r softmax_rows(x^T Wt^T Wp x + max(0, mu^T Wo^T Wrho mu)) g(x) + x
// Reference form; quadratic in the number of positions.
template <class Real>
Tensor<Real> dense_nonlocal(const Tensor<Real>& x, const GeometricMap<Real>& mu,
                            const NonLocalParams<Real>& p) {
    auto e = detail::embed_features(x, mu, p);
    auto logits = add(matmul(transpose2d(e.theta), e.phi),
                      relu(matmul(transpose2d(e.u), e.v)));
    auto a = softmax_rows(logits);
    auto y = matmul(e.g, transpose2d(a));
    auto out = add(matmul(p.w_r, y), e.flat);
    return reshape(out, x.shape());
}

// One criss-cross step: attention restricted to the three axis-aligned lines
// through each position.
template <class Real>
Tensor<Real> crisscross_step(const Tensor<Real>& z_prev, const GeometricMap<Real>& mu,
                             const NonLocalParams<Real>& p) {
    auto e = detail::embed_features(z_prev, mu, p);
    const Shape& s = z_prev.shape();
    auto y = detail::line_attention(e.theta, e.phi, e.u, e.v, e.g, s[2], s[3], s[4]);
    auto out = add(matmul(p.w_r, y), e.flat);
    return reshape(out, s);
}

// T recurrent criss-cross steps with shared parameters (T=3 reaches every
// position of a 3D grid).
template <class Real>
Tensor<Real> recurrent_nonlocal(const Tensor<Real>& x, const GeometricMap<Real>& mu,
                                const NonLocalParams<Real>& p) {
    require(p.steps >= 1, str("recurrent_nonlocal: T=", p.steps, " < 1"));
    Tensor<Real> z = x;
    for (std::int64_t t = 0; t < p.steps; ++t) z = crisscross_step(z, mu, p);
    return z;
}

// Row i of the dense attention (first recurrence step): pre-softmax logits
// and post-softmax weights over the whole grid. Diagnostic output, no tape.
template <class Real>
struct AttentionProbe {
    std::vector<Real> logits;
    std::vector<Real> weights;
    Dims3 grid;
};

template <class Real>
AttentionProbe<Real> attention_probe(const Tensor<Real>& x, const GeometricMap<Real>& mu,
                                     const NonLocalParams<Real>& p, const Dims3& at) {
    NoGradGuard no_grad;
    const Shape& s = x.shape();
    auto e = detail::embed_features(x, mu, p);
    for (int a = 0; a < 3; ++a)
        require(at[a] >= 0 && at[a] < s[std::size_t(2 + a)],
                str("attention_probe: location ", at[a], " outside grid axis ", a, " of ",
                    s[std::size_t(2 + a)]));
    std::int64_t P = mu.positions();
    std::int64_t i = (at[0] * s[3] + at[1]) * s[4] + at[2];
    std::int64_t Cp = p.embed_dim();
    const Real* tp = e.theta.values().data();
    const Real* pp = e.phi.values().data();
    const Real* up = e.u.values().data();
    const Real* vp = e.v.values().data();
    AttentionProbe<Real> probe;
    probe.grid = {s[2], s[3], s[4]};
    probe.logits.resize(std::size_t(P));
    probe.weights.resize(std::size_t(P));
    double mx = -1e300;
    for (std::int64_t j = 0; j < P; ++j) {
        double f = 0, tau = 0;
        for (std::int64_t c = 0; c < Cp; ++c) {
            f += double(tp[c * P + i]) * double(pp[c * P + j]);
            tau += double(up[c * P + i]) * double(vp[c * P + j]);
        }
        double l = f + std::max(0.0, tau);
        probe.logits[std::size_t(j)] = Real(l);
        mx = std::max(mx, l);
    }
    double z = 0;
    for (std::int64_t j = 0; j < P; ++j) {
        double ev = std::exp(double(probe.logits[std::size_t(j)]) - mx);
        probe.weights[std::size_t(j)] = Real(ev);
        z += ev;
    }
    for (auto& w : probe.weights) w = Real(double(w) / z);
    return probe;
}

}  // namespace rtsu

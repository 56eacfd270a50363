#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rtsu/core.hpp"
#include "rtsu/gemm.hpp"

namespace rtsu {

// Thread-local tape switch. With grad mode off, ops produce leaf outputs and
// intermediate buffers are freed as soon as their handles go out of scope.
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

private:
    static bool& flag() {
        static thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev); }
};

template <class Real>
struct Node {
    Shape shape;
    std::vector<Real> values;
    std::vector<Real> grad;  // allocated on demand
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    std::int64_t count() const { return std::int64_t(values.size()); }

    Real* grad_buf() {
        if (grad.size() != values.size()) grad.assign(values.size(), Real(0));
        return grad.data();
    }
};

template <class Real>
class Tensor {
public:
    using value_type = Real;

    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false) {
        return filled(std::move(s), Real(0), requires_grad);
    }

    static Tensor filled(Shape s, Real v, bool requires_grad = false) {
        auto n = std::make_shared<Node<Real>>();
        n->values.assign(std::size_t(numel(s)), v);
        n->shape = std::move(s);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(Shape s, std::vector<Real> data, bool requires_grad = false) {
        require(std::int64_t(data.size()) == numel(s),
                str("tensor: data size ", data.size(), " does not match shape ", shape_str(s)));
        auto n = std::make_shared<Node<Real>>();
        n->shape = std::move(s);
        n->values = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    bool defined() const { return bool(n_); }
    const Shape& shape() const { return n_->shape; }
    std::int64_t size() const { return n_->count(); }
    std::int64_t dim(int i) const { return n_->shape[std::size_t(i)]; }

    std::vector<Real>& values() { return n_->values; }
    const std::vector<Real>& values() const { return n_->values; }
    const std::vector<Real>& grad() const {
        require(n_->grad.size() == n_->values.size(), "tensor: gradient not computed");
        return n_->grad;
    }
    bool has_grad() const { return n_->grad.size() == n_->values.size(); }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool on) { n_->requires_grad = on; }
    void zero_grad() { n_->grad.assign(n_->values.size(), Real(0)); }

    std::shared_ptr<Node<Real>> node() const { return n_; }

    Real item() const {
        require(size() == 1, str("item() on tensor of shape ", shape_str(shape())));
        return n_->values[0];
    }

    // Reverse pass from a scalar root. Non-leaf gradients in the subgraph are
    // reset first; leaf gradients accumulate across calls.
    void backward() const {
        require(size() == 1, str("backward() root must be scalar, got ", shape_str(shape())));
        require(n_->requires_grad, "backward() on a tensor without gradient tracking");
        std::vector<Node<Real>*> topo;
        std::unordered_set<Node<Real>*> seen;
        std::vector<std::pair<Node<Real>*, std::size_t>> stack;
        stack.push_back({n_.get(), 0});
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node<Real>* p = node->parents[next++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                topo.push_back(node);
                stack.pop_back();
            }
        }
        // topo is post-order: parents before children
        for (auto* node : topo)
            if (node->backprop) node->grad.assign(node->values.size(), Real(0));
        n_->grad_buf()[0] = Real(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it)
            if ((*it)->backprop) (*it)->backprop(**it);
    }

private:
    explicit Tensor(std::shared_ptr<Node<Real>> n) : n_(std::move(n)) {}
    std::shared_ptr<Node<Real>> n_;

    template <class R>
    friend Tensor<R> make_op(Shape, std::vector<R>, std::vector<Tensor<R>>,
                             std::function<void(Node<R>&)>);
};

// Builds an op output node. The tape entry is dropped when no parent needs
// gradients (or grad mode is off), which keeps inference memory flat.
template <class Real>
Tensor<Real> make_op(Shape shape, std::vector<Real> values, std::vector<Tensor<Real>> parents,
                     std::function<void(Node<Real>&)> backprop) {
    auto n = std::make_shared<Node<Real>>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    bool need = false;
    if (GradMode::enabled())
        for (const auto& p : parents) need = need || p.requires_grad();
    if (need) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor<Real>(std::move(n));
}

namespace detail {

template <class Real>
void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    require(a.shape() == b.shape(), str(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                                        shape_str(b.shape())));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<Real> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    auto an = a.node(), bn = b.node();
    return make_op<Real>(a.shape(), std::move(out), {a, b}, [an, bn](Node<Real>& o) {
        if (an->requires_grad) {
            Real* g = an->grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            Real* g = bn->grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
    });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<Real> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    auto an = a.node(), bn = b.node();
    return make_op<Real>(a.shape(), std::move(out), {a, b}, [an, bn](Node<Real>& o) {
        if (an->requires_grad) {
            Real* g = an->grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            Real* g = bn->grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<Real> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    auto an = a.node(), bn = b.node();
    return make_op<Real>(a.shape(), std::move(out), {a, b}, [an, bn](Node<Real>& o) {
        if (an->requires_grad) {
            Real* g = an->grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bn->values[i];
        }
        if (bn->requires_grad) {
            Real* g = bn->grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * an->values[i];
        }
    });
}

template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<Real> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
    auto an = a.node(), bn = b.node();
    return make_op<Real>(a.shape(), std::move(out), {a, b}, [an, bn](Node<Real>& o) {
        if (an->requires_grad) {
            Real* g = an->grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] / bn->values[i];
        }
        if (bn->requires_grad) {
            Real* g = bn->grad_buf();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                Real bi = bn->values[i];
                g[i] -= o.grad[i] * an->values[i] / (bi * bi);
            }
        }
    });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    std::vector<Real> out(a.values());
    for (auto& v : out) v *= c;
    auto an = a.node();
    return make_op<Real>(a.shape(), std::move(out), {a}, [an, c](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += c * o.grad[i];
    });
}

// c - a, elementwise (also serves as negation with c = 0)
template <class Real>
Tensor<Real> const_minus(Real c, const Tensor<Real>& a) {
    std::vector<Real> out(a.values());
    for (auto& v : out) v = c - v;
    auto an = a.node();
    return make_op<Real>(a.shape(), std::move(out), {a}, [an](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    });
}

template <class Real>
Tensor<Real> add_const(const Tensor<Real>& a, Real c) {
    std::vector<Real> out(a.values());
    for (auto& v : out) v += c;
    auto an = a.node();
    return make_op<Real>(a.shape(), std::move(out), {a}, [an](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
    std::vector<Real> out(a.values());
    for (auto& v : out) v = v > Real(0) ? v : Real(0);
    auto an = a.node();
    return make_op<Real>(a.shape(), std::move(out), {a}, [an](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (o.values[i] > Real(0)) g[i] += o.grad[i];
    });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
    std::vector<Real> out(a.values());
    for (auto& v : out) v = Real(1) / (Real(1) + std::exp(-v));
    auto an = a.node();
    return make_op<Real>(a.shape(), std::move(out), {a}, [an](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            Real y = o.values[i];
            g[i] += o.grad[i] * y * (Real(1) - y);
        }
    });
}

enum class Pointwise { Relu, Sigmoid };

template <class Real>
Tensor<Real> pointwise(const Tensor<Real>& a, Pointwise fn) {
    return fn == Pointwise::Relu ? relu(a) : sigmoid(a);
}

// log(max(x, floor)); gradient is zero on the clamped range
template <class Real>
Tensor<Real> log_clamped(const Tensor<Real>& a, Real floor) {
    std::vector<Real> out(a.values());
    for (auto& v : out) v = std::log(v > floor ? v : floor);
    auto an = a.node();
    return make_op<Real>(a.shape(), std::move(out), {a}, [an, floor](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (an->values[i] > floor) g[i] += o.grad[i] / an->values[i];
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape s) {
    require(numel(s) == a.size(), str("reshape: ", shape_str(a.shape()), " has ", a.size(),
                                      " elements, target ", shape_str(s), " needs ", numel(s)));
    std::vector<Real> out(a.values());
    auto an = a.node();
    return make_op<Real>(std::move(s), std::move(out), {a}, [an](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

// General strided sub-block copy; starts/sizes must be in bounds.
template <class Real>
Tensor<Real> crop(const Tensor<Real>& a, const Shape& starts, const Shape& sizes) {
    const Shape& in = a.shape();
    require(starts.size() == in.size() && sizes.size() == in.size(),
            str("crop: rank mismatch for ", shape_str(in)));
    for (std::size_t d = 0; d < in.size(); ++d)
        require(starts[d] >= 0 && sizes[d] >= 1 && starts[d] + sizes[d] <= in[d],
                str("crop: window [", starts[d], ",", starts[d] + sizes[d], ") outside dim ", d,
                    " of ", shape_str(in)));
    std::size_t rank = in.size();
    std::vector<std::int64_t> istr(rank, 1), ostr(rank, 1);
    for (std::size_t d = rank - 1; d > 0; --d) {
        istr[d - 1] = istr[d] * in[d];
        ostr[d - 1] = ostr[d] * sizes[d];
    }
    std::int64_t total = numel(sizes);
    std::vector<Real> out(static_cast<std::size_t>(total));
    const Real* src = a.values().data();
    std::int64_t row = sizes[rank - 1];
    for (std::int64_t o = 0; o < total; o += row) {
        std::int64_t rem = o, src_off = 0;
        for (std::size_t d = 0; d < rank; ++d) {
            std::int64_t idx = rem / ostr[d];
            rem %= ostr[d];
            src_off += (starts[d] + idx) * istr[d];
        }
        std::copy(src + src_off, src + src_off + row, out.begin() + o);
    }
    auto an = a.node();
    return make_op<Real>(sizes, std::move(out), {a},
                         [an, starts, istr, ostr, rank, row, total](Node<Real>& o) {
                             Real* g = an->grad_buf();
                             for (std::int64_t ob = 0; ob < total; ob += row) {
                                 std::int64_t rem = ob, src_off = 0;
                                 for (std::size_t d = 0; d < rank; ++d) {
                                     std::int64_t idx = rem / ostr[d];
                                     rem %= ostr[d];
                                     src_off += (starts[d] + idx) * istr[d];
                                 }
                                 for (std::int64_t i = 0; i < row; ++i)
                                     g[src_off + i] += o.grad[std::size_t(ob + i)];
                             }
                         });
}

// Zero padding of the three spatial dims of an NCDHW tensor; pads is
// {d_lo, d_hi, h_lo, h_hi, w_lo, w_hi}.
template <class Real>
Tensor<Real> pad_spatial(const Tensor<Real>& a, const std::array<std::int64_t, 6>& pads) {
    const Shape& s = a.shape();
    require(s.size() == 5, str("pad_spatial: expected NCDHW, got ", shape_str(s)));
    for (auto p : pads) require(p >= 0, "pad_spatial: negative padding");
    std::int64_t N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    std::int64_t OD = D + pads[0] + pads[1], OH = H + pads[2] + pads[3], OW = W + pads[4] + pads[5];
    std::vector<Real> out(std::size_t(N * C * OD * OH * OW), Real(0));
    const Real* src = a.values().data();
    for (std::int64_t nc = 0; nc < N * C; ++nc)
        for (std::int64_t d = 0; d < D; ++d)
            for (std::int64_t h = 0; h < H; ++h) {
                const Real* sp = src + ((nc * D + d) * H + h) * W;
                Real* dp = out.data() +
                           ((nc * OD + d + pads[0]) * OH + h + pads[2]) * OW + pads[4];
                std::copy(sp, sp + W, dp);
            }
    auto an = a.node();
    return make_op<Real>({N, C, OD, OH, OW}, std::move(out), {a},
                         [an, pads, N, C, D, H, W, OD, OH, OW](Node<Real>& o) {
                             Real* g = an->grad_buf();
                             for (std::int64_t nc = 0; nc < N * C; ++nc)
                                 for (std::int64_t d = 0; d < D; ++d)
                                     for (std::int64_t h = 0; h < H; ++h) {
                                         const Real* op = o.grad.data() +
                                                          ((nc * OD + d + pads[0]) * OH + h +
                                                           pads[2]) * OW + pads[4];
                                         Real* gp = g + ((nc * D + d) * H + h) * W;
                                         for (std::int64_t w = 0; w < W; ++w) gp[w] += op[w];
                                     }
                         });
}

template <class Real>
Tensor<Real> concat_channels(const std::vector<Tensor<Real>>& parts) {
    require(!parts.empty(), "concat_channels: no inputs");
    const Shape& s0 = parts[0].shape();
    require(s0.size() == 5, str("concat_channels: expected NCDHW, got ", shape_str(s0)));
    std::int64_t N = s0[0], D = s0[2], H = s0[3], W = s0[4], C = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        require(s.size() == 5 && s[0] == N && s[2] == D && s[3] == H && s[4] == W,
                str("concat_channels: incompatible shapes ", shape_str(s0), " vs ", shape_str(s)));
        C += s[1];
    }
    std::int64_t sp = D * H * W;
    std::vector<Real> out(std::size_t(N * C * sp));
    std::vector<std::int64_t> offs;
    std::int64_t off = 0;
    for (const auto& p : parts) {
        offs.push_back(off);
        std::int64_t pc = p.shape()[1];
        for (std::int64_t n = 0; n < N; ++n)
            std::copy(p.values().begin() + n * pc * sp, p.values().begin() + (n + 1) * pc * sp,
                      out.begin() + (n * C + off) * sp);
        off += pc;
    }
    std::vector<std::shared_ptr<Node<Real>>> pn;
    std::vector<std::int64_t> pcs;
    for (const auto& p : parts) {
        pn.push_back(p.node());
        pcs.push_back(p.shape()[1]);
    }
    return make_op<Real>({N, C, D, H, W}, std::move(out), parts,
                         [pn, pcs, offs, N, C, sp](Node<Real>& o) {
                             for (std::size_t k = 0; k < pn.size(); ++k) {
                                 if (!pn[k]->requires_grad) continue;
                                 Real* g = pn[k]->grad_buf();
                                 for (std::int64_t n = 0; n < N; ++n) {
                                     const Real* src = o.grad.data() + (n * C + offs[k]) * sp;
                                     Real* dst = g + n * pcs[k] * sp;
                                     for (std::int64_t i = 0; i < pcs[k] * sp; ++i)
                                         dst[i] += src[i];
                                 }
                             }
                         });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
    Real s = 0;
    for (Real v : a.values()) s += v;
    auto an = a.node();
    return make_op<Real>({1}, {s}, {a}, [an](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::size_t i = 0; i < an->values.size(); ++i) g[i] += o.grad[0];
    });
}

// Mean of the k largest elements (ties by lower flat index); gradient flows
// only into the selected elements.
template <class Real>
Tensor<Real> topk_mean(const Tensor<Real>& a, std::int64_t k) {
    std::int64_t n = a.size();
    require(k >= 1 && k <= n, str("topk_mean: k=", k, " out of range for ", n, " elements"));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[std::size_t(i)] = i;
    const auto& v = a.values();
    std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(),
                     [&](std::int64_t x, std::int64_t y) {
                         return v[std::size_t(x)] != v[std::size_t(y)]
                                    ? v[std::size_t(x)] > v[std::size_t(y)]
                                    : x < y;
                     });
    idx.resize(std::size_t(k));
    std::sort(idx.begin(), idx.end());  // fixed summation order
    Real s = 0;
    for (auto i : idx) s += v[std::size_t(i)];
    Real out = s / Real(k);
    auto an = a.node();
    return make_op<Real>({1}, {out}, {a}, [an, idx, k](Node<Real>& o) {
        Real* g = an->grad_buf();
        Real w = o.grad[0] / Real(k);
        for (auto i : idx) g[std::size_t(i)] += w;
    });
}

// ---------------------------------------------------------------------------
// 2D linear algebra
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> transpose2d(const Tensor<Real>& a) {
    require(a.shape().size() == 2, str("transpose2d: expected 2D, got ", shape_str(a.shape())));
    std::int64_t R = a.dim(0), C = a.dim(1);
    std::vector<Real> out(std::size_t(R * C));
    const Real* src = a.values().data();
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c) out[std::size_t(c * R + r)] = src[r * C + c];
    auto an = a.node();
    return make_op<Real>({C, R}, std::move(out), {a}, [an, R, C](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c) g[r * C + c] += o.grad[std::size_t(c * R + r)];
    });
}

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2,
            str("matmul: expected 2D operands, got ", shape_str(a.shape()), " and ",
                shape_str(b.shape())));
    std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    require(b.dim(0) == K, str("matmul: inner dims ", K, " vs ", b.dim(0)));
    std::vector<Real> out(std::size_t(M * N));
    gemm<Real>(false, false, M, N, K, Real(1), a.values().data(), K, b.values().data(), N, Real(0),
               out.data(), N);
    auto an = a.node(), bn = b.node();
    return make_op<Real>({M, N}, std::move(out), {a, b}, [an, bn, M, K, N](Node<Real>& o) {
        if (an->requires_grad)  // dA += dC * B^T
            gemm<Real>(false, true, M, K, N, Real(1), o.grad.data(), N, bn->values.data(), N,
                       Real(1), an->grad_buf(), K);
        if (bn->requires_grad)  // dB += A^T * dC
            gemm<Real>(true, false, K, N, M, Real(1), an->values.data(), K, o.grad.data(), N,
                       Real(1), bn->grad_buf(), N);
    });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
void softmax_strided(const Real* x, Real* y, std::int64_t n, std::int64_t stride) {
    Real m = x[0];
    for (std::int64_t i = 1; i < n; ++i) m = std::max(m, x[i * stride]);
    Real z = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        Real e = std::exp(x[i * stride] - m);
        y[i * stride] = e;
        z += e;
    }
    for (std::int64_t i = 0; i < n; ++i) y[i * stride] /= z;
}

template <class Real>
void softmax_backprop_strided(const Real* y, const Real* gy, Real* gx, std::int64_t n,
                              std::int64_t stride) {
    Real dot = 0;
    for (std::int64_t i = 0; i < n; ++i) dot += y[i * stride] * gy[i * stride];
    for (std::int64_t i = 0; i < n; ++i)
        gx[i * stride] += y[i * stride] * (gy[i * stride] - dot);
}

}  // namespace detail

// Row softmax of a 2D tensor (max-subtracted).
template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& a) {
    require(a.shape().size() == 2, str("softmax_rows: expected 2D, got ", shape_str(a.shape())));
    std::int64_t R = a.dim(0), C = a.dim(1);
    std::vector<Real> out(std::size_t(R * C));
    const Real* x = a.values().data();
    for (std::int64_t r = 0; r < R; ++r)
        detail::softmax_strided(x + r * C, out.data() + r * C, C, 1);
    auto an = a.node();
    return make_op<Real>(a.shape(), std::move(out), {a}, [an, R, C](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::int64_t r = 0; r < R; ++r)
            detail::softmax_backprop_strided(o.values.data() + r * C, o.grad.data() + r * C,
                                             g + r * C, C, 1);
    });
}

// Per-voxel softmax across the channel dim of an NCDHW tensor.
template <class Real>
Tensor<Real> softmax_channels(const Tensor<Real>& a) {
    const Shape& s = a.shape();
    require(s.size() == 5, str("softmax_channels: expected NCDHW, got ", shape_str(s)));
    std::int64_t N = s[0], C = s[1], sp = s[2] * s[3] * s[4];
    require(C >= 1, "softmax_channels: needs at least one channel");
    std::vector<Real> out(a.values().size());
    const Real* x = a.values().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t v = 0; v < sp; ++v)
            detail::softmax_strided(x + n * C * sp + v, out.data() + n * C * sp + v, C, sp);
    auto an = a.node();
    return make_op<Real>(s, std::move(out), {a}, [an, N, C, sp](Node<Real>& o) {
        Real* g = an->grad_buf();
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t v = 0; v < sp; ++v)
                detail::softmax_backprop_strided(o.values.data() + n * C * sp + v,
                                                 o.grad.data() + n * C * sp + v,
                                                 g + n * C * sp + v, C, sp);
    });
}

// Picks probs[0, labels[v], v] for every voxel; backward scatters into the
// chosen channels only.
template <class Real>
Tensor<Real> gather_label_probs(const Tensor<Real>& probs, const std::vector<std::uint8_t>& labels) {
    const Shape& s = probs.shape();
    require(s.size() == 5 && s[0] == 1,
            str("gather_label_probs: expected 1xCxDxHxW, got ", shape_str(s)));
    std::int64_t C = s[1], sp = s[2] * s[3] * s[4];
    require(std::int64_t(labels.size()) == sp,
            str("gather_label_probs: ", labels.size(), " labels for ", sp, " voxels"));
    std::vector<Real> out(static_cast<std::size_t>(sp));
    const Real* x = probs.values().data();
    for (std::int64_t v = 0; v < sp; ++v) {
        require(labels[std::size_t(v)] < C, str("gather_label_probs: label ",
                                                int(labels[std::size_t(v)]), " >= C=", C));
        out[std::size_t(v)] = x[labels[std::size_t(v)] * sp + v];
    }
    auto pn = probs.node();
    return make_op<Real>({sp}, std::move(out), {probs}, [pn, labels, sp](Node<Real>& o) {
        Real* g = pn->grad_buf();
        for (std::int64_t v = 0; v < sp; ++v)
            g[labels[std::size_t(v)] * sp + v] += o.grad[std::size_t(v)];
    });
}

}  // namespace rtsu

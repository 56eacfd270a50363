#pragma once

#include <cstdint>

#ifdef RTSU_HAVE_EIGEN
#include <Eigen/Dense>
#endif

namespace rtsu {

// C (MxN) = alpha * op(A) * op(B) + beta * C, row-major.
#ifdef RTSU_HAVE_EIGEN

template <class Real>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, Real alpha,
          const Real* a, std::int64_t lda, const Real* b, std::int64_t ldb, Real beta, Real* c,
          std::int64_t ldc) {
    using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using ConstMap = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
    using MutMap = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
    ConstMap ma(a, trans_a ? k : m, trans_a ? m : k, Eigen::OuterStride<>(lda));
    ConstMap mb(b, trans_b ? n : k, trans_b ? k : n, Eigen::OuterStride<>(ldb));
    MutMap mc(c, m, n, Eigen::OuterStride<>(ldc));
    auto assign = [&](const auto& prod) {
        if (beta == Real(0)) {
            mc.noalias() = alpha * prod;
        } else {
            if (beta != Real(1)) mc *= beta;
            mc.noalias() += alpha * prod;
        }
    };
    if (!trans_a && !trans_b)
        assign(ma * mb);
    else if (trans_a && !trans_b)
        assign(ma.transpose() * mb);
    else if (!trans_a && trans_b)
        assign(ma * mb.transpose());
    else
        assign(ma.transpose() * mb.transpose());
}

#else

// Portable fallback; slow but correct.
template <class Real>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, Real alpha,
          const Real* a, std::int64_t lda, const Real* b, std::int64_t ldb, Real beta, Real* c,
          std::int64_t ldc) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            Real acc = 0;
            for (std::int64_t p = 0; p < k; ++p) {
                Real av = ta ? a[p * lda + i] : a[i * lda + p];
                Real bv = tb ? b[j * ldb + p] : b[p * ldb + j];
                acc += av * bv;
            }
            // beta == 0 must overwrite even if C holds garbage, as BLAS does
            Real prev = (beta == Real(0)) ? Real(0) : beta * c[i * ldc + j];
            c[i * ldc + j] = alpha * acc + prev;
        }
    }
}

#endif

}  // namespace rtsu

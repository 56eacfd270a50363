#pragma once

#include <cstdint>

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

// Vectorized dot kernels for the convolution backward passes. gcc will not
// vectorize float reductions without -ffast-math, which would cost
// run-to-run determinism; fixed-order intrinsics keep both.
namespace rtsu::simd {

template <class Real>
inline Real dot(const Real* a, const Real* b, std::int64_t n) {
    Real lanes[8] = {};
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
    for (; i < n; ++i) lanes[0] += a[i] * b[i];
    return ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) +
           ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
}

// out3[k] += sum_i g[i] * x[i + k] for k = 0,1,2 (x must have n+2 entries)
template <class Real>
inline void dot3(const Real* g, const Real* x, std::int64_t n, Real* out3) {
    Real l0[8] = {}, l1[8] = {}, l2[8] = {};
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) {
            Real gv = g[i + l];
            l0[l] += gv * x[i + l];
            l1[l] += gv * x[i + l + 1];
            l2[l] += gv * x[i + l + 2];
        }
    for (; i < n; ++i) {
        Real gv = g[i];
        l0[0] += gv * x[i];
        l1[0] += gv * x[i + 1];
        l2[0] += gv * x[i + 2];
    }
    auto red = [](Real* l) {
        return ((l[0] + l[4]) + (l[1] + l[5])) + ((l[2] + l[6]) + (l[3] + l[7]));
    };
    out3[0] += red(l0);
    out3[1] += red(l1);
    out3[2] += red(l2);
}

#if defined(__AVX512F__)

template <>
inline float dot<float>(const float* a, const float* b, std::int64_t n) {
    __m512 acc = _mm512_setzero_ps();
    std::int64_t i = 0;
    for (; i + 16 <= n; i += 16)
        acc = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc);
    float s = _mm512_reduce_add_ps(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <>
inline double dot<double>(const double* a, const double* b, std::int64_t n) {
    __m512d acc = _mm512_setzero_pd();
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        acc = _mm512_fmadd_pd(_mm512_loadu_pd(a + i), _mm512_loadu_pd(b + i), acc);
    double s = _mm512_reduce_add_pd(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <>
inline void dot3<float>(const float* g, const float* x, std::int64_t n, float* out3) {
    __m512 a0 = _mm512_setzero_ps(), a1 = _mm512_setzero_ps(), a2 = _mm512_setzero_ps();
    std::int64_t i = 0;
    for (; i + 16 <= n; i += 16) {
        __m512 gv = _mm512_loadu_ps(g + i);
        a0 = _mm512_fmadd_ps(gv, _mm512_loadu_ps(x + i), a0);
        a1 = _mm512_fmadd_ps(gv, _mm512_loadu_ps(x + i + 1), a1);
        a2 = _mm512_fmadd_ps(gv, _mm512_loadu_ps(x + i + 2), a2);
    }
    float s0 = _mm512_reduce_add_ps(a0);
    float s1 = _mm512_reduce_add_ps(a1);
    float s2 = _mm512_reduce_add_ps(a2);
    for (; i < n; ++i) {
        float gv = g[i];
        s0 += gv * x[i];
        s1 += gv * x[i + 1];
        s2 += gv * x[i + 2];
    }
    out3[0] += s0;
    out3[1] += s1;
    out3[2] += s2;
}

template <>
inline void dot3<double>(const double* g, const double* x, std::int64_t n, double* out3) {
    __m512d a0 = _mm512_setzero_pd(), a1 = _mm512_setzero_pd(), a2 = _mm512_setzero_pd();
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m512d gv = _mm512_loadu_pd(g + i);
        a0 = _mm512_fmadd_pd(gv, _mm512_loadu_pd(x + i), a0);
        a1 = _mm512_fmadd_pd(gv, _mm512_loadu_pd(x + i + 1), a1);
        a2 = _mm512_fmadd_pd(gv, _mm512_loadu_pd(x + i + 2), a2);
    }
    double s0 = _mm512_reduce_add_pd(a0);
    double s1 = _mm512_reduce_add_pd(a1);
    double s2 = _mm512_reduce_add_pd(a2);
    for (; i < n; ++i) {
        double gv = g[i];
        s0 += gv * x[i];
        s1 += gv * x[i + 1];
        s2 += gv * x[i + 2];
    }
    out3[0] += s0;
    out3[1] += s1;
    out3[2] += s2;
}

#elif defined(__AVX2__) && defined(__FMA__)

namespace detail {
inline float hadd(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v), hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
    return _mm_cvtss_f32(lo);
}
inline double hadd(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v), hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}
}  // namespace detail

template <>
inline float dot<float>(const float* a, const float* b, std::int64_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
    float s = detail::hadd(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <>
inline double dot<double>(const double* a, const double* b, std::int64_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::int64_t i = 0;
    for (; i + 4 <= n; i += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
    double s = detail::hadd(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <>
inline void dot3<float>(const float* g, const float* x, std::int64_t n, float* out3) {
    __m256 a0 = _mm256_setzero_ps(), a1 = _mm256_setzero_ps(), a2 = _mm256_setzero_ps();
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 gv = _mm256_loadu_ps(g + i);
        a0 = _mm256_fmadd_ps(gv, _mm256_loadu_ps(x + i), a0);
        a1 = _mm256_fmadd_ps(gv, _mm256_loadu_ps(x + i + 1), a1);
        a2 = _mm256_fmadd_ps(gv, _mm256_loadu_ps(x + i + 2), a2);
    }
    float s0 = detail::hadd(a0), s1 = detail::hadd(a1), s2 = detail::hadd(a2);
    for (; i < n; ++i) {
        float gv = g[i];
        s0 += gv * x[i];
        s1 += gv * x[i + 1];
        s2 += gv * x[i + 2];
    }
    out3[0] += s0;
    out3[1] += s1;
    out3[2] += s2;
}

template <>
inline void dot3<double>(const double* g, const double* x, std::int64_t n, double* out3) {
    __m256d a0 = _mm256_setzero_pd(), a1 = _mm256_setzero_pd(), a2 = _mm256_setzero_pd();
    std::int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d gv = _mm256_loadu_pd(g + i);
        a0 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x + i), a0);
        a1 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x + i + 1), a1);
        a2 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x + i + 2), a2);
    }
    double s0 = detail::hadd(a0), s1 = detail::hadd(a1), s2 = detail::hadd(a2);
    for (; i < n; ++i) {
        double gv = g[i];
        s0 += gv * x[i];
        s1 += gv * x[i + 1];
        s2 += gv * x[i + 2];
    }
    out3[0] += s0;
    out3[1] += s1;
    out3[2] += s2;
}

#endif

}  // namespace rtsu::simd

// AVX2 variants. Built with -mavx2 only (no -mfma): each lane performs the
// same mul/add sequence as the scalar reference.

#include "eman/simd/kernels.hpp"

#include <immintrin.h>

#include <cmath>

namespace eman::simd {
namespace {

constexpr std::size_t kLanes = 4;

template <typename VecOp, typename ScalarOp>
inline void binary(const double* a, const double* b, double* out, std::size_t n, VecOp vop, ScalarOp sop) {
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        _mm256_storeu_pd(out + i, vop(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = sop(a[i], b[i]);
}

void add(const double* a, const double* b, double* out, std::size_t n) {
    binary(a, b, out, n, [](__m256d x, __m256d y) { return _mm256_add_pd(x, y); },
           [](double x, double y) { return x + y; });
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
    binary(a, b, out, n, [](__m256d x, __m256d y) { return _mm256_sub_pd(x, y); },
           [](double x, double y) { return x - y; });
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
    binary(a, b, out, n, [](__m256d x, __m256d y) { return _mm256_mul_pd(x, y); },
           [](double x, double y) { return x * y; });
}

void add_scalar(const double* a, double s, double* out, std::size_t n) {
    const __m256d vs = _mm256_set1_pd(s);
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), vs));
    for (; i < n; ++i) out[i] = a[i] + s;
}

void mul_scalar(const double* a, double s, double* out, std::size_t n) {
    const __m256d vs = _mm256_set1_pd(s);
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vs));
    for (; i < n; ++i) out[i] = a[i] * s;
}

void axpby(double alpha, const double* x, double beta, const double* y, double* out, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    const __m256d vb = _mm256_set1_pd(beta);
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        const __m256d lhs = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
        const __m256d rhs = _mm256_mul_pd(vb, _mm256_loadu_pd(y + i));
        _mm256_storeu_pd(out + i, _mm256_add_pd(lhs, rhs));
    }
    for (; i < n; ++i) out[i] = alpha * x[i] + beta * y[i];
}

void relu(const double* x, double* out, std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    // max_pd returns the second operand unless the first is strictly greater,
    // matching `x > 0 ? x : 0` for -0.0 and NaN.
    for (; i + kLanes <= n; i += kLanes) _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
    for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(const double* x, const double* g, double* out, std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
        _mm256_storeu_pd(out + i, _mm256_and_pd(mask, _mm256_loadu_pd(g + i)));
    }
    for (; i < n; ++i) out[i] = x[i] > 0.0 ? g[i] : 0.0;
}

void rsqrt(const double* x, double* out, std::size_t n) {
    const __m256d one = _mm256_set1_pd(1.0);
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        _mm256_storeu_pd(out + i, _mm256_div_pd(one, _mm256_sqrt_pd(_mm256_loadu_pd(x + i))));
    }
    for (; i < n; ++i) out[i] = 1.0 / std::sqrt(x[i]);
}

inline double hsum(__m256d v) {
    const __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    const __m128d pair = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(pair, _mm_unpackhi_pd(pair, pair)));
}

double sum(const double* x, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 2 * kLanes <= n; i += 2 * kLanes) {
        acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
        acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + kLanes));
    }
    for (; i + kLanes <= n; i += kLanes) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    double total = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) total += x[i];
    return total;
}

double dot(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 2 * kLanes <= n; i += 2 * kLanes) {
        acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
        acc1 = _mm256_add_pd(acc1, _mm256_mul_pd(_mm256_loadu_pd(a + i + kLanes), _mm256_loadu_pd(b + i + kLanes)));
    }
    for (; i + kLanes <= n; i += kLanes) {
        acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    double total = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) total += a[i] * b[i];
    return total;
}

// Accumulates c_row[j0 .. j0+16) over p in order, keeping 4 vectors in
// registers. `a_at(p)` yields the scalar multiplier for step p.
template <typename AAt>
inline void accumulate_block16(AAt a_at, const double* b, std::size_t ldb, std::size_t steps, double* c_row) {
    __m256d c0 = _mm256_setzero_pd();
    __m256d c1 = _mm256_setzero_pd();
    __m256d c2 = _mm256_setzero_pd();
    __m256d c3 = _mm256_setzero_pd();
    for (std::size_t p = 0; p < steps; ++p) {
        const __m256d av = _mm256_set1_pd(a_at(p));
        const double* brow = b + p * ldb;
        c0 = _mm256_add_pd(c0, _mm256_mul_pd(av, _mm256_loadu_pd(brow)));
        c1 = _mm256_add_pd(c1, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 4)));
        c2 = _mm256_add_pd(c2, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 8)));
        c3 = _mm256_add_pd(c3, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 12)));
    }
    _mm256_storeu_pd(c_row, c0);
    _mm256_storeu_pd(c_row + 4, c1);
    _mm256_storeu_pd(c_row + 8, c2);
    _mm256_storeu_pd(c_row + 12, c3);
}

template <typename AAt>
inline void accumulate_block4(AAt a_at, const double* b, std::size_t ldb, std::size_t steps, double* c_row) {
    __m256d c0 = _mm256_setzero_pd();
    for (std::size_t p = 0; p < steps; ++p) {
        c0 = _mm256_add_pd(c0, _mm256_mul_pd(_mm256_set1_pd(a_at(p)), _mm256_loadu_pd(b + p * ldb)));
    }
    _mm256_storeu_pd(c_row, c0);
}

template <typename AAt>
inline void accumulate_row(AAt a_at, const double* b, std::size_t steps, std::size_t m, double* c_row) {
    std::size_t j = 0;
    for (; j + 16 <= m; j += 16) accumulate_block16(a_at, b + j, m, steps, c_row + j);
    for (; j + 4 <= m; j += 4) accumulate_block4(a_at, b + j, m, steps, c_row + j);
    for (; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < steps; ++p) acc = acc + a_at(p) * b[p * m + j];
        c_row[j] = acc;
    }
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        accumulate_row([arow](std::size_t p) { return arow[p]; }, b, k, m, c + i * m);
    }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* acol = a + p;
        accumulate_row([acol, k](std::size_t i) { return acol[i * k]; }, b, n, m, c + p * m);
    }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) c[i * k + p] = dot(a + i * m, b + p * m, m);
    }
}

}  // namespace

const KernelTable& detail::avx2_table() {
    static const KernelTable table{
        Level::avx2, add, sub, mul, add_scalar, mul_scalar, axpby, relu, relu_backward, rsqrt,
        sum, dot, gemm_nn, gemm_tn, gemm_nt,
    };
    return table;
}

}  // namespace eman::simd

#pragma once

#include <cstddef>
#include <string_view>

namespace eman::simd {

enum class Level { scalar, avx2 };

/// Table of double-precision inner-loop kernels.
///
/// Every variant performs the same per-element sequence of IEEE operations on
/// the elementwise and GEMM paths (`add` .. `rsqrt`, `gemm_nn`, `gemm_tn`), so
/// those results are bit-identical across levels. `sum`, `dot` and `gemm_nt`
/// are reductions whose summation order differs between levels.
///
/// Outputs may alias any input of elementwise kernels. GEMM outputs must
/// not alias their inputs.
struct KernelTable {
    Level level;

    void (*add)(const double* a, const double* b, double* out, std::size_t n);
    void (*sub)(const double* a, const double* b, double* out, std::size_t n);
    void (*mul)(const double* a, const double* b, double* out, std::size_t n);
    void (*add_scalar)(const double* a, double s, double* out, std::size_t n);
    void (*mul_scalar)(const double* a, double s, double* out, std::size_t n);
    // out = alpha * x + beta * y
    void (*axpby)(double alpha, const double* x, double beta, const double* y, double* out, std::size_t n);
    void (*relu)(const double* x, double* out, std::size_t n);
    // out = g where x > 0, else 0
    void (*relu_backward)(const double* x, const double* g, double* out, std::size_t n);
    // out = 1 / sqrt(x)
    void (*rsqrt)(const double* x, double* out, std::size_t n);

    double (*sum)(const double* x, std::size_t n);
    double (*dot)(const double* a, const double* b, std::size_t n);

    // c[n,m] = a[n,k] * b[k,m]
    void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m);
    // c[k,m] = a[n,k]^T * b[n,m]
    void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m);
    // c[n,k] = a[n,m] * b[k,m]^T
    void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m);
};

/// Active kernel table. Chosen on first use from CPU features, overridable with
/// the EMAN_SIMD environment variable (`scalar`, `avx2`, `auto`).
const KernelTable& kernels();

bool supported(Level level);

/// Throws std::invalid_argument when `level` is not available on this host.
const KernelTable& kernels_for(Level level);

void set_level(Level level);
Level active_level();

std::string_view to_string(Level level);
Level parse_level(std::string_view name);

namespace detail {
const KernelTable& scalar_table();
#if defined(EMAN_HAVE_AVX2)
const KernelTable& avx2_table();
#endif
}  // namespace detail

}  // namespace eman::simd

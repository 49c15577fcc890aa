#include "fomox/kernels.hpp"

#include <cstring>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace fomox::kernels {

namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelThreshold = 1 << 15;

bool go_parallel(std::size_t work) {
#if defined(_OPENMP)
    return work >= kParallelThreshold && omp_get_max_threads() > 1 && !omp_in_parallel();
#else
    (void)work;
    return false;
#endif
}

} // namespace

void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

namespace {

// ikj order: streams rows of b, accumulates into row i of c in ascending-k
// order, matching the serial reference bitwise.
void matmul_row_range(const double* a, const double* b, double* c,
                      std::size_t i0, std::size_t i1, std::size_t k, std::size_t n) {
    for (std::size_t i = i0; i < i1; ++i) {
        double* ci = c + i * n;
        std::memset(ci, 0, n * sizeof(double));
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += aip * bp[j];
            }
        }
    }
}

} // namespace

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
    if (go_parallel(m * k * n)) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(m); ++i) {
            matmul_row_range(a, b, c, static_cast<std::size_t>(i),
                             static_cast<std::size_t>(i) + 1, k, n);
        }
#endif
        return;
    }
    matmul_row_range(a, b, c, 0, m, k, n);
}

void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            const double* ai = a + i * k;
            const double* bj = b + j * k;
            for (std::size_t p = 0; p < k; ++p) {
                acc += ai[p] * bj[p];
            }
            c[i * n + j] = acc;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    if (go_parallel(m * k * n)) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(m); ++i) {
            const double* ai = a + static_cast<std::size_t>(i) * k;
            double* ci = c + static_cast<std::size_t>(i) * n;
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                const double* bj = b + j * k;
                for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
                ci[j] = acc;
            }
        }
#endif
        return;
    }
    matmul_nt_serial(a, b, c, m, k, n);
}

void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    std::memset(c, 0, k * n * sizeof(double));
    for (std::size_t r = 0; r < m; ++r) {
        const double* ar = a + r * k;
        const double* br = b + r * n;
        for (std::size_t i = 0; i < k; ++i) {
            const double ari = ar[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += ari * br[j];
            }
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    if (go_parallel(m * k * n)) {
#if defined(_OPENMP)
        // Each thread owns a block of c rows (columns of a); the r loop stays
        // innermost-ordered so per-element accumulation order is unchanged.
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(k); ++i) {
            double* ci = c + static_cast<std::size_t>(i) * n;
            std::memset(ci, 0, n * sizeof(double));
            for (std::size_t r = 0; r < m; ++r) {
                const double ari = a[r * k + static_cast<std::size_t>(i)];
                const double* br = b + r * n;
                for (std::size_t j = 0; j < n; ++j) {
                    ci[j] += ari * br[j];
                }
            }
        }
#endif
        return;
    }
    matmul_tn_serial(a, b, c, m, k, n);
}

} // namespace fomox::kernels

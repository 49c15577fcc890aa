#pragma once

#include <cstddef>

// Dense f64 kernels. Every parallel variant partitions work over output
// elements only; the summation order per element is fixed (ascending k),
// so results are bitwise identical to the serial reference at any thread
// count. All matrices are row-major.
namespace fomox::kernels {

// Serial reference: canonical triple loop. Kept as the oracle for the
// parallel kernels and as the benchmark baseline.
void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);

// c[m x n] = a[m x k] * b[k x n], OpenMP over rows of c.
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);

// c[m x n] = a[m x k] * b[n x k]^T (b stored row-major, used transposed).
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);

// c[k x n] = a[m x k]^T * b[m x n] (a stored row-major, used transposed).
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);

} // namespace fomox::kernels

// Dense matrix kernels. Each kernel ships in two forms: a serial
// reference and an OpenMP-parallel version. Both compute every output
// element with the same fixed-order inner loop, so their results are
// bitwise identical; tests compare them and sermtl_bench times them.

#pragma once

#include <cstddef>
#include <functional>

namespace sermtl::kernels {

// C[m,n] = A[m,k] * B[k,n]
void matmul_serial(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n);
void matmul_omp(const double* a, const double* b, double* c, std::size_t m,
                std::size_t k, std::size_t n);

// C[m,n] = A[m,k] * B[n,k]^T
void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_nt_omp(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n);

// C[m,n] = A[k,m]^T * B[k,n]
void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_tn_omp(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n);

// Dispatchers: pick the OpenMP kernel when the product is large enough
// to amortize the fork, otherwise the serial one. Output is identical
// either way.
void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);

// Runs fn(0..n-1), possibly across OpenMP threads. Each index must
// touch disjoint state; iteration order is unspecified.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

int max_threads();

}  // namespace sermtl::kernels

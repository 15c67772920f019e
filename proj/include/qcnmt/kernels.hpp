#pragma once

#include <cstddef>

namespace qcnmt::kernels {

// Raw compute kernels behind the tensor ops. Each kernel comes in a serial
// reference version and an OpenMP version. Every output element is produced
// by exactly one thread with a fixed-order inner loop, so the parallel
// results are bitwise identical to the serial ones for any thread count.
// dispatch picks the parallel path when it is compiled in, enabled, and the
// problem is large enough to pay for the fork.

bool parallel_enabled();
void set_parallel_enabled(bool on);
int max_threads();

// C[b] (+)= op(A[b]) * op(B[b]), logical A m-by-k, B k-by-n, C m-by-n.
// trans_a/trans_b flip the storage interpretation of A/B. A stride of 0
// reuses the same matrix for every batch entry.
void matmul_serial(const double* a, const double* b, double* c, int batch, int m, int k, int n,
                   bool trans_a, bool trans_b, std::ptrdiff_t stride_a, std::ptrdiff_t stride_b,
                   std::ptrdiff_t stride_c, bool accumulate);
void matmul_omp(const double* a, const double* b, double* c, int batch, int m, int k, int n,
                bool trans_a, bool trans_b, std::ptrdiff_t stride_a, std::ptrdiff_t stride_b,
                std::ptrdiff_t stride_c, bool accumulate);
void matmul(const double* a, const double* b, double* c, int batch, int m, int k, int n,
            bool trans_a, bool trans_b, std::ptrdiff_t stride_a, std::ptrdiff_t stride_b,
            std::ptrdiff_t stride_c, bool accumulate);

// Row-wise softmax with max subtraction, y may alias x.
void softmax_rows_serial(const double* x, double* y, std::size_t rows, std::size_t cols);
void softmax_rows_omp(const double* x, double* y, std::size_t rows, std::size_t cols);
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);

// Element-wise y[i] = f(x[i]); instantiated in kernels.cpp for the ops that
// need it. Serial below this many elements.
inline constexpr std::size_t kMapGrain = 16384;

void tanh_map(const double* x, double* y, std::size_t n);
void relu_map(const double* x, double* y, std::size_t n);
void sqrt_map(const double* x, double* y, std::size_t n);
void scale_map(const double* x, double* y, std::size_t n, double s);
void add_map(const double* a, const double* b, double* y, std::size_t n);
void mul_map(const double* a, const double* b, double* y, std::size_t n);

}  // namespace qcnmt::kernels

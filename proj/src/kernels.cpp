#include "qcnmt/kernels.hpp"

#include <atomic>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qcnmt::kernels {

namespace {

std::atomic<bool> g_parallel{true};

// One output element per (b, i, j); k loop stays in-order so parallel and
// serial results match bitwise.
template <bool TransA, bool TransB>
inline double dot_row_col(const double* a, const double* b, int i, int j, int m, int k, int n) {
  double acc = 0.0;
  for (int kk = 0; kk < k; ++kk) {
    const double av = TransA ? a[static_cast<std::ptrdiff_t>(kk) * m + i]
                             : a[static_cast<std::ptrdiff_t>(i) * k + kk];
    const double bv = TransB ? b[static_cast<std::ptrdiff_t>(j) * k + kk]
                             : b[static_cast<std::ptrdiff_t>(kk) * n + j];
    acc += av * bv;
  }
  return acc;
}

template <bool TransA, bool TransB>
void matmul_loop(const double* a, const double* b, double* c, int batch, int m, int k, int n,
                 std::ptrdiff_t stride_a, std::ptrdiff_t stride_b, std::ptrdiff_t stride_c,
                 bool accumulate, bool parallel) {
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(batch) * m;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
  for (std::ptrdiff_t row = 0; row < rows; ++row) {
    const int bi = static_cast<int>(row / m);
    const int i = static_cast<int>(row % m);
    const double* ab = a + stride_a * bi;
    const double* bb = b + stride_b * bi;
    double* cb = c + stride_c * bi;
    for (int j = 0; j < n; ++j) {
      const double v = dot_row_col<TransA, TransB>(ab, bb, i, j, m, k, n);
      double* out = cb + static_cast<std::ptrdiff_t>(i) * n + j;
      if (accumulate) {
        *out += v;
      } else {
        *out = v;
      }
    }
  }
#ifndef _OPENMP
  (void)parallel;
#endif
}

void matmul_impl(const double* a, const double* b, double* c, int batch, int m, int k, int n,
                 bool trans_a, bool trans_b, std::ptrdiff_t stride_a, std::ptrdiff_t stride_b,
                 std::ptrdiff_t stride_c, bool accumulate, bool parallel) {
  if (trans_a) {
    if (trans_b) {
      matmul_loop<true, true>(a, b, c, batch, m, k, n, stride_a, stride_b, stride_c, accumulate, parallel);
    } else {
      matmul_loop<true, false>(a, b, c, batch, m, k, n, stride_a, stride_b, stride_c, accumulate, parallel);
    }
  } else {
    if (trans_b) {
      matmul_loop<false, true>(a, b, c, batch, m, k, n, stride_a, stride_b, stride_c, accumulate, parallel);
    } else {
      matmul_loop<false, false>(a, b, c, batch, m, k, n, stride_a, stride_b, stride_c, accumulate, parallel);
    }
  }
}

void softmax_rows_impl(const double* x, double* y, std::size_t rows, std::size_t cols, bool parallel) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const double* xr = x + static_cast<std::size_t>(r) * cols;
    double* yr = y + static_cast<std::size_t>(r) * cols;
    double mx = xr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = xr[c] > mx ? xr[c] : mx;
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < cols; ++c) yr[c] *= inv;
  }
#ifndef _OPENMP
  (void)parallel;
#endif
}

template <class F>
void map_impl(double* y, std::size_t n, F&& f) {
  const bool parallel = parallel_enabled() && n >= kMapGrain;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    y[i] = f(static_cast<std::size_t>(i));
  }
#ifndef _OPENMP
  (void)parallel;
#endif
}

}  // namespace

bool parallel_enabled() {
#ifdef _OPENMP
  return g_parallel.load(std::memory_order_relaxed);
#else
  return false;
#endif
}

void set_parallel_enabled(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void matmul_serial(const double* a, const double* b, double* c, int batch, int m, int k, int n,
                   bool trans_a, bool trans_b, std::ptrdiff_t stride_a, std::ptrdiff_t stride_b,
                   std::ptrdiff_t stride_c, bool accumulate) {
  matmul_impl(a, b, c, batch, m, k, n, trans_a, trans_b, stride_a, stride_b, stride_c, accumulate, false);
}

void matmul_omp(const double* a, const double* b, double* c, int batch, int m, int k, int n,
                bool trans_a, bool trans_b, std::ptrdiff_t stride_a, std::ptrdiff_t stride_b,
                std::ptrdiff_t stride_c, bool accumulate) {
  matmul_impl(a, b, c, batch, m, k, n, trans_a, trans_b, stride_a, stride_b, stride_c, accumulate, true);
}

void matmul(const double* a, const double* b, double* c, int batch, int m, int k, int n,
            bool trans_a, bool trans_b, std::ptrdiff_t stride_a, std::ptrdiff_t stride_b,
            std::ptrdiff_t stride_c, bool accumulate) {
  const long long flops = 2LL * batch * m * k * n;
  if (parallel_enabled() && flops >= 1 << 15) {
    matmul_omp(a, b, c, batch, m, k, n, trans_a, trans_b, stride_a, stride_b, stride_c, accumulate);
  } else {
    matmul_serial(a, b, c, batch, m, k, n, trans_a, trans_b, stride_a, stride_b, stride_c, accumulate);
  }
}

void softmax_rows_serial(const double* x, double* y, std::size_t rows, std::size_t cols) {
  softmax_rows_impl(x, y, rows, cols, false);
}

void softmax_rows_omp(const double* x, double* y, std::size_t rows, std::size_t cols) {
  softmax_rows_impl(x, y, rows, cols, true);
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
  const bool parallel = parallel_enabled() && rows * cols >= 4096 && rows > 1;
  softmax_rows_impl(x, y, rows, cols, parallel);
}

void tanh_map(const double* x, double* y, std::size_t n) {
  map_impl(y, n, [x](std::size_t i) { return std::tanh(x[i]); });
}

void relu_map(const double* x, double* y, std::size_t n) {
  map_impl(y, n, [x](std::size_t i) { return x[i] > 0.0 ? x[i] : 0.0; });
}

void sqrt_map(const double* x, double* y, std::size_t n) {
  map_impl(y, n, [x](std::size_t i) { return std::sqrt(x[i]); });
}

void scale_map(const double* x, double* y, std::size_t n, double s) {
  map_impl(y, n, [x, s](std::size_t i) { return x[i] * s; });
}

void add_map(const double* a, const double* b, double* y, std::size_t n) {
  map_impl(y, n, [a, b](std::size_t i) { return a[i] + b[i]; });
}

void mul_map(const double* a, const double* b, double* y, std::size_t n) {
  map_impl(y, n, [a, b](std::size_t i) { return a[i] * b[i]; });
}

}  // namespace qcnmt::kernels

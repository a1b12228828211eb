// SPDX-License-Identifier: Apache-2.0
#include "fsq/kernels.hpp"

#include <omp.h>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

#include <algorithm>
#include <memory>
#include <cmath>
#include <vector>

namespace fsq::kernels {
namespace {

#if defined(__AVX512F__)
constexpr std::size_t kRowBlock = 8;
constexpr std::size_t kColPanel = 16;
#else
constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColPanel = 8;
#endif
// Fewer rows than this go through the unpacked row-axpy path.
constexpr std::size_t kSmallRows = 4;
// k-slice depth: a 256 x 16 panel slice is 32 KiB.
constexpr std::size_t kDepthSlice = 256;
// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 16;

bool go_parallel(std::size_t work) { return work >= kParallelWork && !omp_in_parallel(); }

double apply(Unary op, double v) {
  switch (op) {
    case Unary::tanh:
      return std::tanh(v);
    case Unary::sigmoid:
      return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    case Unary::exp:
      return std::exp(v);
    case Unary::log:
      return std::log(v);
  }
  return v;
}

// Panels first.. of B packed as k x kColPanel blocks, zero padded.
using PackedPanels = std::unique_ptr<double[]>;

PackedPanels pack_panels(const double* b, std::size_t n, std::size_t k, bool trans_b,
                         std::size_t first) {
  const std::size_t panels = (n + kColPanel - 1) / kColPanel;
  PackedPanels packed(new double[(panels - first) * k * kColPanel]);
  for (std::size_t q = first; q < panels; ++q) {
    double* dst = packed.get() + (q - first) * k * kColPanel;
    const std::size_t j0 = q * kColPanel;
    const std::size_t w = std::min(kColPanel, n - j0);
    if (trans_b) {
      for (std::size_t jj = 0; jj < w; ++jj) {
        const double* src = b + (j0 + jj) * k;
        for (std::size_t p = 0; p < k; ++p) dst[p * kColPanel + jj] = src[p];
      }
    } else {
      for (std::size_t p = 0; p < k; ++p)
        std::copy_n(b + p * n + j0, w, dst + p * kColPanel);
    }
    if (w < kColPanel)
      for (std::size_t p = 0; p < k; ++p)
        std::fill(dst + p * kColPanel + w, dst + (p + 1) * kColPanel, 0.0);
  }
  return packed;
}

// Accumulates a k-slice into a kRowBlock x kColPanel tile of C. `first`
// starts from zero; later slices continue from the partial sums already
// stored in C, so the per-element sequence of multiply-adds is the same as
// an unsliced loop.
void block_tile(const double* a, std::size_t lda, const double* panel, std::size_t ldb,
                std::size_t k, double* c, std::size_t ldc, std::size_t width, bool first) {
  alignas(64) double acc[kRowBlock][kColPanel] = {};
  if (!first)
    for (std::size_t r = 0; r < kRowBlock; ++r)
      for (std::size_t jj = 0; jj < width; ++jj) acc[r][jj] = c[r * ldc + jj];
#if defined(__AVX512F__)
  __m512d lo[kRowBlock], hi[kRowBlock];
  for (std::size_t r = 0; r < kRowBlock; ++r) {
    lo[r] = _mm512_load_pd(acc[r]);
    hi[r] = _mm512_load_pd(acc[r] + 8);
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m512d b0 = _mm512_loadu_pd(panel + p * ldb);
    const __m512d b1 = _mm512_loadu_pd(panel + p * ldb + 8);
    for (std::size_t r = 0; r < kRowBlock; ++r) {
      const __m512d av = _mm512_set1_pd(a[r * lda + p]);
      lo[r] = _mm512_fmadd_pd(av, b0, lo[r]);
      hi[r] = _mm512_fmadd_pd(av, b1, hi[r]);
    }
  }
  for (std::size_t r = 0; r < kRowBlock; ++r) {
    _mm512_store_pd(acc[r], lo[r]);
    _mm512_store_pd(acc[r] + 8, hi[r]);
  }
#elif defined(__AVX2__) && defined(__FMA__)
  __m256d c00 = _mm256_load_pd(acc[0]), c01 = _mm256_load_pd(acc[0] + 4);
  __m256d c10 = _mm256_load_pd(acc[1]), c11 = _mm256_load_pd(acc[1] + 4);
  __m256d c20 = _mm256_load_pd(acc[2]), c21 = _mm256_load_pd(acc[2] + 4);
  __m256d c30 = _mm256_load_pd(acc[3]), c31 = _mm256_load_pd(acc[3] + 4);
  const double* a0 = a;
  const double* a1 = a + lda;
  const double* a2 = a + 2 * lda;
  const double* a3 = a + 3 * lda;
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(panel + p * ldb);
    const __m256d b1 = _mm256_loadu_pd(panel + p * ldb + 4);
    __m256d av = _mm256_broadcast_sd(a0 + p);
    c00 = _mm256_fmadd_pd(av, b0, c00);
    c01 = _mm256_fmadd_pd(av, b1, c01);
    av = _mm256_broadcast_sd(a1 + p);
    c10 = _mm256_fmadd_pd(av, b0, c10);
    c11 = _mm256_fmadd_pd(av, b1, c11);
    av = _mm256_broadcast_sd(a2 + p);
    c20 = _mm256_fmadd_pd(av, b0, c20);
    c21 = _mm256_fmadd_pd(av, b1, c21);
    av = _mm256_broadcast_sd(a3 + p);
    c30 = _mm256_fmadd_pd(av, b0, c30);
    c31 = _mm256_fmadd_pd(av, b1, c31);
  }
  _mm256_store_pd(acc[0], c00);
  _mm256_store_pd(acc[0] + 4, c01);
  _mm256_store_pd(acc[1], c10);
  _mm256_store_pd(acc[1] + 4, c11);
  _mm256_store_pd(acc[2], c20);
  _mm256_store_pd(acc[2] + 4, c21);
  _mm256_store_pd(acc[3], c30);
  _mm256_store_pd(acc[3] + 4, c31);
#else
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = panel + p * ldb;
    for (std::size_t r = 0; r < kRowBlock; ++r) {
      const double av = a[r * lda + p];
      for (std::size_t jj = 0; jj < kColPanel; ++jj) acc[r][jj] = madd(av, bp[jj], acc[r][jj]);
    }
  }
#endif
  for (std::size_t r = 0; r < kRowBlock; ++r)
    for (std::size_t jj = 0; jj < width; ++jj) c[r * ldc + jj] = acc[r][jj];
}

void block_row(const double* a, const double* panel, std::size_t ldb, std::size_t k, double* c,
               std::size_t width, bool first) {
  double acc[kColPanel] = {};
  if (!first)
    for (std::size_t jj = 0; jj < width; ++jj) acc[jj] = c[jj];
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = panel + p * ldb;
    const double av = a[p];
    for (std::size_t jj = 0; jj < kColPanel; ++jj) acc[jj] = madd(av, bp[jj], acc[jj]);
  }
  for (std::size_t jj = 0; jj < width; ++jj) c[jj] = acc[jj];
}

// Column panels of B: either read in place (row-major B, full panels) or
// from a packed k x kColPanel copy.
struct Panels {
  const double* b = nullptr;      // in-place source, row stride n
  const double* packed = nullptr;  // packed panels, stride kColPanel
  std::size_t first_packed = 0;    // panels before this index are read in place

  const double* at(std::size_t q, std::size_t p0, std::size_t n, std::size_t k,
                   std::size_t& ldb) const {
    if (q < first_packed) {
      ldb = n;
      return b + p0 * n + q * kColPanel;
    }
    ldb = kColPanel;
    return packed + (q - first_packed) * k * kColPanel + p0 * kColPanel;
  }
};

// Rows [i_begin, i_end) of C, sliced along k so a panel slice stays in L1.
void gemm_rows(const double* a, const Panels& panels_of_b, double* c, std::size_t n,
               std::size_t k, std::size_t i_begin, std::size_t i_end) {
  const std::size_t panels = (n + kColPanel - 1) / kColPanel;
  for (std::size_t p0 = 0; p0 < k; p0 += kDepthSlice) {
    const std::size_t kc = std::min(kDepthSlice, k - p0);
    for (std::size_t q = 0; q < panels; ++q) {
      std::size_t ldb = 0;
      const double* panel = panels_of_b.at(q, p0, n, k, ldb);
      const std::size_t j0 = q * kColPanel;
      const std::size_t width = std::min(kColPanel, n - j0);
      std::size_t i = i_begin;
      for (; i + kRowBlock <= i_end; i += kRowBlock)
        block_tile(a + i * k + p0, k, panel, ldb, kc, c + i * n + j0, n, width, p0 == 0);
      for (; i < i_end; ++i)
        block_row(a + i * k + p0, panel, ldb, kc, c + i * n + j0, width, p0 == 0);
    }
  }
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) { omp_set_num_threads(std::max(1, n)); }

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
            std::size_t k, bool trans_a, bool trans_b) {
  if (k == 0) {
    std::fill(c, c + m * n, 0.0);
    return;
  }
  std::vector<double> a_rows;
  if (trans_a) {
    a_rows.resize(m * k);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) a_rows[i * k + p] = a[p * m + i];
    a = a_rows.data();
  }

  // Few rows: accumulate whole rows of B in place; no packing needed.
  if (m < kSmallRows && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      std::fill(ci, ci + n, 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] = madd(av, bp[j], ci[j]);
      }
    }
    return;
  }

  // Row-major B is read in place except for a partial last panel.
  const std::size_t first_packed = trans_b ? 0 : n / kColPanel;
  const PackedPanels packed = pack_panels(b, n, k, trans_b, first_packed);
  const Panels panels{b, packed.get(), first_packed};
  const std::size_t row_blocks = (m + kRowBlock - 1) / kRowBlock;
  if (!go_parallel(m * n * k)) {
    gemm_rows(a, panels, c, n, k, 0, m);
    return;
  }
#pragma omp parallel
  {
    // Contiguous runs of whole row blocks per thread.
    const std::size_t threads = static_cast<std::size_t>(omp_get_num_threads());
    const std::size_t t = static_cast<std::size_t>(omp_get_thread_num());
    const std::size_t b0 = row_blocks * t / threads, b1 = row_blocks * (t + 1) / threads;
    gemm_rows(a, panels, c, n, k, b0 * kRowBlock, std::min(m, b1 * kRowBlock));
  }
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
  const std::ptrdiff_t nr = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (go_parallel(rows * cols * 16))
  for (std::ptrdiff_t r = 0; r < nr; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    double mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < cols; ++j) yr[j] /= sum;
  }
}

void squared_distances(const double* queries, std::size_t nq, const double* points,
                       std::size_t np, std::size_t dim, double* out) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(nq);
#pragma omp parallel for schedule(static) if (go_parallel(nq * np * dim))
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double* q = queries + i * dim;
    for (std::size_t j = 0; j < np; ++j) {
      const double* p = points + j * dim;
      double acc = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = q[d] - p[d];
        acc = madd(diff, diff, acc);
      }
      out[i * np + j] = acc;
    }
  }
}

void unary(Unary op, const double* x, double* y, std::size_t n) {
  const std::ptrdiff_t nn = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (go_parallel(n * 32))
  for (std::ptrdiff_t i = 0; i < nn; ++i) y[i] = apply(op, x[i]);
}

namespace serial {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
            std::size_t k, bool trans_a, bool trans_b) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc = madd(av, bv, acc);
      }
      c[i * n + j] = acc;
    }
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = x[r * cols];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[r * cols + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[r * cols + j] = std::exp(x[r * cols + j] - mx);
      sum += y[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] /= sum;
  }
}

void squared_distances(const double* queries, std::size_t nq, const double* points,
                       std::size_t np, std::size_t dim, double* out) {
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < np; ++j) {
      double acc = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = queries[i * dim + d] - points[j * dim + d];
        acc = madd(diff, diff, acc);
      }
      out[i * np + j] = acc;
    }
}

void unary(Unary op, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = apply(op, x[i]);
}

}  // namespace serial
}  // namespace fsq::kernels

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>

namespace fsq::kernels {

/// Multiply-accumulate used by every accumulation loop in the kernels, so
/// that blocked, remainder and reference paths round identically.
inline double madd(double a, double b, double acc) {
#if defined(__FMA__)
  return std::fma(a, b, acc);
#else
  return a * b + acc;
#endif
}

/// C (m x n) = op(A) * op(B), C overwritten.
///
/// A is m x k (k x m when trans_a), B is k x n (n x k when trans_b), all
/// row-major. Rows of C are split across OpenMP threads in blocks of four,
/// and every element is accumulated in ascending k order starting from zero,
/// so the result is bitwise independent of the thread count.
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
            std::size_t k, bool trans_a, bool trans_b);

/// Row-wise numerically stable softmax; x and y may alias.
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);

/// out[i * np + j] = sum_d (q_i[d] - p_j[d])^2, accumulated in d order.
void squared_distances(const double* queries, std::size_t nq, const double* points,
                       std::size_t np, std::size_t dim, double* out);

/// Elementwise kernels over n values.
enum class Unary { tanh, sigmoid, exp, log };
void unary(Unary op, const double* x, double* y, std::size_t n);

/// Threads used by kernels outside of an enclosing parallel region.
int max_threads();
void set_threads(int n);

/// Straightforward loop implementations kept as the reference that the
/// parallel kernels are tested and benchmarked against.
namespace serial {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
            std::size_t k, bool trans_a, bool trans_b);
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);
void squared_distances(const double* queries, std::size_t nq, const double* points,
                       std::size_t np, std::size_t dim, double* out);
void unary(Unary op, const double* x, double* y, std::size_t n);

}  // namespace serial

}  // namespace fsq::kernels

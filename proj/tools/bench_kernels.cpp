// SPDX-License-Identifier: Apache-2.0
// Parallel kernels vs. their serial reference on the shapes the model uses.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "fsq/kernels.hpp"

namespace {

std::vector<double> random_values(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <bool Serial>
void BM_Matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const bool trans_b = state.range(3) != 0;
  auto a = random_values(m * k, 1);
  auto b = random_values(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Serial)
      fsq::kernels::serial::matmul(a.data(), b.data(), c.data(), m, n, k, false, trans_b);
    else
      fsq::kernels::matmul(a.data(), b.data(), c.data(), m, n, k, false, trans_b);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GMAC/s"] = benchmark::Counter(
      static_cast<double>(m * n * k) * static_cast<double>(state.iterations()) / 1e9,
      benchmark::Counter::kIsRate);
}

// (rows, inner, cols, transposed B): GRU input projection, recurrent step,
// attention scores, head layer, and the head's input-gradient product.
void MatmulShapes(benchmark::internal::Benchmark* b) {
  b->Args({200, 256, 128, 0})
      ->Args({25, 128, 128, 0})
      ->Args({200, 256, 100, 1})
      ->Args({25, 768, 256, 0})
      ->Args({25, 256, 768, 1})
      ->Args({1, 128, 128, 0});
}

BENCHMARK(BM_Matmul<false>)->Apply(MatmulShapes);
BENCHMARK(BM_Matmul<true>)->Apply(MatmulShapes);

template <bool Serial>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto cols = static_cast<std::size_t>(state.range(1));
  auto x = random_values(rows * cols, 3);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    if constexpr (Serial)
      fsq::kernels::serial::softmax_rows(x.data(), y.data(), rows, cols);
    else
      fsq::kernels::softmax_rows(x.data(), y.data(), rows, cols);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_Softmax<false>)->Args({75, 144})->Args({3000, 20});
BENCHMARK(BM_Softmax<true>)->Args({75, 144})->Args({3000, 20});

template <bool Serial>
void BM_Distances(benchmark::State& state) {
  const auto nq = static_cast<std::size_t>(state.range(0));
  const auto np = static_cast<std::size_t>(state.range(1));
  const std::size_t dim = 768;
  auto q = random_values(nq * dim, 4);
  auto p = random_values(np * dim, 5);
  std::vector<double> out(nq * np);
  for (auto _ : state) {
    if constexpr (Serial)
      fsq::kernels::serial::squared_distances(q.data(), nq, p.data(), np, dim, out.data());
    else
      fsq::kernels::squared_distances(q.data(), nq, p.data(), np, dim, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_Distances<false>)->Args({75, 25})->Args({200, 150});
BENCHMARK(BM_Distances<true>)->Args({75, 25})->Args({200, 150});

}  // namespace

BENCHMARK_MAIN();

// Serial reference vs OpenMP kernels on shapes seen in training and metrics.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "muda/kernels.hpp"

namespace {

muda::Matrix random(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  muda::Matrix m(rows, cols);
  for (double& v : m.data()) v = u(rng);
  return m;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random(n, 64, 1), b = random(64, 64, 2);
  for (auto _ : state) {
    auto c = Parallel ? muda::kernels::matmul(a, b) : muda::kernels::serial::matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * 64 * 64));
}

template <bool Parallel>
void BM_Gram(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random(n, 16, 3);
  for (auto _ : state) {
    auto g = Parallel ? muda::kernels::gram(x) : muda::kernels::serial::gram(x);
    benchmark::DoNotOptimize(g.data().data());
  }
}

template <bool Parallel>
void BM_NearestCentroid(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto points = random(n, 16, 4), centroids = random(10, 16, 5);
  std::vector<double> d;
  for (auto _ : state) {
    auto ids = Parallel ? muda::kernels::nearest_centroid(points, centroids, d)
                        : muda::kernels::serial::nearest_centroid(points, centroids, d);
    benchmark::DoNotOptimize(ids.data());
  }
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Arg(256)->Arg(4096);
BENCHMARK(BM_Matmul<true>)->Arg(256)->Arg(4096);
BENCHMARK(BM_Gram<false>)->Arg(512)->Arg(8192);
BENCHMARK(BM_Gram<true>)->Arg(512)->Arg(8192);
BENCHMARK(BM_NearestCentroid<false>)->Arg(1024)->Arg(16384);
BENCHMARK(BM_NearestCentroid<true>)->Arg(1024)->Arg(16384);

BENCHMARK_MAIN();

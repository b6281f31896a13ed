#include <benchmark/benchmark.h>

#include <vector>

#include "caft/kernels.hpp"
#include "caft/rng.hpp"

namespace {

using Gemm = void (*)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);

struct Operands {
  std::vector<double> a, b, c;
};

Operands operands(std::size_t m, std::size_t n, std::size_t k) {
  caft::Rng rng(1);
  Operands o{std::vector<double>(m * k), std::vector<double>(k * n), std::vector<double>(m * n)};
  for (auto& v : o.a) v = rng.normal();
  for (auto& v : o.b) v = rng.normal();
  return o;
}

// Square product of side state.range(0).
template <Gemm F>
void square(benchmark::State& state) {
  const auto s = static_cast<std::size_t>(state.range(0));
  Operands o = operands(s, s, s);
  for (auto _ : state) {
    F(s, s, s, o.a.data(), o.b.data(), o.c.data());
    benchmark::DoNotOptimize(o.c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * s * s * s));
}

// Token projection shape: rows x 64 by 64 x 256.
template <Gemm F>
void projection(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  Operands o = operands(m, 256, 64);
  for (auto _ : state) {
    F(m, 256, 64, o.a.data(), o.b.data(), o.c.data());
    benchmark::DoNotOptimize(o.c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * m * 256 * 64));
}

template <void (*F)(std::size_t, std::size_t, double*)>
void softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  caft::Rng rng(2);
  std::vector<double> x(rows * 64);
  for (auto& v : x) v = rng.normal();
  for (auto _ : state) {
    std::vector<double> y = x;
    F(rows, 64, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(square<caft::kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(square<caft::kernels::omp::gemm_nn>)->Name("gemm_nn/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(square<caft::kernels::serial::gemm_nt>)->Name("gemm_nt/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(square<caft::kernels::omp::gemm_nt>)->Name("gemm_nt/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(square<caft::kernels::serial::gemm_tn>)->Name("gemm_tn/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(square<caft::kernels::omp::gemm_tn>)->Name("gemm_tn/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(projection<caft::kernels::serial::gemm_nn>)->Name("projection/serial")->Arg(256)->Arg(1024);
BENCHMARK(projection<caft::kernels::omp::gemm_nn>)->Name("projection/omp")->Arg(256)->Arg(1024);
BENCHMARK(softmax<caft::kernels::serial::softmax_rows>)->Name("softmax/serial")->Arg(1024);
BENCHMARK(softmax<caft::kernels::omp::softmax_rows>)->Name("softmax/omp")->Arg(1024);

BENCHMARK_MAIN();

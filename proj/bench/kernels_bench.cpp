// Parallel kernels against their serial reference versions.
// Thread count follows OMP_NUM_THREADS / SENFORMER_THREADS.

#include <benchmark/benchmark.h>

#include <cstdlib>
#include <vector>

#include "senformer/kernels.hpp"
#include "senformer/rng.hpp"

namespace {

using senf::kernels::gemm;

std::vector<float> random_vector(std::size_t n, std::uint64_t seed) {
  senf::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

void BM_GemmParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vector(n * n, 1), b = random_vector(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    gemm(false, false, n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

void BM_GemmReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vector(n * n, 1), b = random_vector(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    senf::kernels::reference::gemm(false, false, n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

struct ConvShape {
  std::size_t in_c, out_c, side, kernel = 3, stride = 1, pad = 1;
  std::size_t out_side() const { return (side + 2 * pad - kernel) / stride + 1; }
};

ConvShape conv_shape(const benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  return {c, c, static_cast<std::size_t>(state.range(1))};
}

// im2col + gemm, the path taken by the conv2d operator.
void BM_ConvParallel(benchmark::State& state) {
  const ConvShape s = conv_shape(state);
  const std::size_t o = s.out_side(), rows = s.in_c * s.kernel * s.kernel;
  const auto image = random_vector(s.in_c * s.side * s.side, 3);
  const auto weight = random_vector(s.out_c * rows, 4);
  std::vector<float> col(rows * o * o), out(s.out_c * o * o);
  for (auto _ : state) {
    senf::kernels::im2col(image.data(), s.in_c, s.side, s.side, s.kernel, s.stride, s.pad, o, o, col.data());
    gemm(false, false, s.out_c, o * o, rows, weight.data(), col.data(), out.data(), false);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_ConvReference(benchmark::State& state) {
  const ConvShape s = conv_shape(state);
  const std::size_t o = s.out_side(), rows = s.in_c * s.kernel * s.kernel;
  const auto image = random_vector(s.in_c * s.side * s.side, 3);
  const auto weight = random_vector(s.out_c * rows, 4);
  std::vector<float> out(s.out_c * o * o);
  for (auto _ : state) {
    senf::kernels::reference::conv2d(image.data(), s.in_c, s.side, s.side, weight.data(), static_cast<const float*>(nullptr),
                                     s.out_c, s.kernel, s.stride, s.pad, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_GemmParallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_GemmReference)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_ConvParallel)->Args({16, 32})->Args({32, 16})->Args({64, 8});
BENCHMARK(BM_ConvReference)->Args({16, 32})->Args({32, 16})->Args({64, 8});

int main(int argc, char** argv) {
  if (const char* env = std::getenv("SENFORMER_THREADS")) senf::kernels::set_threads(std::atoi(env));
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}

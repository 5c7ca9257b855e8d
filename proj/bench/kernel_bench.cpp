// Parallel kernels against their serial reference at model-sized shapes.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "distill_span/kernels.hpp"

namespace k = distill_span::kernels;

namespace {

std::vector<float> random_values(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Rows of a 100-window batch at length 74 times a square projection.
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const std::size_t m = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1)),
                    kk = n;
  const auto a = random_values(m * kk, 1), b = random_values(kk * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::gemm<float>(k::Trans::no, k::Trans::no, m, n, kk, 1.f, a.data(), kk, b.data(), n, 0.f, c.data(), n);
    else
      k::serial::gemm<float>(k::Trans::no, k::Trans::no, m, n, kk, 1.f, a.data(), kk, b.data(), n, 0.f,
                             c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * double(m * n * kk), benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_DepthwiseConv(benchmark::State& state) {
  const std::size_t batch = 100, len = 394, ch = 768, ks = static_cast<std::size_t>(state.range(0));
  const auto x = random_values(batch * len * ch, 3), w = random_values(ks * ch, 4);
  std::vector<float> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::depthwise_conv1d<float>(batch, len, ch, ks, x.data(), w.data(), y.data());
    else
      k::serial::depthwise_conv1d<float>(batch, len, ch, ks, x.data(), w.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const std::size_t rows = 4 * 394 * 16, cols = 394;
  const auto x = random_values(rows * cols, 5);
  std::vector<std::uint8_t> mask(cols, 1);
  for (std::size_t i = 300; i < cols; ++i) mask[i] = 0;
  std::vector<float> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::softmax_rows<float>(rows, cols, x.data(), mask, y.data());
    else
      k::serial::softmax_rows<float>(rows, cols, x.data(), mask, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
  const std::size_t rows = 100 * 394, cols = 128;
  const auto x = random_values(rows * cols, 6), g = random_values(cols, 7), b = random_values(cols, 8);
  std::vector<float> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::layer_norm_rows<float>(rows, cols, x.data(), g.data(), b.data(), 1e-12f, y.data(), nullptr, nullptr);
    else
      k::serial::layer_norm_rows<float>(rows, cols, x.data(), g.data(), b.data(), 1e-12f, y.data(), nullptr,
                                        nullptr);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Args({7400, 128})->Args({1024, 768});
BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Args({7400, 128})->Args({1024, 768});
BENCHMARK(BM_DepthwiseConv<true>)->Name("depthwise_conv/parallel")->Arg(3)->Arg(7);
BENCHMARK(BM_DepthwiseConv<false>)->Name("depthwise_conv/serial")->Arg(3)->Arg(7);
BENCHMARK(BM_Softmax<true>)->Name("softmax/parallel");
BENCHMARK(BM_Softmax<false>)->Name("softmax/serial");
BENCHMARK(BM_LayerNorm<true>)->Name("layer_norm/parallel");
BENCHMARK(BM_LayerNorm<false>)->Name("layer_norm/serial");

BENCHMARK_MAIN();

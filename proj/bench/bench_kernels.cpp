// Serial reference vs OpenMP kernels on the shapes the desk world model and
// denoiser actually run.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "scma/kernels.hpp"

namespace k = scma::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto kk = static_cast<std::size_t>(state.range(1));
    const auto n = static_cast<std::size_t>(state.range(2));
    const auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2);
    std::vector<double> c(m * n);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::matmul(a, b, c, m, kk, n);
        else
            k::serial::matmul(a, b, c, m, kk, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOP/s"] = benchmark::Counter(2.0 * m * kk * n, benchmark::Counter::kIsIterationInvariantRate,
                                                   benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_MatmulGradB(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto kk = static_cast<std::size_t>(state.range(1));
    const auto n = static_cast<std::size_t>(state.range(2));
    const auto a = random_vec(m * kk, 1), gc = random_vec(m * n, 2);
    std::vector<double> gb(kk * n);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::matmul_grad_b(a, gc, gb, m, kk, n);
        else
            k::serial::matmul_grad_b(a, gc, gb, m, kk, n);
        benchmark::DoNotOptimize(gb.data());
    }
}

k::ConvDims conv_dims(const benchmark::State& state) {
    k::ConvDims d;
    d.batch = static_cast<std::size_t>(state.range(0));
    d.in_channels = 3;
    d.out_channels = static_cast<std::size_t>(state.range(1));
    d.height = d.width = 16;
    d.kernel = 3;
    d.padding = 1;
    return d;
}

template <bool Parallel>
void BM_Conv(benchmark::State& state) {
    const auto d = conv_dims(state);
    const auto x = random_vec(d.batch * d.in_channels * 256, 3);
    const auto w = random_vec(d.out_channels * d.in_channels * 9, 4);
    std::vector<double> y(d.batch * d.out_channels * 256);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::conv2d(x, w, y, d);
        else
            k::serial::conv2d(x, w, y, d);
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void BM_ConvGradW(benchmark::State& state) {
    const auto d = conv_dims(state);
    const auto x = random_vec(d.batch * d.in_channels * 256, 3);
    const auto gy = random_vec(d.batch * d.out_channels * 256, 5);
    std::vector<double> gw(d.out_channels * d.in_channels * 9);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::conv2d_grad_w(x, gy, gw, d);
        else
            k::serial::conv2d_grad_w(x, gy, gw, d);
        benchmark::DoNotOptimize(gw.data());
    }
}

// (rows, inner, cols): encoder fc, decoder output, GRU gate.
#define MATMUL_SHAPES ->Args({320, 2048, 64})->Args({320, 128, 768})->Args({16, 96, 32})

}  // namespace

BENCHMARK(BM_Matmul<false>) MATMUL_SHAPES;
BENCHMARK(BM_Matmul<true>) MATMUL_SHAPES;
BENCHMARK(BM_MatmulGradB<false>) MATMUL_SHAPES;
BENCHMARK(BM_MatmulGradB<true>) MATMUL_SHAPES;
BENCHMARK(BM_Conv<false>)->Args({320, 8})->Args({32, 8});
BENCHMARK(BM_Conv<true>)->Args({320, 8})->Args({32, 8});
BENCHMARK(BM_ConvGradW<false>)->Args({320, 8});
BENCHMARK(BM_ConvGradW<true>)->Args({320, 8});

BENCHMARK_MAIN();

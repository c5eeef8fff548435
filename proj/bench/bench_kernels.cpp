// Reference vs OpenMP kernels on shapes taken from the toy model.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "bgf/kernels.hpp"

namespace {

using bgf::kernels::ConvGeometry;
using bgf::kernels::GemmShape;

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

ConvGeometry geometry(const benchmark::State& st) {
  ConvGeometry g;
  g.batch = 5;
  g.in_channels = st.range(0);
  g.out_channels = st.range(1);
  g.in_h = g.in_w = st.range(2);
  g.kernel_h = g.kernel_w = st.range(3);
  g.pad_h = g.pad_w = st.range(3) / 2;
  g.stride_h = g.stride_w = st.range(4);
  return g;
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& st) {
  const ConvGeometry g = geometry(st);
  const auto x = random_vec(static_cast<std::size_t>(g.batch * g.in_channels * g.in_h * g.in_w), 1);
  const auto w = random_vec(static_cast<std::size_t>(g.out_channels * g.in_channels * g.kernel_h * g.kernel_w), 2);
  std::vector<float> y(static_cast<std::size_t>(g.batch * g.out_channels * g.out_h() * g.out_w()));
  for (auto _ : st) {
    if constexpr (Parallel) {
      bgf::kernels::conv2d_forward(g, x.data(), w.data(), static_cast<const float*>(nullptr), y.data());
    } else {
      bgf::kernels::reference::conv2d_forward(g, x.data(), w.data(), static_cast<const float*>(nullptr), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
  st.counters["MACs"] = benchmark::Counter(
      static_cast<double>(g.batch * g.out_channels * g.out_h() * g.out_w() * g.in_channels * g.kernel_h * g.kernel_w),
      benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Parallel>
void BM_ConvBackwardWeight(benchmark::State& st) {
  const ConvGeometry g = geometry(st);
  const auto x = random_vec(static_cast<std::size_t>(g.batch * g.in_channels * g.in_h * g.in_w), 1);
  const auto gy = random_vec(static_cast<std::size_t>(g.batch * g.out_channels * g.out_h() * g.out_w()), 3);
  std::vector<float> gw(static_cast<std::size_t>(g.out_channels * g.in_channels * g.kernel_h * g.kernel_w));
  for (auto _ : st) {
    if constexpr (Parallel) {
      bgf::kernels::conv2d_backward_weight(g, x.data(), gy.data(), gw.data());
    } else {
      bgf::kernels::reference::conv2d_backward_weight(g, x.data(), gy.data(), gw.data());
    }
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Parallel>
void BM_ConvBackwardInput(benchmark::State& st) {
  const ConvGeometry g = geometry(st);
  const auto w = random_vec(static_cast<std::size_t>(g.out_channels * g.in_channels * g.kernel_h * g.kernel_w), 2);
  const auto gy = random_vec(static_cast<std::size_t>(g.batch * g.out_channels * g.out_h() * g.out_w()), 3);
  std::vector<float> gx(static_cast<std::size_t>(g.batch * g.in_channels * g.in_h * g.in_w));
  for (auto _ : st) {
    if constexpr (Parallel) {
      bgf::kernels::conv2d_backward_input(g, w.data(), gy.data(), gx.data());
    } else {
      bgf::kernels::reference::conv2d_backward_input(g, w.data(), gy.data(), gx.data());
    }
    benchmark::DoNotOptimize(gx.data());
  }
}

template <bool Parallel>
void BM_Gemm(benchmark::State& st) {
  GemmShape s{st.range(0), st.range(0), st.range(0), false, false};
  const auto a = random_vec(static_cast<std::size_t>(s.m * s.k), 4);
  const auto b = random_vec(static_cast<std::size_t>(s.k * s.n), 5);
  std::vector<float> c(static_cast<std::size_t>(s.m * s.n));
  for (auto _ : st) {
    if constexpr (Parallel) {
      bgf::kernels::gemm(s, a.data(), b.data(), c.data(), false);
    } else {
      bgf::kernels::reference::gemm(s, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  st.counters["FLOPs"] =
      benchmark::Counter(2.0 * static_cast<double>(s.m * s.n * s.k), benchmark::Counter::kIsIterationInvariantRate);
}

// {c_in, c_out, side, kernel, stride}
void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({8, 16, 64, 3, 2})->Args({16, 16, 32, 3, 1})->Args({32, 32, 16, 3, 1})->Args({48, 16, 32, 1, 1});
}

BENCHMARK(BM_ConvForward<false>)->Apply(conv_args)->Name("conv_forward/reference");
BENCHMARK(BM_ConvForward<true>)->Apply(conv_args)->Name("conv_forward/parallel");
BENCHMARK(BM_ConvBackwardWeight<false>)->Apply(conv_args)->Name("conv_backward_weight/reference");
BENCHMARK(BM_ConvBackwardWeight<true>)->Apply(conv_args)->Name("conv_backward_weight/parallel");
BENCHMARK(BM_ConvBackwardInput<false>)->Apply(conv_args)->Name("conv_backward_input/reference");
BENCHMARK(BM_ConvBackwardInput<true>)->Apply(conv_args)->Name("conv_backward_input/parallel");
BENCHMARK(BM_Gemm<false>)->Arg(64)->Arg(256)->Name("gemm/reference");
BENCHMARK(BM_Gemm<true>)->Arg(64)->Arg(256)->Name("gemm/parallel");

}  // namespace

BENCHMARK_MAIN();

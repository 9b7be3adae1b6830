// Serial reference kernels against the OpenMP versions on detector- and UNet-sized shapes.
#include <benchmark/benchmark.h>

#include "r2bd/kernels.hpp"
#include "r2bd/rng.hpp"

using namespace r2bd;

namespace {

struct ConvCase {
    Tensor x, w, bias, dy;
    kernels::ConvGeometry g;
};

ConvCase make_case(const benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const int c = static_cast<int>(state.range(1));
    const int size = static_cast<int>(state.range(2));
    Rng rng(7);
    ConvCase cc;
    cc.x = rng.normal_tensor({n, c, size, size});
    cc.w = rng.normal_tensor({c, c, 3, 3});
    cc.bias = rng.normal_tensor({c});
    cc.g = {1, 1};
    cc.dy = rng.normal_tensor({n, c, size, size});
    return cc;
}

void args(benchmark::internal::Benchmark* b) {
    b->Args({32, 8, 32})->Args({32, 16, 16})->Args({32, 32, 8});
}

void BM_conv_forward_reference(benchmark::State& state) {
    const ConvCase cc = make_case(state);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::reference::conv2d_forward(cc.x, cc.w, cc.bias, cc.g));
}
void BM_conv_forward_parallel(benchmark::State& state) {
    const ConvCase cc = make_case(state);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_forward(cc.x, cc.w, cc.bias, cc.g));
}
void BM_conv_backward_input_reference(benchmark::State& state) {
    const ConvCase cc = make_case(state);
    for (auto _ : state)
        benchmark::DoNotOptimize(kernels::reference::conv2d_backward_input(cc.dy, cc.w, cc.x.shape(), cc.g));
}
void BM_conv_backward_input_parallel(benchmark::State& state) {
    const ConvCase cc = make_case(state);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_backward_input(cc.dy, cc.w, cc.x.shape(), cc.g));
}
void BM_conv_backward_weight_reference(benchmark::State& state) {
    const ConvCase cc = make_case(state);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::reference::conv2d_backward_weight(cc.dy, cc.x, 3, cc.g));
}
void BM_conv_backward_weight_parallel(benchmark::State& state) {
    const ConvCase cc = make_case(state);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_backward_weight(cc.dy, cc.x, 3, cc.g));
}

void BM_bmm_reference(benchmark::State& state) {
    Rng rng(3);
    const int b = static_cast<int>(state.range(0));
    const Tensor a = rng.normal_tensor({b, 64, 16});
    const Tensor c = rng.normal_tensor({b, 64, 16});
    for (auto _ : state) benchmark::DoNotOptimize(kernels::reference::bmm(a, c, false, true));
}
void BM_bmm_parallel(benchmark::State& state) {
    Rng rng(3);
    const int b = static_cast<int>(state.range(0));
    const Tensor a = rng.normal_tensor({b, 64, 16});
    const Tensor c = rng.normal_tensor({b, 64, 16});
    for (auto _ : state) benchmark::DoNotOptimize(kernels::bmm(a, c, false, true));
}

}  // namespace

BENCHMARK(BM_conv_forward_reference)->Apply(args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_forward_parallel)->Apply(args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_input_reference)->Apply(args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_input_parallel)->Apply(args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_weight_reference)->Apply(args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_weight_parallel)->Apply(args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_bmm_reference)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_bmm_parallel)->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();

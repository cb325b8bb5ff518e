// Microbenchmarks for the hot paths of training: convolution forward and
// backward, cross-attention, the calibration losses, and a full denoiser step.
#include <random>

#include <benchmark/benchmark.h>

#include "disendiff/attention.hpp"
#include "disendiff/calibration.hpp"
#include "disendiff/denoiser.hpp"
#include "disendiff/diffusion.hpp"
#include "disendiff/tensor.hpp"
#include "disendiff/tokens.hpp"

using namespace disendiff;

namespace {

std::mt19937& rng() {
    static std::mt19937 r(12345);
    return r;
}

void BM_Conv2dForward(benchmark::State& state) {
    NoGradGuard ng;
    const int c = static_cast<int>(state.range(0));
    Tensor x = gaussian_like({c, 16, 16}, rng());
    Tensor w = gaussian_like({c, c, 3, 3}, rng());
    Tensor b = gaussian_like({c}, rng());
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b));
}

void BM_Conv2dBackward(benchmark::State& state) {
    const int c = static_cast<int>(state.range(0));
    Tensor x = gaussian_like({c, 16, 16}, rng());
    Tensor w = gaussian_like({c, c, 3, 3}, rng());
    w.set_requires_grad(true);
    Tensor b = gaussian_like({c}, rng());
    for (auto _ : state) {
        Tensor loss = sum(conv2d(x, w, b));
        backward(loss);
        w.zero_grad();
    }
}

void BM_CrossAttention(benchmark::State& state) {
    NoGradGuard ng;
    const int r = static_cast<int>(state.range(0));
    Tensor phi = gaussian_like({32, r, r}, rng());
    Tensor tau = gaussian_like({8, 48}, rng());
    Tensor wq = gaussian_like({32, 32}, rng());
    Tensor wk = gaussian_like({48, 32}, rng());
    Tensor wv = gaussian_like({48, 32}, rng());
    for (auto _ : state)
        benchmark::DoNotOptimize(cross_attention(phi, tau, wq, wk, wv, 2));
}

void BM_GaussianSmooth(benchmark::State& state) {
    NoGradGuard ng;
    Tensor map = relu(gaussian_like({16, 16}, rng()));
    const int k = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(gaussian_smooth(map, k, 1.0));
}

void BM_SoftIou(benchmark::State& state) {
    NoGradGuard ng;
    Tensor a = relu(gaussian_like({16, 16}, rng()));
    Tensor b = relu(gaussian_like({16, 16}, rng()));
    for (auto _ : state) benchmark::DoNotOptimize(soft_iou(a, b));
}

void BM_DenoiserForward(benchmark::State& state) {
    NoGradGuard ng;
    Model m(DenoiserConfig{}, 1);
    Tensor z = gaussian_like({3, 32, 32}, rng());
    Tensor tau = gaussian_like({8, kEmbedDim}, rng());
    for (auto _ : state) benchmark::DoNotOptimize(m.net.forward(z, 200, 400, tau));
}

void BM_DenoiserTrainStep(benchmark::State& state) {
    Model m(DenoiserConfig{}, 1);
    NoiseSchedule sched(400);
    Tensor x0 = gaussian_like({3, 32, 32}, rng());
    Tensor tau = gaussian_like({8, kEmbedDim}, rng());
    Tensor eps = gaussian_like({3, 32, 32}, rng());
    Tensor z = forward_noise(sched, x0, 200, eps);
    auto params = m.all_params();
    for (auto _ : state) {
        Tensor loss = base_loss(eps, m.net.forward(z, 200, 400, tau));
        backward(loss);
        for (auto* p : params) p->tensor.zero_grad();
    }
}

}  // namespace

BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(32);
BENCHMARK(BM_Conv2dBackward)->Arg(16)->Arg(32);
BENCHMARK(BM_CrossAttention)->Arg(8)->Arg(16);
BENCHMARK(BM_GaussianSmooth)->Arg(3)->Arg(5);
BENCHMARK(BM_SoftIou);
BENCHMARK(BM_DenoiserForward);
BENCHMARK(BM_DenoiserTrainStep);

BENCHMARK_MAIN();

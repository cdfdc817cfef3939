#include <benchmark/benchmark.h>

#include "rwkv_clip/wkv.hpp"

namespace {

using rwkv_clip::random_wkv_inputs;

void BM_ScanForward(benchmark::State& state, std::size_t d) {
  const auto t = static_cast<std::size_t>(state.range(0));
  auto in = random_wkv_inputs(1, 1, t, d, 11);
  for (auto _ : state) benchmark::DoNotOptimize(rwkv_clip::biwkv_scan(in));
  state.SetComplexityN(state.range(0));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK_CAPTURE(BM_ScanForward, d16, 16)
    ->RangeMultiplier(2)
    ->Range(256, 4096)
    ->Unit(benchmark::kMicrosecond)
    ->Complexity(benchmark::oN);
BENCHMARK_CAPTURE(BM_ScanForward, d64, 64)
    ->RangeMultiplier(2)
    ->Range(256, 4096)
    ->Unit(benchmark::kMicrosecond)
    ->Complexity(benchmark::oN);

void BM_NaiveForward(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  auto in = random_wkv_inputs(1, 1, t, 16, 11);
  for (auto _ : state) benchmark::DoNotOptimize(rwkv_clip::biwkv_naive(in));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_NaiveForward)->RangeMultiplier(2)->Range(64, 1024)->Unit(benchmark::kMillisecond)->Complexity(benchmark::oNSquared);

void BM_ScanBackward(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  auto in = random_wkv_inputs(1, 1, t, 16, 11);
  auto grad = rwkv_clip::Tensor::full(in.r.shape(), 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(rwkv_clip::biwkv_backward(in, grad));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ScanBackward)->RangeMultiplier(2)->Range(256, 4096)->Unit(benchmark::kMicrosecond)->Complexity(benchmark::oN);

// Per-token recurrent inference, one direction.
void BM_RecurrentStep(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  auto in = random_wkv_inputs(1, 1, 1, d, 3);
  auto w = rwkv_clip::Tensor::full({1, 1, d}, 0.9);
  auto r = rwkv_clip::reshape(in.r, {1, 1, d});
  auto k = rwkv_clip::reshape(in.k, {1, 1, d});
  auto v = rwkv_clip::reshape(in.v, {1, 1, d});
  auto s = rwkv_clip::WkvState::zeros(1, 1, d);
  for (auto _ : state) {
    auto step = rwkv_clip::wkv_recurrent_step(s, r, k, v, w, in.u);
    benchmark::DoNotOptimize(step.contribution);
    s = std::move(step.next);
  }
}
BENCHMARK(BM_RecurrentStep)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();

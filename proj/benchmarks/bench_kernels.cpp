#include <benchmark/benchmark.h>

#include "mcblock/dropblock.hpp"
#include "mcblock/kernels.hpp"
#include "mcblock/random.hpp"

using namespace mcblock;

namespace {

Tensor filled(const Shape& s, std::uint64_t seed) {
  Tensor t(s);
  CounterRng rng(seed);
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

// Args: batch, in channels, map size, out channels, stride.
void BM_Conv2dForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), c = static_cast<int>(state.range(1));
  const int hw = static_cast<int>(state.range(2)), f = static_cast<int>(state.range(3));
  const int stride = static_cast<int>(state.range(4));
  const Tensor x = filled({n, c, hw, hw}, 1), k = filled({f, c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d(x, k, stride, 1));
  const double out = static_cast<double>(hw / stride) * (hw / stride);
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * n * f * out * c * 9 * state.iterations() * 1e-9, benchmark::Counter::kIsRate);
}
BENCHMARK(BM_Conv2dForward)
    ->Args({16, 3, 64, 16, 2})
    ->Args({16, 16, 32, 32, 2})
    ->Args({16, 32, 16, 64, 2})
    ->Args({16, 64, 8, 64, 1})
    ->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), hw = static_cast<int>(state.range(1));
  const int f = static_cast<int>(state.range(2));
  const Tensor x = filled({16, c, hw, hw}, 3), k = filled({f, c, 3, 3}, 4);
  const Tensor dy = filled({16, f, hw, hw}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_backward(x, k, dy, 1, 1));
}
BENCHMARK(BM_Conv2dBackward)->Args({32, 16, 64})->Args({64, 8, 64})->Unit(benchmark::kMillisecond);

void BM_SampleMask(benchmark::State& state) {
  const int hw = static_cast<int>(state.range(0));
  DropBlockConfig cfg;
  cfg.block_size = static_cast<int>(state.range(1));
  cfg.drop_prob = 0.1;
  CounterRng rng(6);
  for (auto _ : state) benchmark::DoNotOptimize(sample_mask(hw, hw, cfg, rng));
}
BENCHMARK(BM_SampleMask)->Args({8, 3})->Args({14, 5})->Args({64, 7});

}  // namespace

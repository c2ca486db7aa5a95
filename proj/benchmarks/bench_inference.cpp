#include <benchmark/benchmark.h>

#include "mcblock/mc_inference.hpp"
#include "mcblock/model.hpp"

using namespace mcblock;

namespace {

ModelParams detector() {
  ModelHyper h;
  CounterRng rng(1);
  ModelParams p = ModelParams::init(h, rng);
  // Objectness near 0.5 so the merge step sees a full set of candidates.
  for (int a = 0; a < h.num_anchors(); ++a) p.get("head.bias")[a * h.per_anchor() + 8] = 0.0f;
  return p;
}

Tensor image(int size) {
  Tensor t({1, 3, size, size});
  CounterRng rng(2);
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  return t;
}

void BM_DetectorForward(benchmark::State& state) {
  const ModelParams p = detector();
  const Tensor x = image(64);
  CounterRng rng(3);
  for (auto _ : state) benchmark::DoNotOptimize(detector_forward(x, p, StochasticSite::disabled(), rng));
}
BENCHMARK(BM_DetectorForward)->Unit(benchmark::kMicrosecond);

// Args: samples, threads.
void BM_McDetect(benchmark::State& state) {
  const ModelParams p = detector();
  const Tensor x = image(64);
  McConfig cfg;
  cfg.method = Method::dropblock;
  cfg.samples = static_cast<int>(state.range(0));
  cfg.threads = static_cast<int>(state.range(1));
  const CounterRng rng(4);
  for (auto _ : state) benchmark::DoNotOptimize(mc_detect(x, p, cfg, rng));
}
BENCHMARK(BM_McDetect)->Args({1, 1})->Args({30, 1})->Args({30, 4})->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();

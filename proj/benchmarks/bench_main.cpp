#include <cmath>
#include <vector>

#include <benchmark/benchmark.h>

#include "attrdisc/classify.hpp"
#include "attrdisc/divergence.hpp"
#include "attrdisc/image.hpp"
#include "attrdisc/refnet.hpp"
#include "attrdisc/rng.hpp"

namespace {

using namespace attrdisc;

std::vector<float> values(std::uint64_t seed, std::size_t n, double shift) {
  Rng rng(seed);
  std::vector<float> out(n);
  for (auto& v : out) v = static_cast<float>(rng.uniform() + shift);
  return out;
}

void BM_HistogramAndKl(benchmark::State& state) {
  const auto pos = values(1, static_cast<std::size_t>(state.range(0)), 0.3);
  const auto neg = values(2, static_cast<std::size_t>(state.range(0)), 0.0);
  for (auto _ : state) {
    const auto h = estimate_histograms(pos, neg);
    benchmark::DoNotOptimize(symmetric_kl(h.p_pos, h.p_neg));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0) * 2);
}
BENCHMARK(BM_HistogramAndKl)->Arg(200)->Arg(2000);

void BM_TrainLogistic(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 100;
  Rng rng(3);
  FeatureMatrix x(n, d);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 2);
    for (std::size_t j = 0; j < d; ++j) x(i, j) = rng.uniform() + (j < 5 ? 0.5 * y[i] : 0.0);
  }
  for (auto _ : state) benchmark::DoNotOptimize(train_logistic(x, y));
}
BENCHMARK(BM_TrainLogistic)->Arg(200)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_RefNetForward(benchmark::State& state) {
  const RefNet net(RefNetSpec::small());
  Image image(net.spec().input_side, net.spec().input_side);
  Rng rng(4);
  for (auto& v : image.data) v = static_cast<float>(rng.uniform());
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(image));
}
BENCHMARK(BM_RefNetForward)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();

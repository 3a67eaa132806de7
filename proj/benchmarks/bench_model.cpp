// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "wsms/cost_model.hpp"
#include "wsms/layers.hpp"
#include "wsms/wsms.hpp"

namespace {

using namespace wsms;

void BM_CountDenseNetWsms(benchmark::State& state) {
  const WsmsSpec spec{build_densenet(24, 10), 3, Integration::Conv1x1};
  for (auto _ : state) benchmark::DoNotOptimize(count_mults(spec, Extent{32, 32}).total_mults);
}
BENCHMARK(BM_CountDenseNetWsms)->Unit(benchmark::kMillisecond);

// One training step's forward and backward on a batch of 32 for the tiny synthetic-data models.
void BM_TinyTrainStep(benchmark::State& state) {
  const int stages = static_cast<int>(state.range(0));
  auto model = build_wsms<float>(WsmsSpec{build_resnet(1, 5, 8), stages, Integration::None}, 1);
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  Tensor<float> x(Shape{32, 3, 32, 32});
  for (float& v : x.data()) v = n(rng);
  std::vector<int> labels(32);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 5);
  for (auto _ : state) {
    Tape<float> t;
    auto f = forward_wsms(t, model, t.constant(x), ForwardOptions{Mode::Train, {}});
    benchmark::DoNotOptimize(t.backward(softmax_cross_entropy(t, f.logits, labels)));
  }
}
BENCHMARK(BM_TinyTrainStep)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "wsms/engine.hpp"
#include "wsms/ops.hpp"
#include "wsms/tape.hpp"

namespace {

using namespace wsms;

Tensor<float> random_tensor(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n;
  Tensor<float> t(s);
  for (float& v : t.data()) v = n(rng);
  return t;
}

// Args: channels, extent, threads.
void BM_Conv3x3Forward(benchmark::State& state) {
  const auto c = state.range(0), e = state.range(1);
  engine::set_threads(static_cast<int>(state.range(2)));
  const auto x = random_tensor(Shape{8, c, e, e}, 1);
  const auto w = random_tensor(Shape{c, c, 3, 3}, 2);
  for (auto _ : state) {
    Tape<float> t;
    Var y = ops::conv2d(t, t.constant(x), t.constant(w), std::nullopt, 1, 1);
    benchmark::DoNotOptimize(t.value(y).ptr());
  }
  state.counters["mult/s"] =
      benchmark::Counter(static_cast<double>(8 * c * c * 9 * e * e) * static_cast<double>(state.iterations()),
                         benchmark::Counter::kIsRate);
  engine::set_threads(1);
}
BENCHMARK(BM_Conv3x3Forward)->Args({16, 32, 1})->Args({32, 16, 1})->Args({64, 8, 1})->Args({16, 32, 4});

void BM_Conv3x3ForwardBackward(benchmark::State& state) {
  const auto c = state.range(0), e = state.range(1);
  const auto x = random_tensor(Shape{8, c, e, e}, 3);
  const auto w = random_tensor(Shape{c, c, 3, 3}, 4);
  for (auto _ : state) {
    Tape<float> t;
    Var xv = t.leaf(x);
    Var wv = t.leaf(w);
    auto grads = t.backward(ops::sum(t, ops::conv2d(t, xv, wv, std::nullopt, 1, 1)));
    benchmark::DoNotOptimize(grads);
  }
}
BENCHMARK(BM_Conv3x3ForwardBackward)->Args({16, 32})->Args({64, 8});

}  // namespace

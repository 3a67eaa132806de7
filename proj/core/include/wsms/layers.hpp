// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

#include "wsms/param_store.hpp"
#include "wsms/tape.hpp"

namespace wsms {

enum class Mode { Train, Eval };

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEpsilon = 1e-5;

// One batch-norm site: its affine parameters live in the ParamStore, its
// running statistics in the store's statistics slots.
struct BatchNormState {
  ParamId gamma;
  ParamId beta;
  BnStatsId stats;
  std::int64_t channels = 0;
  double momentum = kBatchNormMomentum;
  double epsilon = kBatchNormEpsilon;
};

// Allocates gamma = 1, beta = 0, running mean 0 and running variance 1.
template <typename T>
BatchNormState make_batch_norm(ParamStore<T>& store, const std::string& name, std::int64_t channels);

// Train mode normalises with batch statistics (biased variance) and blends the
// batch mean and unbiased variance into the running statistics with weight
// `momentum`. Eval mode normalises with the running statistics.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, const BatchNormState& state, ParamStore<T>& store, Mode mode);

template <typename T>
Var relu(Tape<T>& tape, Var x);

// x: N x D, weight: K x D, bias: K.
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias);

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels);

// Zero-mean normal samples with standard deviation sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_init(const Shape& shape, std::int64_t fan_in, std::mt19937_64& rng);

}  // namespace wsms

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "wsms/tape.hpp"
#include "wsms/tensor.hpp"

// Differentiable tensor primitives. Every op reads its inputs from the tape,
// records its output and a backward rule, and returns the output handle.
// Shape problems raise InvalidArgument before anything is recorded.
namespace wsms::ops {

// Output extent of a strided window: floor((in + 2*pad - kernel) / stride) + 1.
std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride, std::int64_t pad);

// Cross-correlation (no kernel flip). input N x Cin x H x W, weight Cout x Cin x kh x kw,
// optional bias of length Cout.
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, std::optional<Var> bias, int stride, int padding);

// Mean over non-overlapping 2x2 windows; H and W must be even.
template <typename T>
Var avg_pool_half(Tape<T>& tape, Var input);

// Max over non-overlapping 2x2 windows. Ties go to the first cell in row-major order.
template <typename T>
Var max_pool2(Tape<T>& tape, Var input);

// N x C x H x W -> N x C x 1 x 1 spatial means.
template <typename T>
Var global_avg_pool(Tape<T>& tape, Var input);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor);

// Channel-direction concatenation in argument order.
template <typename T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& parts);

// Same values, no gradient flows back through the result.
template <typename T>
Var detach(Tape<T>& tape, Var x);

// N x ... -> N x D.
template <typename T>
Var flatten(Tape<T>& tape, Var x);

// Sum of all elements as a scalar.
template <typename T>
Var sum(Tape<T>& tape, Var x);

// Sum of x * weights (weights fixed, same shape as x) as a scalar.
template <typename T>
Var dot(Tape<T>& tape, Var x, const Tensor<T>& weights);

// Parameter-free residual shortcut: keeps every stride-th row and column and
// zero-fills channels beyond the input's.
template <typename T>
Var subsample_pad_channels(Tape<T>& tape, Var x, int stride, std::int64_t out_channels);

// Non-differentiable helpers on plain tensors.
template <typename T>
Tensor<T> avg_pool_half(const Tensor<T>& input);

}  // namespace wsms::ops

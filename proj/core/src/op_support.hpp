// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>

#include "wsms/engine.hpp"
#include "wsms/errors.hpp"
#include "wsms/tensor.hpp"

namespace wsms::detail {

// Returns the upstream gradient, scaled when the fault hook targets this op.
template <typename T>
const Tensor<T>& upstream(std::string_view op, const Tensor<T>& grad, Tensor<T>& scratch) {
  if (!engine::faulty(op)) return grad;
  scratch = grad;
  for (T& v : scratch.data()) v *= T(1.25);
  return scratch;
}

inline void require_rank(std::string_view op, std::string_view what, const Shape& s, std::size_t rank) {
  if (s.rank() != rank) {
    throw InvalidArgument(std::string(op) + ": " + std::string(what) + " must have rank " + std::to_string(rank) +
                          ", got shape " + s.str());
  }
}

}  // namespace wsms::detail

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "wsms/tensor.hpp"

namespace wsms {

// Identity of a trainable tensor in a ParamStore. Two graph sites that use the
// same ParamId are the same parameter; that is all weight sharing is.
struct ParamId {
  std::uint32_t value = 0;
  auto operator<=>(const ParamId&) const = default;
};

inline std::string to_string(ParamId id) { return "param#" + std::to_string(id.value); }

// Handle to a value recorded on a Tape.
struct Var {
  std::uint64_t tape = 0;
  std::uint32_t index = 0;
};

template <typename T>
using GradMap = std::map<ParamId, Tensor<T>>;

template <typename T>
struct BackwardArgs {
  std::span<const Tensor<T>* const> inputs;
  const Tensor<T>& output;
  const Tensor<T>& grad_output;
  // grads[i] is null when input i does not need a gradient. Buffers arrive
  // zero-initialised or holding earlier contributions; rules must accumulate.
  std::span<Tensor<T>* const> grads;
};

template <typename T>
using BackwardFn = std::function<void(const BackwardArgs<T>&)>;

// Records a forward computation as an append-only list of nodes. Node inputs
// always precede the node, so the record order is a topological order.
template <typename T>
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> value);
  Var leaf(Tensor<T> value);
  // Leaf bound to parameter storage owned elsewhere (must outlive the tape).
  // Repeated calls with the same id return the same node.
  Var param(ParamId id, const Tensor<T>& storage);

  Var record(Tensor<T> value, std::vector<Var> inputs, BackwardFn<T> backward, std::string op);

  const Tensor<T>& value(Var v) const;
  bool requires_grad(Var v) const;
  bool owns(Var v) const noexcept { return v.tape == id_ && v.index < nodes_.size(); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::string& op(Var v) const;

  // Reverse-mode sweep from a scalar. Returns gradients for every parameter
  // reachable from loss; per-node gradients are available through grad().
  GradMap<T> backward(Var loss);
  const Tensor<T>* grad(Var v) const;

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    std::vector<std::uint32_t> inputs;
    BackwardFn<T> backward;
    std::string op;
    bool requires_grad = false;
    bool is_param = false;
    ParamId param{};
    const Tensor<T>& value() const { return external ? *external : owned; }
  };

  const Node& node(Var v) const;

  std::uint64_t id_;
  std::deque<Node> nodes_;
  std::unordered_map<std::uint32_t, std::uint32_t> param_nodes_;
  std::vector<Tensor<T>> grads_;
  std::vector<bool> has_grad_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace wsms

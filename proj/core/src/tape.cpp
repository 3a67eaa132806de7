// SPDX-License-Identifier: Apache-2.0
#include "wsms/tape.hpp"

#include <atomic>

#include "wsms/errors.hpp"

namespace wsms {
namespace {
std::atomic<std::uint64_t> g_next_tape{1};
}

template <typename T>
Tape<T>::Tape() : id_(g_next_tape++) {}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return {id_, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::leaf(Tensor<T> value) {
  Var v = constant(std::move(value));
  nodes_.back().requires_grad = true;
  nodes_.back().op = "leaf";
  return v;
}

template <typename T>
Var Tape<T>::param(ParamId id, const Tensor<T>& storage) {
  if (auto it = param_nodes_.find(id.value); it != param_nodes_.end()) {
    if (nodes_[it->second].external != &storage) {
      throw InvalidState(to_string(id) + " bound to two different storages on one tape");
    }
    return {id_, it->second};
  }
  Node n;
  n.external = &storage;
  n.requires_grad = true;
  n.is_param = true;
  n.param = id;
  n.op = "param";
  nodes_.push_back(std::move(n));
  const auto index = static_cast<std::uint32_t>(nodes_.size() - 1);
  param_nodes_.emplace(id.value, index);
  return {id_, index};
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::vector<Var> inputs, BackwardFn<T> backward, std::string op) {
  Node n;
  n.owned = std::move(value);
  n.op = std::move(op);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    const Node& src = node(in);
    n.requires_grad = n.requires_grad || src.requires_grad;
    n.inputs.push_back(in.index);
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {id_, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (!owns(v)) throw InvalidState("variable does not belong to this tape");
  return nodes_[v.index];
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return node(v).value();
}

template <typename T>
bool Tape<T>::requires_grad(Var v) const {
  return node(v).requires_grad;
}

template <typename T>
const std::string& Tape<T>::op(Var v) const {
  return node(v).op;
}

template <typename T>
GradMap<T> Tape<T>::backward(Var loss) {
  if (!owns(loss)) throw InvalidState("loss was not recorded on this tape");
  const Node& root = nodes_[loss.index];
  if (!root.value().shape().is_scalar()) {
    throw InvalidArgument("backward() needs a scalar loss, got shape " + root.value().shape().str());
  }

  grads_.assign(nodes_.size(), Tensor<T>{});
  has_grad_.assign(nodes_.size(), false);
  GradMap<T> out;
  if (!root.requires_grad) return out;

  grads_[loss.index] = Tensor<T>(root.value().shape(), T{1});
  has_grad_[loss.index] = true;

  std::vector<const Tensor<T>*> in_values;
  std::vector<Tensor<T>*> in_grads;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (!has_grad_[i]) continue;
    Node& n = nodes_[i];
    if (n.is_param) {
      out.emplace(n.param, grads_[i]);
      continue;
    }
    if (!n.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::uint32_t src : n.inputs) {
      in_values.push_back(&nodes_[src].value());
      if (nodes_[src].requires_grad) {
        if (!has_grad_[src]) {
          grads_[src] = Tensor<T>(nodes_[src].value().shape());
          has_grad_[src] = true;
        }
        in_grads.push_back(&grads_[src]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    n.backward(BackwardArgs<T>{in_values, n.value(), grads_[i], in_grads});
  }
  return out;
}

template <typename T>
const Tensor<T>* Tape<T>::grad(Var v) const {
  if (!owns(v) || v.index >= has_grad_.size() || !has_grad_[v.index]) return nullptr;
  return &grads_[v.index];
}

template class Tape<float>;
template class Tape<double>;

}  // namespace wsms

// SPDX-License-Identifier: Apache-2.0
#include "wsms/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "op_support.hpp"

namespace wsms {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;

struct ChannelLayout {
  std::int64_t n, c, area;
  std::int64_t count() const { return n * area; }
};

ChannelLayout channel_layout(const Shape& s) {
  if (s.rank() == 4) return {s[0], s[1], s[2] * s[3]};
  if (s.rank() == 2) return {s[0], s[1], 1};
  throw InvalidArgument("batch_norm: input must be N x C or N x C x H x W, got " + s.str());
}

}  // namespace

template <typename T>
BatchNormState make_batch_norm(ParamStore<T>& store, const std::string& name, std::int64_t channels) {
  BatchNormState s;
  s.gamma = store.add(name + ".gamma", ParamRole::BatchNorm, Tensor<T>(Shape{channels}, T{1}));
  s.beta = store.add(name + ".beta", ParamRole::BatchNorm, Tensor<T>(Shape{channels}, T{0}));
  s.stats = store.add_running_stats(channels);
  s.channels = channels;
  return s;
}

template <typename T>
Var batch_norm(Tape<T>& tape, Var x, const BatchNormState& state, ParamStore<T>& store, Mode mode) {
  const Tensor<T>& in = tape.value(x);
  const ChannelLayout L = channel_layout(in.shape());
  if (L.c != state.channels) {
    throw InvalidArgument("batch_norm: input has " + std::to_string(L.c) + " channels (dim 1), state expects " +
                          std::to_string(state.channels));
  }
  Var gamma = tape.param(state.gamma, store.value(state.gamma));
  Var beta = tape.param(state.beta, store.value(state.beta));
  const Tensor<T>& g = tape.value(gamma);
  const Tensor<T>& b = tape.value(beta);
  RunningStats<T>& running = store.running_stats(state.stats);

  // Per-channel mean and inverse standard deviation used for this pass.
  std::vector<T> mean(static_cast<std::size_t>(L.c)), inv_std(static_cast<std::size_t>(L.c));
  const double m = static_cast<double>(L.count());
  for (std::int64_t c = 0; c < L.c; ++c) {
    double mu, var;
    if (mode == Mode::Train) {
      double s = 0;
      for (std::int64_t n = 0; n < L.n; ++n) {
        const T* p = in.ptr() + (n * L.c + c) * L.area;
        for (std::int64_t i = 0; i < L.area; ++i) s += p[i];
      }
      mu = s / m;
      double ss = 0;
      for (std::int64_t n = 0; n < L.n; ++n) {
        const T* p = in.ptr() + (n * L.c + c) * L.area;
        for (std::int64_t i = 0; i < L.area; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      var = ss / m;
      const double unbiased = m > 1 ? ss / (m - 1) : 0.0;
      auto& rm = running.mean[static_cast<std::size_t>(c)];
      auto& rv = running.var[static_cast<std::size_t>(c)];
      rm = static_cast<T>((1 - state.momentum) * rm + state.momentum * mu);
      rv = static_cast<T>((1 - state.momentum) * rv + state.momentum * unbiased);
    } else {
      mu = running.mean[static_cast<std::size_t>(c)];
      var = running.var[static_cast<std::size_t>(c)];
    }
    mean[static_cast<std::size_t>(c)] = static_cast<T>(mu);
    inv_std[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + state.epsilon));
  }

  Tensor<T> out(in.shape());
  for (std::int64_t n = 0; n < L.n; ++n) {
    for (std::int64_t c = 0; c < L.c; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const T scale = g[ci] * inv_std[ci];
      const T shift = b[ci] - mean[ci] * scale;
      const T* p = in.ptr() + (n * L.c + c) * L.area;
      T* q = out.ptr() + (n * L.c + c) * L.area;
      for (std::int64_t i = 0; i < L.area; ++i) q[i] = p[i] * scale + shift;
    }
  }

  const bool train = mode == Mode::Train;
  return tape.record(
      std::move(out), {x, gamma, beta},
      [L, mean = std::move(mean), inv_std = std::move(inv_std), train](const BackwardArgs<T>& a) {
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("batch_norm", a.grad_output, scratch);
        const Tensor<T>& in = *a.inputs[0];
        const Tensor<T>& g = *a.inputs[1];
        Tensor<T>* gx = a.grads[0];
        Tensor<T>* gg = a.grads[1];
        Tensor<T>* gb = a.grads[2];
        const T m = static_cast<T>(L.count());
        for (std::int64_t c = 0; c < L.c; ++c) {
          const auto ci = static_cast<std::size_t>(c);
          T sum_dy{0}, sum_dy_xhat{0};
          for (std::int64_t n = 0; n < L.n; ++n) {
            const T* p = in.ptr() + (n * L.c + c) * L.area;
            const T* d = gy.ptr() + (n * L.c + c) * L.area;
            for (std::int64_t i = 0; i < L.area; ++i) {
              sum_dy += d[i];
              sum_dy_xhat += d[i] * (p[i] - mean[ci]) * inv_std[ci];
            }
          }
          if (gg) (*gg)[ci] += sum_dy_xhat;
          if (gb) (*gb)[ci] += sum_dy;
          if (!gx) continue;
          const T k = g[ci] * inv_std[ci];
          for (std::int64_t n = 0; n < L.n; ++n) {
            const T* p = in.ptr() + (n * L.c + c) * L.area;
            const T* d = gy.ptr() + (n * L.c + c) * L.area;
            T* q = gx->ptr() + (n * L.c + c) * L.area;
            for (std::int64_t i = 0; i < L.area; ++i) {
              if (train) {
                const T xhat = (p[i] - mean[ci]) * inv_std[ci];
                q[i] += k * (d[i] - sum_dy / m - xhat * sum_dy_xhat / m);
              } else {
                q[i] += k * d[i];
              }
            }
          }
        }
      },
      "batch_norm");
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  Tensor<T> out = tape.value(x);
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  return tape.record(
      std::move(out), {x},
      [](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("relu", a.grad_output, scratch);
        const Tensor<T>& in = *a.inputs[0];
        Tensor<T>& gx = *a.grads[0];
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (in[i] > T{0}) gx[i] += gy[i];
      },
      "relu");
}

template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const Tensor<T>& in = tape.value(x);
  const Tensor<T>& w = tape.value(weight);
  const Tensor<T>& b = tape.value(bias);
  detail::require_rank("linear", "input", in.shape(), 2);
  detail::require_rank("linear", "weight", w.shape(), 2);
  const std::int64_t N = in.dim(0), D = in.dim(1), K = w.dim(0);
  if (w.dim(1) != D) {
    throw InvalidArgument("linear: input feature dimension (dim 1) is " + std::to_string(D) + " but weight expects " +
                          std::to_string(w.dim(1)));
  }
  if (b.shape() != Shape{K}) {
    throw InvalidArgument("linear: bias shape " + b.shape().str() + " does not match " + std::to_string(K) +
                          " outputs");
  }
  Tensor<T> out(Shape{N, K});
  MatMap<T> y(out.ptr(), N, K);
  y.noalias() = ConstMatMap<T>(in.ptr(), N, D) * ConstMatMap<T>(w.ptr(), K, D).transpose();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t k = 0; k < K; ++k) y(n, k) += b[static_cast<std::size_t>(k)];
  return tape.record(
      std::move(out), {x, weight, bias},
      [N, D, K](const BackwardArgs<T>& a) {
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("linear", a.grad_output, scratch);
        ConstMatMap<T> dy(gy.ptr(), N, K);
        if (a.grads[0]) MatMap<T>(a.grads[0]->ptr(), N, D).noalias() += dy * ConstMatMap<T>(a.inputs[1]->ptr(), K, D);
        if (a.grads[1])
          MatMap<T>(a.grads[1]->ptr(), K, D).noalias() += dy.transpose() * ConstMatMap<T>(a.inputs[0]->ptr(), N, D);
        if (a.grads[2]) {
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k) (*a.grads[2])[static_cast<std::size_t>(k)] += dy(n, k);
        }
      },
      "linear");
}

template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
  const Tensor<T>& z = tape.value(logits);
  detail::require_rank("softmax_cross_entropy", "logits", z.shape(), 2);
  const std::int64_t N = z.dim(0), K = z.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != N) {
    throw InvalidArgument("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                          std::to_string(N));
  }
  std::vector<T> probs(static_cast<std::size_t>(N * K));
  double loss = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    const int label = labels[static_cast<std::size_t>(n)];
    if (label < 0 || label >= K) {
      throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(label) + " at batch index " +
                            std::to_string(n) + " outside [0, " + std::to_string(K) + ")");
    }
    const T* row = z.ptr() + n * K;
    const T mx = *std::max_element(row, row + K);
    double denom = 0;
    for (std::int64_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
    for (std::int64_t k = 0; k < K; ++k)
      probs[static_cast<std::size_t>(n * K + k)] = static_cast<T>(std::exp(static_cast<double>(row[k] - mx)) / denom);
    loss += std::log(denom) - static_cast<double>(row[label] - mx);
  }
  std::vector<int> kept(labels.begin(), labels.end());
  return tape.record(
      Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(N))), {logits},
      [N, K, probs = std::move(probs), kept = std::move(kept)](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const T g = detail::upstream("softmax_cross_entropy", a.grad_output, scratch).item() / static_cast<T>(N);
        Tensor<T>& gz = *a.grads[0];
        for (std::int64_t n = 0; n < N; ++n) {
          for (std::int64_t k = 0; k < K; ++k) {
            const auto i = static_cast<std::size_t>(n * K + k);
            gz[i] += g * (probs[i] - (k == kept[static_cast<std::size_t>(n)] ? T{1} : T{0}));
          }
        }
      },
      "softmax_cross_entropy");
}

template <typename T>
Tensor<T> he_init(const Shape& shape, std::int64_t fan_in, std::mt19937_64& rng) {
  if (fan_in < 1) throw InvalidArgument("he_init: fan_in must be positive");
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> out(shape);
  for (T& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

#define WSMS_INSTANTIATE_LAYERS(T)                                                                   \
  template BatchNormState make_batch_norm<T>(ParamStore<T>&, const std::string&, std::int64_t);      \
  template Var batch_norm<T>(Tape<T>&, Var, const BatchNormState&, ParamStore<T>&, Mode);            \
  template Var relu<T>(Tape<T>&, Var);                                                               \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                                   \
  template Var softmax_cross_entropy<T>(Tape<T>&, Var, std::span<const int>);                        \
  template Tensor<T> he_init<T>(const Shape&, std::int64_t, std::mt19937_64&);

WSMS_INSTANTIATE_LAYERS(float)
WSMS_INSTANTIATE_LAYERS(double)

}  // namespace wsms

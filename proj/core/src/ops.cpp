// SPDX-License-Identifier: Apache-2.0
#include "wsms/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <numeric>

#include "op_support.hpp"

namespace wsms::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::int64_t n, cin, h, w;
  std::int64_t cout, kh, kw;
  std::int64_t stride, pad;
  std::int64_t ho, wo;
  std::int64_t k() const { return cin * kh * kw; }
  std::int64_t p() const { return ho * wo; }
};

// Upper bound on im2col buffer size per chunk. Fixed, so the chunking (and the
// order of weight-gradient reductions) never depends on the thread count.
constexpr std::int64_t kColumnBudget = std::int64_t{1} << 22;

std::int64_t samples_per_chunk(const ConvGeometry& g) {
  return std::clamp<std::int64_t>(kColumnBudget / std::max<std::int64_t>(1, g.k() * g.p()), 1, g.n);
}

// col is K x (count * P), row-major.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::int64_t n0, std::int64_t count, T* col) {
  const std::int64_t P = g.p();
  const std::int64_t cols = count * P;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
        for (std::int64_t s = 0; s < count; ++s) {
          const T* plane = x + ((n0 + s) * g.cin + ci) * g.h * g.w;
          T* dst = row + s * P;
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) {
              std::fill(dst + oy * g.wo, dst + (oy + 1) * g.wo, T{0});
              continue;
            }
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              dst[oy * g.wo + ox] = (ix < 0 || ix >= g.w) ? T{0} : plane[iy * g.w + ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, std::int64_t n0, std::int64_t count, T* dx) {
  const std::int64_t P = g.p();
  const std::int64_t cols = count * P;
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
        for (std::int64_t s = 0; s < count; ++s) {
          T* plane = dx + ((n0 + s) * g.cin + ci) * g.h * g.w;
          const T* src = row + s * P;
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += src[oy * g.wo + ox];
            }
          }
        }
      }
    }
  }
}

ConvGeometry conv_geometry(const Shape& x, const Shape& w, int stride, int padding) {
  detail::require_rank("conv2d", "input", x, 4);
  detail::require_rank("conv2d", "weight", w, 4);
  if (stride < 1) throw InvalidArgument("conv2d: stride must be positive, got " + std::to_string(stride));
  if (padding < 0) throw InvalidArgument("conv2d: padding must be non-negative, got " + std::to_string(padding));
  if (x[1] != w[1]) {
    throw InvalidArgument("conv2d: input channel dimension (dim 1) is " + std::to_string(x[1]) +
                          " but weight expects " + std::to_string(w[1]) + " input channels");
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, padding, 0, 0};
  g.ho = conv_out_extent(g.h, g.kh, stride, padding);
  g.wo = conv_out_extent(g.w, g.kw, stride, padding);
  if (g.ho < 1 || g.wo < 1) {
    throw InvalidArgument("conv2d: output extent " + std::to_string(g.ho) + "x" + std::to_string(g.wo) +
                          " is not positive for input " + x.str() + " and kernel " + w.str());
  }
  return g;
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

void check_even_spatial(const char* op, const Shape& s) {
  detail::require_rank(op, "input", s, 4);
  if (s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw InvalidArgument(std::string(op) + ": spatial extent " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                          " must be even");
  }
}

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride, std::int64_t pad) {
  const std::int64_t span = in + 2 * pad - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var weight, std::optional<Var> bias, int stride, int padding) {
  const Tensor<T>& x = tape.value(input);
  const Tensor<T>& w = tape.value(weight);
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, padding);
  if (bias) {
    const Shape& bs = tape.value(*bias).shape();
    if (bs.rank() != 1 || bs[0] != g.cout) {
      throw InvalidArgument("conv2d: bias shape " + bs.str() + " does not match " + std::to_string(g.cout) +
                            " output channels (weight dim 0)");
    }
  }

  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  const std::int64_t per_chunk = samples_per_chunk(g);
  const std::int64_t chunks = (g.n + per_chunk - 1) / per_chunk;
  const T* bias_ptr = bias ? tape.value(*bias).ptr() : nullptr;
  const std::int64_t K = g.k(), P = g.p();

  engine::parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t c) {
    const std::int64_t n0 = static_cast<std::int64_t>(c) * per_chunk;
    const std::int64_t count = std::min(per_chunk, g.n - n0);
    std::vector<T> col(static_cast<std::size_t>(K * count * P));
    im2col(x.ptr(), g, n0, count, col.data());
    RowMat<T> y = ConstMatMap<T>(w.ptr(), g.cout, K) * ConstMatMap<T>(col.data(), K, count * P);
    for (std::int64_t s = 0; s < count; ++s) {
      for (std::int64_t co = 0; co < g.cout; ++co) {
        T* dst = out.ptr() + ((n0 + s) * g.cout + co) * P;
        const T* src = y.data() + co * count * P + s * P;
        const T b = bias_ptr ? bias_ptr[co] : T{0};
        for (std::int64_t p = 0; p < P; ++p) dst[p] = src[p] + b;
      }
    }
  });

  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return tape.record(
      std::move(out), std::move(inputs),
      [g, per_chunk, chunks](const BackwardArgs<T>& a) {
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("conv2d", a.grad_output, scratch);
        const Tensor<T>& x = *a.inputs[0];
        const Tensor<T>& w = *a.inputs[1];
        Tensor<T>* gx = a.grads[0];
        Tensor<T>* gw = a.grads[1];
        Tensor<T>* gb = a.grads.size() > 2 ? a.grads[2] : nullptr;
        const std::int64_t K = g.k(), P = g.p();

        std::vector<RowMat<T>> partial_w(gw ? static_cast<std::size_t>(chunks) : 0);
        engine::parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t c) {
          const std::int64_t n0 = static_cast<std::int64_t>(c) * per_chunk;
          const std::int64_t count = std::min(per_chunk, g.n - n0);
          RowMat<T> dy(g.cout, count * P);
          for (std::int64_t s = 0; s < count; ++s) {
            for (std::int64_t co = 0; co < g.cout; ++co) {
              const T* src = gy.ptr() + ((n0 + s) * g.cout + co) * P;
              std::copy(src, src + P, dy.data() + co * count * P + s * P);
            }
          }
          if (gw) {
            std::vector<T> col(static_cast<std::size_t>(K * count * P));
            im2col(x.ptr(), g, n0, count, col.data());
            partial_w[c] = dy * ConstMatMap<T>(col.data(), K, count * P).transpose();
          }
          if (gx) {
            RowMat<T> dcol = ConstMatMap<T>(w.ptr(), g.cout, K).transpose() * dy;
            col2im(dcol.data(), g, n0, count, gx->ptr());
          }
        });
        if (gw) {
          MatMap<T> acc(gw->ptr(), g.cout, K);
          for (const auto& p : partial_w) acc += p;
        }
        if (gb) {
          for (std::int64_t n = 0; n < g.n; ++n) {
            for (std::int64_t co = 0; co < g.cout; ++co) {
              const T* src = gy.ptr() + (n * g.cout + co) * P;
              (*gb)[static_cast<std::size_t>(co)] += std::accumulate(src, src + P, T{0});
            }
          }
        }
      },
      "conv2d");
}

template <typename T>
Tensor<T> avg_pool_half(const Tensor<T>& x) {
  check_even_spatial("avg_pool_half", x.shape());
  const auto& s = x.shape();
  const std::int64_t ho = s[2] / 2, wo = s[3] / 2;
  Tensor<T> out(Shape{s[0], s[1], ho, wo});
  for (std::int64_t n = 0; n < s[0]; ++n)
    for (std::int64_t c = 0; c < s[1]; ++c)
      for (std::int64_t y = 0; y < ho; ++y)
        for (std::int64_t xx = 0; xx < wo; ++xx) {
          out.at(n, c, y, xx) = (x.at(n, c, 2 * y, 2 * xx) + x.at(n, c, 2 * y, 2 * xx + 1) +
                                 x.at(n, c, 2 * y + 1, 2 * xx) + x.at(n, c, 2 * y + 1, 2 * xx + 1)) *
                                T(0.25);
        }
  return out;
}

template <typename T>
Var avg_pool_half(Tape<T>& tape, Var input) {
  Tensor<T> out = avg_pool_half(tape.value(input));
  return tape.record(
      std::move(out), {input},
      [](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("avg_pool_half", a.grad_output, scratch);
        Tensor<T>& gx = *a.grads[0];
        const auto& s = gy.shape();
        for (std::int64_t n = 0; n < s[0]; ++n)
          for (std::int64_t c = 0; c < s[1]; ++c)
            for (std::int64_t y = 0; y < s[2]; ++y)
              for (std::int64_t x = 0; x < s[3]; ++x) {
                const T v = gy.at(n, c, y, x) * T(0.25);
                gx.at(n, c, 2 * y, 2 * x) += v;
                gx.at(n, c, 2 * y, 2 * x + 1) += v;
                gx.at(n, c, 2 * y + 1, 2 * x) += v;
                gx.at(n, c, 2 * y + 1, 2 * x + 1) += v;
              }
      },
      "avg_pool_half");
}

template <typename T>
Var max_pool2(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  check_even_spatial("max_pool2", x.shape());
  const auto& s = x.shape();
  Tensor<T> out(Shape{s[0], s[1], s[2] / 2, s[3] / 2});
  // Window cells in row-major order; strict comparison keeps the first maximum.
  auto argmax = [](const Tensor<T>& t, std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t xx) {
    int best = 0;
    T best_v = t.at(n, c, 2 * y, 2 * xx);
    for (int cell = 1; cell < 4; ++cell) {
      const T v = t.at(n, c, 2 * y + cell / 2, 2 * xx + cell % 2);
      if (v > best_v) {
        best_v = v;
        best = cell;
      }
    }
    return best;
  };
  for (std::int64_t n = 0; n < s[0]; ++n)
    for (std::int64_t c = 0; c < s[1]; ++c)
      for (std::int64_t y = 0; y < s[2] / 2; ++y)
        for (std::int64_t xx = 0; xx < s[3] / 2; ++xx) {
          const int cell = argmax(x, n, c, y, xx);
          out.at(n, c, y, xx) = x.at(n, c, 2 * y + cell / 2, 2 * xx + cell % 2);
        }
  return tape.record(
      std::move(out), {input},
      [argmax](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("max_pool2", a.grad_output, scratch);
        const Tensor<T>& x = *a.inputs[0];
        Tensor<T>& gx = *a.grads[0];
        const auto& s = gy.shape();
        for (std::int64_t n = 0; n < s[0]; ++n)
          for (std::int64_t c = 0; c < s[1]; ++c)
            for (std::int64_t y = 0; y < s[2]; ++y)
              for (std::int64_t xx = 0; xx < s[3]; ++xx) {
                const int cell = argmax(x, n, c, y, xx);
                gx.at(n, c, 2 * y + cell / 2, 2 * xx + cell % 2) += gy.at(n, c, y, xx);
              }
      },
      "max_pool2");
}

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  detail::require_rank("global_avg_pool", "input", x.shape(), 4);
  const auto& s = x.shape();
  const std::int64_t area = s[2] * s[3];
  Tensor<T> out(Shape{s[0], s[1], 1, 1});
  for (std::int64_t nc = 0; nc < s[0] * s[1]; ++nc) {
    const T* src = x.ptr() + nc * area;
    out[static_cast<std::size_t>(nc)] = std::accumulate(src, src + area, T{0}) / static_cast<T>(area);
  }
  return tape.record(
      std::move(out), {input},
      [area](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("global_avg_pool", a.grad_output, scratch);
        Tensor<T>& gx = *a.grads[0];
        for (std::size_t nc = 0; nc < gy.size(); ++nc) {
          const T v = gy[nc] / static_cast<T>(area);
          T* dst = gx.ptr() + static_cast<std::int64_t>(nc) * area;
          for (std::int64_t i = 0; i < area; ++i) dst[i] += v;
        }
      },
      "global_avg_pool");
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& x = tape.value(a);
  const Tensor<T>& y = tape.value(b);
  check_same_shape("add", x, y);
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return tape.record(
      std::move(out), {a, b},
      [](const BackwardArgs<T>& args) {
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("add", args.grad_output, scratch);
        for (Tensor<T>* g : args.grads) {
          if (!g) continue;
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += gy[i];
        }
      },
      "add");
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor) {
  Tensor<T> out = tape.value(x);
  for (T& v : out.data()) v *= factor;
  return tape.record(
      std::move(out), {x},
      [factor](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("scale", a.grad_output, scratch);
        for (std::size_t i = 0; i < gy.size(); ++i) (*a.grads[0])[i] += factor * gy[i];
      },
      "scale");
}

template <typename T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_channels: no inputs");
  const Shape& first = tape.value(parts.front()).shape();
  detail::require_rank("concat_channels", "input 0", first, 4);
  std::int64_t channels = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Shape& s = tape.value(parts[i]).shape();
    detail::require_rank("concat_channels", "input " + std::to_string(i), s, 4);
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
      throw InvalidArgument("concat_channels: input " + std::to_string(i) + " has shape " + s.str() +
                            ", incompatible with " + first.str() + " outside the channel dimension");
    }
    channels += s[1];
  }
  const std::int64_t N = first[0], area = first[2] * first[3];
  Tensor<T> out(Shape{N, channels, first[2], first[3]});
  std::int64_t offset = 0;
  for (Var v : parts) {
    const Tensor<T>& t = tape.value(v);
    const std::int64_t c = t.dim(1);
    for (std::int64_t n = 0; n < N; ++n) {
      std::copy_n(t.ptr() + n * c * area, c * area, out.ptr() + (n * channels + offset) * area);
    }
    offset += c;
  }
  return tape.record(
      std::move(out), parts,
      [](const BackwardArgs<T>& a) {
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("concat_channels", a.grad_output, scratch);
        const auto& s = gy.shape();
        const std::int64_t N = s[0], channels = s[1], area = s[2] * s[3];
        std::int64_t offset = 0;
        for (std::size_t i = 0; i < a.inputs.size(); ++i) {
          const std::int64_t c = a.inputs[i]->dim(1);
          if (Tensor<T>* g = a.grads[i]) {
            for (std::int64_t n = 0; n < N; ++n) {
              const T* src = gy.ptr() + (n * channels + offset) * area;
              T* dst = g->ptr() + n * c * area;
              for (std::int64_t j = 0; j < c * area; ++j) dst[j] += src[j];
            }
          }
          offset += c;
        }
      },
      "concat_channels");
}

template <typename T>
Var detach(Tape<T>& tape, Var x) {
  return tape.constant(tape.value(x));
}

template <typename T>
Var flatten(Tape<T>& tape, Var x) {
  const Tensor<T>& v = tape.value(x);
  if (v.shape().rank() < 1) throw InvalidArgument("flatten: input must have a batch dimension");
  const std::int64_t n = v.dim(0);
  Tensor<T> out = v.reshaped(Shape{n, static_cast<std::int64_t>(v.size()) / n});
  return tape.record(
      std::move(out), {x},
      [](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("flatten", a.grad_output, scratch);
        for (std::size_t i = 0; i < gy.size(); ++i) (*a.grads[0])[i] += gy[i];
      },
      "flatten");
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const Tensor<T>& v = tape.value(x);
  const T total = std::accumulate(v.data().begin(), v.data().end(), T{0});
  return tape.record(
      Tensor<T>::scalar(total), {x},
      [](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const T g = detail::upstream("sum", a.grad_output, scratch).item();
        for (T& v : a.grads[0]->data()) v += g;
      },
      "sum");
}

template <typename T>
Var dot(Tape<T>& tape, Var x, const Tensor<T>& weights) {
  const Tensor<T>& v = tape.value(x);
  check_same_shape("dot", v, weights);
  T total{0};
  for (std::size_t i = 0; i < v.size(); ++i) total += v[i] * weights[i];
  return tape.record(
      Tensor<T>::scalar(total), {x},
      [weights](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const T g = detail::upstream("dot", a.grad_output, scratch).item();
        for (std::size_t i = 0; i < weights.size(); ++i) (*a.grads[0])[i] += g * weights[i];
      },
      "dot");
}

template <typename T>
Var subsample_pad_channels(Tape<T>& tape, Var x, int stride, std::int64_t out_channels) {
  const Tensor<T>& v = tape.value(x);
  detail::require_rank("subsample_pad_channels", "input", v.shape(), 4);
  const auto& s = v.shape();
  if (stride < 1) throw InvalidArgument("subsample_pad_channels: stride must be positive");
  if (out_channels < s[1]) {
    throw InvalidArgument("subsample_pad_channels: cannot shrink " + std::to_string(s[1]) + " channels to " +
                          std::to_string(out_channels));
  }
  const std::int64_t ho = (s[2] + stride - 1) / stride, wo = (s[3] + stride - 1) / stride;
  Tensor<T> out(Shape{s[0], out_channels, ho, wo});
  for (std::int64_t n = 0; n < s[0]; ++n)
    for (std::int64_t c = 0; c < s[1]; ++c)
      for (std::int64_t y = 0; y < ho; ++y)
        for (std::int64_t xx = 0; xx < wo; ++xx) out.at(n, c, y, xx) = v.at(n, c, y * stride, xx * stride);
  return tape.record(
      std::move(out), {x},
      [stride](const BackwardArgs<T>& a) {
        if (!a.grads[0]) return;
        Tensor<T> scratch;
        const Tensor<T>& gy = detail::upstream("subsample_pad_channels", a.grad_output, scratch);
        Tensor<T>& gx = *a.grads[0];
        const auto& s = gx.shape();
        for (std::int64_t n = 0; n < s[0]; ++n)
          for (std::int64_t c = 0; c < s[1]; ++c)
            for (std::int64_t y = 0; y < gy.dim(2); ++y)
              for (std::int64_t xx = 0; xx < gy.dim(3); ++xx)
                gx.at(n, c, y * stride, xx * stride) += gy.at(n, c, y, xx);
      },
      "subsample_pad_channels");
}

#define WSMS_INSTANTIATE_OPS(T)                                                                    \
  template Var conv2d<T>(Tape<T>&, Var, Var, std::optional<Var>, int, int);                        \
  template Var avg_pool_half<T>(Tape<T>&, Var);                                                    \
  template Var max_pool2<T>(Tape<T>&, Var);                                                        \
  template Var global_avg_pool<T>(Tape<T>&, Var);                                                  \
  template Var add<T>(Tape<T>&, Var, Var);                                                         \
  template Var scale<T>(Tape<T>&, Var, T);                                                         \
  template Var concat_channels<T>(Tape<T>&, const std::vector<Var>&);                              \
  template Var detach<T>(Tape<T>&, Var);                                                           \
  template Var flatten<T>(Tape<T>&, Var);                                                          \
  template Var sum<T>(Tape<T>&, Var);                                                              \
  template Var dot<T>(Tape<T>&, Var, const Tensor<T>&);                                            \
  template Var subsample_pad_channels<T>(Tape<T>&, Var, int, std::int64_t);                        \
  template Tensor<T> avg_pool_half<T>(const Tensor<T>&);

WSMS_INSTANTIATE_OPS(float)
WSMS_INSTANTIATE_OPS(double)

}  // namespace wsms::ops

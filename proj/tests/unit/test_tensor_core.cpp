// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"
#include "wsms/engine.hpp"
#include "wsms/errors.hpp"
#include "wsms/ops.hpp"
#include "wsms/tape.hpp"

namespace wsms {
namespace {

using testing::max_abs_diff;
using testing::max_relative_error;
using testing::numeric_gradient;
using testing::random_tensor;

// Direct six-loop cross-correlation, independent of the im2col path.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> y(Shape{N, K, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          double s = 0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t a = 0; a < kh; ++a)
              for (std::int64_t b = 0; b < kw; ++b) {
                const auto yy = i * stride - pad + a, xx = j * stride - pad + b;
                if (yy >= 0 && yy < H && xx >= 0 && xx < W) s += x.at(n, c, yy, xx) * w.at(k, c, a, b);
              }
          y.at(n, k, i, j) = s;
        }
  return y;
}

TEST(Shape, NumelAndValidation) {
  EXPECT_EQ(Shape({2, 3, 4}).numel(), 24);
  EXPECT_EQ(Shape().numel(), 1);
  EXPECT_EQ(Shape({2, 3}).str(), "2x3");
  EXPECT_THROW(Shape({2, 0}), InvalidArgument);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), InvalidArgument);
}

TEST(Conv2d, IdentityKernelReproducesInput) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>(Shape{1, 1, 3, 3}, 1.0));
  Var w = t.constant(Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
  const auto& y = t.value(ops::conv2d(t, x, w, std::nullopt, 1, 0));
  EXPECT_EQ(y.shape(), Shape({1, 1, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 1.0);
}

TEST(Conv2d, StemShape) {
  Tape<float> t;
  Var x = t.constant(Tensor<float>(Shape{1, 3, 32, 32}));
  Var w = t.constant(Tensor<float>(Shape{16, 3, 3, 3}));
  EXPECT_EQ(t.value(ops::conv2d(t, x, w, std::nullopt, 1, 1)).shape(), Shape({1, 16, 32, 32}));
}

TEST(Conv2d, MatchesDirectLoops) {
  std::mt19937_64 rng(3);
  for (auto [stride, pad] : {std::pair{1, 1}, {2, 1}, {1, 0}, {2, 0}, {3, 2}}) {
    const auto x = random_tensor(Shape{2, 3, 7, 6}, rng);
    const auto w = random_tensor(Shape{4, 3, 3, 3}, rng);
    Tape<double> t;
    const auto& y = t.value(ops::conv2d(t, t.constant(x), t.constant(w), std::nullopt, stride, pad));
    EXPECT_LT(max_abs_diff(y, naive_conv(x, w, stride, pad)), 1e-12) << "stride " << stride << " pad " << pad;
  }
}

TEST(Conv2d, BiasAddsPerChannel) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>(Shape{1, 1, 2, 2}, 0.0));
  Var w = t.constant(Tensor<double>(Shape{2, 1, 1, 1}, 1.0));
  Var b = t.constant(Tensor<double>(Shape{2}, std::vector<double>{3.0, -1.0}));
  const auto& y = t.value(ops::conv2d(t, x, w, b, 1, 0));
  EXPECT_EQ(y.at(0, 0, 1, 1), 3.0);
  EXPECT_EQ(y.at(0, 1, 0, 0), -1.0);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto x = random_tensor(Shape{2, 4, 6, 6}, rng);
  const auto w = random_tensor(Shape{3, 4, 3, 3}, rng);
  const auto b = random_tensor(Shape{3}, rng);
  const auto proj = random_tensor(Shape{2, 3, 6, 6}, rng);
  auto loss = [&](const Tensor<double>& xv, const Tensor<double>& wv, const Tensor<double>& bv) {
    Tape<double> t;
    return t.value(ops::dot(t, ops::conv2d(t, t.constant(xv), t.constant(wv), t.constant(bv), 1, 1), proj)).item();
  };
  Tape<double> t;
  Var xv = t.leaf(x), wv = t.leaf(w), bv = t.leaf(b);
  t.backward(ops::dot(t, ops::conv2d(t, xv, wv, bv, 1, 1), proj));
  EXPECT_LE(max_relative_error(*t.grad(xv), numeric_gradient([&](const auto& v) { return loss(v, w, b); }, x)), 1e-4);
  EXPECT_LE(max_relative_error(*t.grad(wv), numeric_gradient([&](const auto& v) { return loss(x, v, b); }, w)), 1e-4);
  EXPECT_LE(max_relative_error(*t.grad(bv), numeric_gradient([&](const auto& v) { return loss(x, w, v); }, b)), 1e-4);
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  Tape<float> t;
  Var x = t.constant(Tensor<float>(Shape{1, 3, 8, 8}));
  Var w = t.constant(Tensor<float>(Shape{4, 2, 3, 3}));
  try {
    ops::conv2d(t, x, w, std::nullopt, 1, 1);
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("input channel dimension (dim 1)"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, NonPositiveOutputExtentRejected) {
  Tape<float> t;
  Var x = t.constant(Tensor<float>(Shape{1, 1, 2, 2}));
  Var w = t.constant(Tensor<float>(Shape{1, 1, 5, 5}));
  EXPECT_THROW(ops::conv2d(t, x, w, std::nullopt, 1, 0), InvalidArgument);
  EXPECT_THROW(ops::conv2d(t, x, w, std::nullopt, 0, 2), InvalidArgument);
}

TEST(Conv2d, ShapeAlgebraProperty) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> d(1, 9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t H = d(rng), W = d(rng), k = std::uniform_int_distribution<int>(1, 3)(rng);
    const int stride = std::uniform_int_distribution<int>(1, 3)(rng);
    const int pad = std::uniform_int_distribution<int>(0, 2)(rng);
    const std::int64_t ho = (H + 2 * pad - k) / stride + 1, wo = (W + 2 * pad - k) / stride + 1;
    Tape<float> t;
    Var x = t.constant(Tensor<float>(Shape{1, 2, H, W}));
    Var w = t.constant(Tensor<float>(Shape{3, 2, k, k}));
    if (H + 2 * pad < k || W + 2 * pad < k) {
      EXPECT_THROW(ops::conv2d(t, x, w, std::nullopt, stride, pad), InvalidArgument);
      continue;
    }
    EXPECT_EQ(t.value(ops::conv2d(t, x, w, std::nullopt, stride, pad)).shape(), Shape({1, 3, ho, wo}));
    EXPECT_EQ(ops::conv_out_extent(H, k, stride, pad), ho);
    if (H % 2 == 0 && W % 2 == 0) {
      EXPECT_EQ(t.value(ops::avg_pool_half(t, x)).shape(), Shape({1, 2, H / 2, W / 2}));
      EXPECT_EQ(t.value(ops::max_pool2(t, x)).shape(), Shape({1, 2, H / 2, W / 2}));
    }
  }
}

TEST(Conv2d, DeterministicAcrossRunsAndThreadCounts) {
  std::mt19937_64 rng(8);
  const auto x = random_tensor<float>(Shape{9, 4, 10, 10}, rng);
  const auto w = random_tensor<float>(Shape{5, 4, 3, 3}, rng);
  auto run = [&](int threads) {
    engine::set_threads(threads);
    Tape<float> t;
    Var xv = t.leaf(x), wv = t.leaf(w);
    Var y = ops::conv2d(t, xv, wv, std::nullopt, 1, 1);
    t.backward(ops::sum(t, y));
    std::vector<float> out(t.value(y).data().begin(), t.value(y).data().end());
    out.insert(out.end(), t.grad(wv)->data().begin(), t.grad(wv)->data().end());
    out.insert(out.end(), t.grad(xv)->data().begin(), t.grad(xv)->data().end());
    return out;
  };
  const auto a = run(1);
  EXPECT_EQ(a, run(1));
  EXPECT_EQ(a, run(3));
  engine::set_threads(1);
}

TEST(AvgPoolHalf, Examples) {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  Var y = ops::avg_pool_half(t, x);
  EXPECT_DOUBLE_EQ(t.value(y).item(), 2.5);
  t.backward(ops::sum(t, y));
  for (double g : t.grad(x)->data()) EXPECT_DOUBLE_EQ(g, 0.25);

  EXPECT_EQ(ops::avg_pool_half(Tensor<float>(Shape{1, 3, 32, 32})).shape(), Shape({1, 3, 16, 16}));
  const auto c = ops::avg_pool_half(Tensor<double>(Shape{2, 2, 4, 6}, 0.7));
  for (double v : c.data()) EXPECT_DOUBLE_EQ(v, 0.7);
  EXPECT_THROW(ops::avg_pool_half(Tensor<double>(Shape{1, 1, 3, 4})), InvalidArgument);
}

TEST(MaxPool2, MaxAndTieRouting) {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(t.value(ops::max_pool2(t, x)).item(), 4.0);

  Tape<double> t2;
  Var tie = t2.leaf(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{5, 5, 5, 5}));
  t2.backward(ops::sum(t2, ops::max_pool2(t2, tie)));
  EXPECT_EQ(t2.grad(tie)->data()[0], 1.0);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(t2.grad(tie)->data()[i], 0.0);

  Tape<double> t3;
  EXPECT_THROW(ops::max_pool2(t3, t3.constant(Tensor<double>(Shape{1, 1, 4, 5}))), InvalidArgument);
}

TEST(GlobalAvgPool, ShapeAndUniformGradient) {
  Tape<double> t;
  std::mt19937_64 rng(1);
  Var x = t.leaf(random_tensor(Shape{1, 64, 8, 8}, rng));
  Var y = ops::global_avg_pool(t, x);
  EXPECT_EQ(t.value(y).shape(), Shape({1, 64, 1, 1}));
  t.backward(ops::sum(t, y));
  for (double g : t.grad(x)->data()) EXPECT_DOUBLE_EQ(g, 1.0 / 64.0);
}

TEST(Backward, RepeatedParameterSumsGradient) {
  Tensor<double> p(Shape{}, std::vector<double>{3.0});
  Tape<double> t;
  Var a = t.param(ParamId{7}, p);
  Var b = t.param(ParamId{7}, p);
  const GradMap<double> g = t.backward(ops::add(t, a, b));
  ASSERT_EQ(g.count(ParamId{7}), 1u);
  EXPECT_EQ(g.at(ParamId{7}).item(), 2.0);
}

TEST(Backward, SharedConvWeightGetsSumOfBranchGradients) {
  std::mt19937_64 rng(21);
  const auto x1 = random_tensor(Shape{2, 3, 5, 5}, rng);
  const auto x2 = random_tensor(Shape{2, 3, 4, 4}, rng);
  const auto w = random_tensor(Shape{4, 3, 3, 3}, rng);
  const ParamId id{0};
  auto grad = [&](bool use1, bool use2) {
    Tape<double> t;
    std::vector<Var> terms;
    if (use1) terms.push_back(ops::sum(t, ops::conv2d(t, t.constant(x1), t.param(id, w), std::nullopt, 1, 1)));
    if (use2) terms.push_back(ops::sum(t, ops::conv2d(t, t.constant(x2), t.param(id, w), std::nullopt, 1, 1)));
    Var loss = terms.size() == 2 ? ops::add(t, terms[0], terms[1]) : terms[0];
    return t.backward(loss).at(id);
  };
  const auto both = grad(true, true), one = grad(true, false), two = grad(false, true);
  Tensor<double> summed(w.shape());
  for (std::size_t i = 0; i < summed.size(); ++i) summed[i] = one[i] + two[i];
  EXPECT_LE(max_abs_diff(both, summed), 1e-12);
}

TEST(Backward, ErrorsAndReachability) {
  Tape<double> t;
  Tensor<double> used(Shape{2}, 1.0), unused(Shape{2}, 1.0);
  Var a = t.param(ParamId{1}, used);
  t.param(ParamId{2}, unused);
  Var s = ops::sum(t, a);
  EXPECT_THROW(t.backward(a), InvalidArgument);
  Tape<double> other;
  Var foreign = other.constant(Tensor<double>::scalar(1.0));
  EXPECT_THROW(t.backward(foreign), InvalidState);
  const auto g = t.backward(s);
  EXPECT_EQ(g.count(ParamId{1}), 1u);
  EXPECT_EQ(g.count(ParamId{2}), 0u);
}

TEST(Ops, ConcatAddSubsample) {
  Tape<double> t;
  Var a = t.constant(Tensor<double>(Shape{1, 1, 2, 2}, 1.0));
  Var b = t.constant(Tensor<double>(Shape{1, 2, 2, 2}, 2.0));
  const auto& c = t.value(ops::concat_channels(t, {a, b}));
  EXPECT_EQ(c.shape(), Shape({1, 3, 2, 2}));
  EXPECT_EQ(c.at(0, 0, 1, 1), 1.0);
  EXPECT_EQ(c.at(0, 2, 0, 0), 2.0);
  EXPECT_THROW(ops::concat_channels(t, {a, t.constant(Tensor<double>(Shape{1, 1, 3, 3}))}), InvalidArgument);
  EXPECT_THROW(ops::add(t, a, b), InvalidArgument);

  Tensor<double> x(Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const auto& s = t.value(ops::subsample_pad_channels(t, t.constant(x), 2, 3));
  EXPECT_EQ(s.shape(), Shape({1, 3, 2, 2}));
  EXPECT_EQ(s.at(0, 0, 0, 0), 0.0);
  EXPECT_EQ(s.at(0, 0, 0, 1), 2.0);
  EXPECT_EQ(s.at(0, 0, 1, 0), 8.0);
  EXPECT_EQ(s.at(0, 1, 1, 1), 0.0);
}

TEST(Ops, DetachBlocksGradient) {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>(Shape{2}, 1.0));
  t.backward(ops::add(t, ops::sum(t, x), ops::sum(t, ops::detach(t, ops::scale(t, x, 5.0)))));
  for (double g : t.grad(x)->data()) EXPECT_EQ(g, 1.0);
}

// Random compositions of unary/binary primitives up to depth 6.
TEST(Backward, RandomComposedGraphsMatchFiniteDifferences) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 25; ++trial) {
    const int depth = std::uniform_int_distribution<int>(1, 6)(rng);
    std::vector<int> ops_chosen;
    for (int d = 0; d < depth; ++d) ops_chosen.push_back(std::uniform_int_distribution<int>(0, 4)(rng));
    const auto w = random_tensor(Shape{2, 2, 3, 3}, rng);
    const auto x = random_tensor(Shape{2, 2, 8, 8}, rng);
    auto build = [&](Tape<double>& t, Var v) {
      for (int op : ops_chosen) {
        const auto& s = t.value(v).shape();
        switch (op) {
          case 0: v = ops::conv2d(t, v, t.constant(w), std::nullopt, 1, 1); break;
          case 1: v = s[2] % 2 == 0 ? ops::avg_pool_half(t, v) : ops::scale(t, v, 0.5); break;
          case 2: v = ops::add(t, v, ops::scale(t, v, -0.3)); break;
          case 3: v = ops::concat_channels(t, {v, v}); v = ops::conv2d(t, v, t.constant(Tensor<double>(Shape{2, 4, 1, 1}, 0.4)), std::nullopt, 1, 0); break;
          default: v = s[2] % 2 == 0 ? ops::max_pool2(t, v) : ops::scale(t, v, 1.5); break;
        }
      }
      return ops::sum(t, ops::scale(t, ops::global_avg_pool(t, v), 3.0));
    };
    Tape<double> t;
    Var xv = t.leaf(x);
    t.backward(build(t, xv));
    const auto numeric = numeric_gradient(
        [&](const Tensor<double>& v) {
          Tape<double> tt;
          return tt.value(build(tt, tt.constant(v))).item();
        },
        x);
    EXPECT_LE(max_relative_error(*t.grad(xv), numeric, 1e-6), 1e-4) << "trial " << trial;
  }
}

}  // namespace
}  // namespace wsms

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_support.hpp"
#include "wsms/backbones.hpp"
#include "wsms/cost_model.hpp"
#include "wsms/errors.hpp"
#include "wsms/ops.hpp"

namespace wsms {
namespace {

using testing::random_tensor;

ResidualUnit make_unit(ParamStore<double>& store, std::mt19937_64& rng, std::int64_t in, std::int64_t out,
                       int stride) {
  auto part = instantiate<double>(BlockSpec{BlockKind::ResidualCompartment, in, out, stride, 1, 0, false}, store, rng,
                                  "c");
  return std::get<ResidualCompartment>(part).units.front();
}

TEST(ResidualBlock, ParameterCountAndShape) {
  ParamStore<float> store;
  std::mt19937_64 rng(1);
  auto part = instantiate<float>(BlockSpec{BlockKind::ResidualCompartment, 16, 16, 1, 1, 0, false}, store, rng, "c");
  EXPECT_EQ(store.scalar_count(), 4672u);
  Tape<float> t;
  const auto& y = t.value(block_forward(t, t.constant(Tensor<float>(Shape{1, 16, 32, 32}, 0.5f)), part, store,
                                        Mode::Train));
  EXPECT_EQ(y.shape(), Shape({1, 16, 32, 32}));
}

TEST(ResidualBlock, ZeroResidualPathIsReluOfShortcut) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    ParamStore<double> store;
    const auto unit = make_unit(store, rng, 4, 4, 1);
    // gamma = beta = 0 on the second BN forces F(x) = 0 exactly.
    store.value(unit.bn2.gamma).fill(0.0);
    store.value(unit.bn2.beta).fill(0.0);
    const auto x = random_tensor(Shape{2, 4, 6, 6}, rng);
    Tape<double> t;
    const auto& y = t.value(residual_block(t, t.constant(x), unit, store, Mode::Train));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], std::max(x[i], 0.0));
  }
}

TEST(ResidualBlock, DownsamplingShortcutAndChannelCheck) {
  std::mt19937_64 rng(3);
  ParamStore<double> store;
  const auto unit = make_unit(store, rng, 4, 8, 2);
  store.value(unit.bn2.gamma).fill(0.0);
  store.value(unit.bn2.beta).fill(0.0);
  const auto x = random_tensor(Shape{1, 4, 6, 6}, rng);
  Tape<double> t;
  const auto& y = t.value(residual_block(t, t.constant(x), unit, store, Mode::Train));
  EXPECT_EQ(y.shape(), Shape({1, 8, 3, 3}));
  EXPECT_EQ(y.at(0, 1, 1, 2), std::max(x.at(0, 1, 2, 4), 0.0));
  EXPECT_EQ(y.at(0, 6, 2, 2), 0.0);
  EXPECT_THROW(residual_block(t, t.constant(Tensor<double>(Shape{1, 3, 6, 6})), unit, store, Mode::Train),
               InvalidArgument);
}

TEST(BuildResnet, DepthsCountsAndShapes) {
  EXPECT_EQ(build_resnet(18, 10).depth(), 110);
  EXPECT_EQ(build_resnet(19, 10).depth(), 116);
  EXPECT_EQ(build_resnet(1, 10).depth(), 8);
  EXPECT_EQ(format_millions(count_params(build_resnet(18, 10)).total_params), "1.73M");
  const double n19 = static_cast<double>(count_params(build_resnet(19, 10)).total_params) / 1e6;
  EXPECT_NEAR(n19, 1.82, 0.02 * 1.82);
  EXPECT_THROW(build_resnet(0, 10), InvalidArgument);

  auto model = instantiate_backbone<float>(build_resnet(1, 10), 7);
  Tape<float> t;
  Var h = stem_forward(t, t.constant(Tensor<float>(Shape{2, 3, 32, 32}, 0.1f)), model.stem, model.params, Mode::Eval);
  const std::int64_t extents[] = {32, 16, 8};
  for (std::size_t b = 0; b < 3; ++b) {
    h = block_forward(t, h, model.blocks[b], model.params, Mode::Eval);
    EXPECT_EQ(t.value(h).shape(), Shape({2, 16 << b, extents[b], extents[b]}));
  }
}

TEST(DenseBlock, ChannelCountsAndParams) {
  std::mt19937_64 rng(4);
  ParamStore<float> store;
  auto part = instantiate<float>(BlockSpec{BlockKind::DenseBlock, 16, 784, 1, 32, 24, false}, store, rng, "d");
  std::uint64_t expected = 0;
  for (std::uint64_t l = 0; l < 32; ++l) expected += (16 + 24 * l) * 24 * 9;
  EXPECT_EQ(expected, 2681856u);
  EXPECT_EQ(store.scalar_count(ParamRole::ConvWeight), expected);
  Tape<float> t;
  EXPECT_EQ(t.value(block_forward(t, t.constant(Tensor<float>(Shape{1, 16, 4, 4}, 1.0f)), part, store, Mode::Train))
                .shape(),
            Shape({1, 784, 4, 4}));

  ParamStore<float> one;
  auto single = instantiate<float>(BlockSpec{BlockKind::DenseBlock, 5, 8, 1, 1, 3, false}, one, rng, "d");
  Tape<float> u;
  EXPECT_EQ(u.value(block_forward(u, u.constant(Tensor<float>(Shape{1, 5, 4, 4})), single, one, Mode::Train))
                .shape(),
            Shape({1, 8, 4, 4}));
  EXPECT_THROW(block_forward(u, u.constant(Tensor<float>(Shape{1, 4, 4, 4})), single, one, Mode::Train),
               InvalidArgument);
}

TEST(DenseBlock, DroppingLastLayerReproducesShorterBlock) {
  std::mt19937_64 rng(5);
  ParamStore<double> store;
  auto full = std::get<DenseBlockUnit>(
      instantiate<double>(BlockSpec{BlockKind::DenseBlock, 3, 3 + 4 * 2, 1, 4, 2, false}, store, rng, "d"));
  DenseBlockUnit shorter = full;
  shorter.layers.pop_back();
  const auto x = random_tensor(Shape{2, 3, 5, 5}, rng);
  Tape<double> t;
  const auto& a = t.value(dense_block(t, t.constant(x), full, store, Mode::Eval));
  const auto& b = t.value(dense_block(t, t.constant(x), shorter, store, Mode::Eval));
  ASSERT_EQ(b.shape(), Shape({2, 9, 5, 5}));
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 9; ++c)
      for (std::int64_t i = 0; i < 25; ++i) EXPECT_EQ(a.at(n, c, i / 5, i % 5), b.at(n, c, i / 5, i % 5));
}

TEST(Transition, ShapeParamsAndIdentityConv) {
  std::mt19937_64 rng(6);
  ParamStore<float> store;
  auto part = instantiate<float>(BlockSpec{BlockKind::Transition, 784, 784, 1, 1, 0, false}, store, rng, "t");
  EXPECT_EQ(store.scalar_count(), 784u * 784u + 2u * 784u);
  Tape<float> t;
  EXPECT_EQ(t.value(block_forward(t, t.constant(Tensor<float>(Shape{1, 784, 32, 32})), part, store, Mode::Eval))
                .shape(),
            Shape({1, 784, 16, 16}));

  // Identity 1x1 conv: output is the pooled BN-ReLU of the input.
  ParamStore<double> small;
  auto unit = std::get<TransitionUnit>(
      instantiate<double>(BlockSpec{BlockKind::Transition, 3, 3, 1, 1, 0, false}, small, rng, "t"));
  auto& w = small.value(unit.conv.weight);
  w.fill(0.0);
  for (int c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.0;
  const auto x = random_tensor(Shape{1, 3, 4, 4}, rng);
  Tape<double> td;
  const auto& y = td.value(transition(td, td.constant(x), unit, small, Mode::Eval));
  Tensor<double> expect = x;
  for (double& v : expect.data()) v = std::max(v / std::sqrt(1.0 + kBatchNormEpsilon), 0.0);
  EXPECT_LE(testing::max_abs_diff(y, ops::avg_pool_half(expect)), 1e-12);
  EXPECT_THROW(transition(td, td.constant(Tensor<double>(Shape{1, 3, 3, 4})), unit, small, Mode::Eval),
               InvalidArgument);
}

TEST(BuildDensenet, ChannelsAndCounts) {
  const auto k24 = build_densenet(24, 10);
  EXPECT_EQ(k24.out_channels(), 2320);
  EXPECT_EQ(k24.channels_after(1), 784);
  EXPECT_EQ(k24.channels_after(2), 1552);
  EXPECT_EQ(format_millions(count_params(k24).total_params), "27.2M");
  EXPECT_EQ(format_millions(count_params(build_densenet(26, 10)).total_params), "31.9M");
  const auto tiny = build_densenet(1, 10, 2);
  EXPECT_EQ(tiny.channels_after(1), 18);
  EXPECT_EQ(tiny.channels_after(2), 20);
  EXPECT_EQ(tiny.channels_after(3), 22);
}

TEST(Backbones, DeclaredShapesMatchMeasuredShapes) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 6; ++trial) {
    const bool dense = trial % 2 == 1;
    const auto spec = dense ? build_densenet(1 + trial / 2, 3, 1 + trial / 2, 4)
                            : build_resnet(1 + trial / 2, 4, std::int64_t{2} << (trial / 2));
    auto model = instantiate_backbone<float>(spec, static_cast<std::uint64_t>(trial));
    Tape<float> t;
    std::int64_t extent = 16;
    Var h = stem_forward(t, t.constant(random_tensor<float>(Shape{2, 3, 16, 16}, rng)), model.stem, model.params,
                         Mode::Train);
    EXPECT_EQ(t.value(h).dim(1), spec.channels_after(0));
    for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
      h = block_forward(t, h, model.blocks[b], model.params, Mode::Train);
      extent /= spec.blocks[b].downsample();
      EXPECT_EQ(t.value(h).shape(), Shape({2, spec.channels_after(b + 1), extent, extent}));
    }
    EXPECT_EQ(t.value(backbone_forward(t, model, t.constant(Tensor<float>(Shape{1, 3, 16, 16})), Mode::Eval)).shape(),
              Shape({1, spec.head.class_count}));
  }
}

TEST(Backbones, InstantiatedCountEqualsCostModel) {
  for (const auto& spec : {build_resnet(18, 10), build_resnet(3, 100), build_densenet(24, 10), build_densenet(2, 7, 3)}) {
    const auto model = instantiate_backbone<float>(spec, 1);
    EXPECT_EQ(model.params.scalar_count(), count_params(spec).total_params);
    EXPECT_EQ(model.params.scalar_count(ParamRole::BatchNorm), count_params(spec).bn_params);
  }
}

TEST(Backbones, ValidateRejectsBrokenChains) {
  auto spec = build_resnet(2, 10);
  spec.blocks[1].parts[0].in_channels = 8;
  EXPECT_THROW(validate(spec), InvalidArgument);
  auto dense = build_densenet(4, 10, 2);
  dense.blocks[0].parts[0].out_channels += 1;
  EXPECT_THROW(validate(dense), InvalidArgument);
}

}  // namespace
}  // namespace wsms

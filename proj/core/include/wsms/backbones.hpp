// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "wsms/layers.hpp"
#include "wsms/param_store.hpp"
#include "wsms/tape.hpp"

namespace wsms {

enum class BackboneKind { ResNet, DenseNet };
enum class BlockKind { StemConv, ResidualCompartment, DenseBlock, Transition };

std::string to_string(BackboneKind kind);
std::string to_string(BlockKind kind);

// Declarative description of one backbone segment.
//   StemConv             3x3 conv in -> out, optionally followed by BN + ReLU.
//   ResidualCompartment  `units` residual blocks; the first has stride `stride`
//                        and maps in -> out channels, the rest keep out channels.
//   DenseBlock           `units` BN-ReLU-conv3x3 layers each adding `growth`
//                        channels to the running concatenation.
//   Transition           BN-ReLU-conv1x1 (channel preserving) then 2x2 average pool.
struct BlockSpec {
  BlockKind kind = BlockKind::StemConv;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  int stride = 1;
  int units = 1;
  std::int64_t growth = 0;
  bool bn_relu = false;

  // Spatial reduction factor applied by this segment (1 or 2).
  int downsample() const { return kind == BlockKind::Transition ? 2 : stride; }
};

// A pooling-delimited convolution block: the unit that multi-stage wrapping
// truncates and shares. DenseNet blocks after the first start with their transition.
struct ConvBlock {
  std::vector<BlockSpec> parts;

  std::int64_t in_channels() const { return parts.front().in_channels; }
  std::int64_t out_channels() const { return parts.back().out_channels; }
  int downsample() const;
};

struct HeadSpec {
  bool final_bn_relu = false;  // applied at the end of the feature extractor
  std::int64_t class_count = 10;
};

struct BackboneSpec {
  BackboneKind kind = BackboneKind::ResNet;
  std::int64_t input_channels = 3;
  BlockSpec stem;
  std::vector<ConvBlock> blocks;
  HeadSpec head;

  // Channels leaving the first `count` blocks (the stem when count == 0).
  std::int64_t channels_after(std::size_t count) const;
  std::int64_t out_channels() const { return channels_after(blocks.size()); }
  // Weighted layers: convolutions plus the final fully connected layer.
  int depth() const;
};

// CIFAR-style ResNet of depth 6n + 2: stem conv to `width` channels and three
// compartments of n residual blocks at width, 2 width and 4 width.
BackboneSpec build_resnet(int n_per_compartment, std::int64_t class_count, std::int64_t width = 16);

// Three dense blocks of `layers_per_block` layers with growth rate k, separated by
// transitions, after a 3x3 stem conv to `stem_channels`.
BackboneSpec build_densenet(std::int64_t growth, std::int64_t class_count, int layers_per_block = 32,
                            std::int64_t stem_channels = 16);

// Checks channel chaining, strides and counts; throws InvalidArgument.
void validate(const BackboneSpec& spec);

// ---------------------------------------------------------------------------
// Instantiated blocks: the same structure bound to parameters in a ParamStore.

struct ConvSite {
  ParamId weight;
  std::optional<ParamId> bias;
  int stride = 1;
  int padding = 0;
};

struct StemUnit {
  ConvSite conv;
  std::optional<BatchNormState> bn;
};

struct ResidualUnit {
  ConvSite conv1;
  BatchNormState bn1;
  ConvSite conv2;
  BatchNormState bn2;
  int stride = 1;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
};

struct ResidualCompartment {
  std::vector<ResidualUnit> units;
};

struct DenseLayerUnit {
  BatchNormState bn;
  ConvSite conv;
};

struct DenseBlockUnit {
  std::int64_t in_channels = 0;
  std::int64_t growth = 0;
  std::vector<DenseLayerUnit> layers;
};

struct TransitionUnit {
  BatchNormState bn;
  ConvSite conv;
};

using PartInstance = std::variant<StemUnit, ResidualCompartment, DenseBlockUnit, TransitionUnit>;

struct BlockInstance {
  std::vector<PartInstance> parts;
};

// Allocates a He-initialised bias-free conv weight.
template <typename T>
ConvSite make_conv(ParamStore<T>& store, std::mt19937_64& rng, const std::string& name, std::int64_t in,
                   std::int64_t out, int kernel, int stride, int padding);

template <typename T>
PartInstance instantiate(const BlockSpec& spec, ParamStore<T>& store, std::mt19937_64& rng, const std::string& path);

template <typename T>
BlockInstance instantiate(const ConvBlock& spec, ParamStore<T>& store, std::mt19937_64& rng,
                          const std::string& path);

// Replaces every batch-norm site with freshly allocated state, keeping the
// convolution ParamIds. This is how a shared copy of a block is made.
template <typename T>
void rebind_batch_norm(PartInstance& part, ParamStore<T>& store, const std::string& path);

template <typename T>
void rebind_batch_norm(BlockInstance& block, ParamStore<T>& store, const std::string& path);

template <typename T>
Var conv(Tape<T>& tape, Var x, const ConvSite& site, ParamStore<T>& store);

template <typename T>
Var stem_forward(Tape<T>& tape, Var x, const StemUnit& stem, ParamStore<T>& store, Mode mode);

// y = ReLU(F(x) + shortcut(x)) with F = conv3x3-BN-ReLU-conv3x3-BN. The
// shortcut is identity, or stride subsampling with zero-filled extra channels.
template <typename T>
Var residual_block(Tape<T>& tape, Var x, const ResidualUnit& unit, ParamStore<T>& store, Mode mode);

// Each layer sees the concatenation of the block input and all earlier layer outputs.
template <typename T>
Var dense_block(Tape<T>& tape, Var x, const DenseBlockUnit& block, ParamStore<T>& store, Mode mode);

template <typename T>
Var transition(Tape<T>& tape, Var x, const TransitionUnit& unit, ParamStore<T>& store, Mode mode);

template <typename T>
Var block_forward(Tape<T>& tape, Var x, const PartInstance& part, ParamStore<T>& store, Mode mode);

template <typename T>
Var block_forward(Tape<T>& tape, Var x, const BlockInstance& block, ParamStore<T>& store, Mode mode);

// A plain (single-pathway) backbone with its classifier head.
template <typename T>
struct BackboneModel {
  BackboneSpec spec;
  ParamStore<T> params;
  StemUnit stem;
  std::vector<BlockInstance> blocks;
  std::optional<BatchNormState> final_bn;
  ParamId fc_weight;
  ParamId fc_bias;
};

template <typename T>
BackboneModel<T> instantiate_backbone(const BackboneSpec& spec, std::uint64_t seed);

// Feature map before global pooling.
template <typename T>
Var backbone_features(Tape<T>& tape, BackboneModel<T>& model, Var x, Mode mode);

template <typename T>
Var backbone_forward(Tape<T>& tape, BackboneModel<T>& model, Var x, Mode mode);

// Global average pool, flatten, fully connected layer.
template <typename T>
Var classifier_head(Tape<T>& tape, Var features, ParamId weight, ParamId bias, ParamStore<T>& store);

}  // namespace wsms

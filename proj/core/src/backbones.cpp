// SPDX-License-Identifier: Apache-2.0
#include "wsms/backbones.hpp"

#include "wsms/errors.hpp"
#include "wsms/ops.hpp"

namespace wsms {

std::string to_string(BackboneKind kind) { return kind == BackboneKind::ResNet ? "resnet" : "densenet"; }

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::StemConv: return "stem";
    case BlockKind::ResidualCompartment: return "compartment";
    case BlockKind::DenseBlock: return "dense";
    case BlockKind::Transition: return "transition";
  }
  return "unknown";
}

int ConvBlock::downsample() const {
  int f = 1;
  for (const auto& p : parts) f *= p.downsample();
  return f;
}

std::int64_t BackboneSpec::channels_after(std::size_t count) const {
  if (count > blocks.size()) throw InvalidArgument("backbone has only " + std::to_string(blocks.size()) + " blocks");
  return count == 0 ? stem.out_channels : blocks[count - 1].out_channels();
}

int BackboneSpec::depth() const {
  int d = 1;  // stem
  for (const auto& b : blocks) {
    for (const auto& p : b.parts) {
      switch (p.kind) {
        case BlockKind::ResidualCompartment: d += 2 * p.units; break;
        case BlockKind::DenseBlock: d += p.units; break;
        case BlockKind::Transition: d += 1; break;
        case BlockKind::StemConv: d += 1; break;
      }
    }
  }
  return d + 1;  // classifier
}

BackboneSpec build_resnet(int n, std::int64_t class_count, std::int64_t width) {
  if (n < 1) throw InvalidArgument("build_resnet: blocks per compartment must be >= 1, got " + std::to_string(n));
  if (width < 1) throw InvalidArgument("build_resnet: width must be >= 1");
  if (class_count < 1) throw InvalidArgument("build_resnet: class_count must be >= 1");
  BackboneSpec s;
  s.kind = BackboneKind::ResNet;
  s.stem = BlockSpec{BlockKind::StemConv, 3, width, 1, 1, 0, true};
  std::int64_t in = width;
  for (int c = 0; c < 3; ++c) {
    const std::int64_t out = width << c;
    s.blocks.push_back(ConvBlock{{BlockSpec{BlockKind::ResidualCompartment, in, out, c == 0 ? 1 : 2, n, 0, false}}});
    in = out;
  }
  s.head = HeadSpec{false, class_count};
  return s;
}

BackboneSpec build_densenet(std::int64_t growth, std::int64_t class_count, int layers, std::int64_t stem_channels) {
  if (growth < 1) throw InvalidArgument("build_densenet: growth rate must be >= 1");
  if (layers < 1) throw InvalidArgument("build_densenet: layers per block must be >= 1");
  if (class_count < 1) throw InvalidArgument("build_densenet: class_count must be >= 1");
  BackboneSpec s;
  s.kind = BackboneKind::DenseNet;
  s.stem = BlockSpec{BlockKind::StemConv, 3, stem_channels, 1, 1, 0, false};
  std::int64_t c = stem_channels;
  for (int b = 0; b < 3; ++b) {
    ConvBlock block;
    if (b > 0) block.parts.push_back(BlockSpec{BlockKind::Transition, c, c, 1, 1, 0, false});
    const std::int64_t out = c + growth * layers;
    block.parts.push_back(BlockSpec{BlockKind::DenseBlock, c, out, 1, layers, growth, false});
    c = out;
    s.blocks.push_back(std::move(block));
  }
  s.head = HeadSpec{true, class_count};
  return s;
}

void validate(const BackboneSpec& spec) {
  if (spec.stem.kind != BlockKind::StemConv) throw InvalidArgument("backbone stem must be a stem conv");
  if (spec.stem.in_channels != spec.input_channels) {
    throw InvalidArgument("stem expects " + std::to_string(spec.stem.in_channels) + " input channels, image has " +
                          std::to_string(spec.input_channels));
  }
  if (spec.blocks.empty()) throw InvalidArgument("backbone has no convolution blocks");
  if (spec.head.class_count < 1) throw InvalidArgument("class_count must be >= 1");
  std::int64_t c = spec.stem.out_channels;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    if (spec.blocks[b].parts.empty()) throw InvalidArgument("block " + std::to_string(b + 1) + " is empty");
    for (const auto& p : spec.blocks[b].parts) {
      const std::string where = "block " + std::to_string(b + 1) + " (" + to_string(p.kind) + ")";
      if (p.in_channels != c) {
        throw InvalidArgument(where + " expects " + std::to_string(p.in_channels) + " channels but receives " +
                              std::to_string(c));
      }
      if (p.units < 1) throw InvalidArgument(where + " needs at least one unit");
      if (p.stride != 1 && p.stride != 2) throw InvalidArgument(where + " stride must be 1 or 2");
      switch (p.kind) {
        case BlockKind::DenseBlock:
          if (p.growth < 1 || p.out_channels != p.in_channels + p.growth * p.units) {
            throw InvalidArgument(where + " declares " + std::to_string(p.out_channels) +
                                  " output channels, inconsistent with growth and layer count");
          }
          break;
        case BlockKind::Transition:
          if (p.out_channels != p.in_channels) throw InvalidArgument(where + " must preserve channels");
          break;
        case BlockKind::ResidualCompartment:
          if (p.out_channels < p.in_channels) throw InvalidArgument(where + " cannot reduce channels");
          if (p.stride == 1 && p.out_channels != p.in_channels) {
            throw InvalidArgument(where + " changes channels without downsampling");
          }
          break;
        case BlockKind::StemConv: throw InvalidArgument(where + " stem conv inside a block");
      }
      c = p.out_channels;
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
ConvSite make_conv(ParamStore<T>& store, std::mt19937_64& rng, const std::string& name, std::int64_t in,
                   std::int64_t out, int kernel, int stride, int padding) {
  const Shape shape{out, in, kernel, kernel};
  ConvSite site;
  site.weight = store.add(name, ParamRole::ConvWeight, he_init<T>(shape, in * kernel * kernel, rng));
  site.stride = stride;
  site.padding = padding;
  return site;
}

template <typename T>
PartInstance instantiate(const BlockSpec& spec, ParamStore<T>& store, std::mt19937_64& rng,
                         const std::string& path) {
  switch (spec.kind) {
    case BlockKind::StemConv: {
      StemUnit stem;
      stem.conv = make_conv(store, rng, path + ".conv", spec.in_channels, spec.out_channels, 3, 1, 1);
      if (spec.bn_relu) stem.bn = make_batch_norm(store, path + ".bn", spec.out_channels);
      return stem;
    }
    case BlockKind::ResidualCompartment: {
      ResidualCompartment comp;
      for (int i = 0; i < spec.units; ++i) {
        const std::string p = path + ".res" + std::to_string(i + 1);
        ResidualUnit u;
        u.in_channels = i == 0 ? spec.in_channels : spec.out_channels;
        u.out_channels = spec.out_channels;
        u.stride = i == 0 ? spec.stride : 1;
        u.conv1 = make_conv(store, rng, p + ".conv1", u.in_channels, u.out_channels, 3, u.stride, 1);
        u.bn1 = make_batch_norm(store, p + ".bn1", u.out_channels);
        u.conv2 = make_conv(store, rng, p + ".conv2", u.out_channels, u.out_channels, 3, 1, 1);
        u.bn2 = make_batch_norm(store, p + ".bn2", u.out_channels);
        comp.units.push_back(u);
      }
      return comp;
    }
    case BlockKind::DenseBlock: {
      DenseBlockUnit block;
      block.in_channels = spec.in_channels;
      block.growth = spec.growth;
      std::int64_t c = spec.in_channels;
      for (int i = 0; i < spec.units; ++i) {
        const std::string p = path + ".layer" + std::to_string(i + 1);
        DenseLayerUnit layer;
        layer.bn = make_batch_norm(store, p + ".bn", c);
        layer.conv = make_conv(store, rng, p + ".conv", c, spec.growth, 3, 1, 1);
        block.layers.push_back(layer);
        c += spec.growth;
      }
      return block;
    }
    case BlockKind::Transition: {
      TransitionUnit t;
      t.bn = make_batch_norm(store, path + ".bn", spec.in_channels);
      t.conv = make_conv(store, rng, path + ".conv", spec.in_channels, spec.out_channels, 1, 1, 0);
      return t;
    }
  }
  throw InvalidArgument("unknown block kind");
}

template <typename T>
BlockInstance instantiate(const ConvBlock& spec, ParamStore<T>& store, std::mt19937_64& rng,
                          const std::string& path) {
  BlockInstance out;
  for (const auto& part : spec.parts) {
    out.parts.push_back(instantiate(part, store, rng, path + "." + to_string(part.kind)));
  }
  return out;
}

template <typename T>
void rebind_batch_norm(PartInstance& part, ParamStore<T>& store, const std::string& path) {
  auto fresh = [&](BatchNormState& bn, const std::string& name) { bn = make_batch_norm(store, name, bn.channels); };
  std::visit(
      [&](auto& unit) {
        using U = std::decay_t<decltype(unit)>;
        if constexpr (std::is_same_v<U, StemUnit>) {
          if (unit.bn) fresh(*unit.bn, path + ".bn");
        } else if constexpr (std::is_same_v<U, ResidualCompartment>) {
          for (std::size_t i = 0; i < unit.units.size(); ++i) {
            const std::string p = path + ".res" + std::to_string(i + 1);
            fresh(unit.units[i].bn1, p + ".bn1");
            fresh(unit.units[i].bn2, p + ".bn2");
          }
        } else if constexpr (std::is_same_v<U, DenseBlockUnit>) {
          for (std::size_t i = 0; i < unit.layers.size(); ++i) {
            fresh(unit.layers[i].bn, path + ".layer" + std::to_string(i + 1) + ".bn");
          }
        } else {
          fresh(unit.bn, path + ".bn");
        }
      },
      part);
}

template <typename T>
void rebind_batch_norm(BlockInstance& block, ParamStore<T>& store, const std::string& path) {
  for (auto& part : block.parts) {
    const char* kind = std::holds_alternative<ResidualCompartment>(part) ? "compartment"
                       : std::holds_alternative<DenseBlockUnit>(part)    ? "dense"
                       : std::holds_alternative<TransitionUnit>(part)    ? "transition"
                                                                         : "stem";
    rebind_batch_norm(part, store, path + "." + kind);
  }
}

template <typename T>
Var conv(Tape<T>& tape, Var x, const ConvSite& site, ParamStore<T>& store) {
  Var w = tape.param(site.weight, store.value(site.weight));
  std::optional<Var> b;
  if (site.bias) b = tape.param(*site.bias, store.value(*site.bias));
  return ops::conv2d(tape, x, w, b, site.stride, site.padding);
}

template <typename T>
Var stem_forward(Tape<T>& tape, Var x, const StemUnit& stem, ParamStore<T>& store, Mode mode) {
  Var h = conv(tape, x, stem.conv, store);
  if (stem.bn) h = relu(tape, batch_norm(tape, h, *stem.bn, store, mode));
  return h;
}

template <typename T>
Var residual_block(Tape<T>& tape, Var x, const ResidualUnit& unit, ParamStore<T>& store, Mode mode) {
  const std::int64_t c = tape.value(x).dim(1);
  if (c != unit.in_channels) {
    throw InvalidArgument("residual_block: input has " + std::to_string(c) + " channels, block expects " +
                          std::to_string(unit.in_channels));
  }
  Var h = relu(tape, batch_norm(tape, conv(tape, x, unit.conv1, store), unit.bn1, store, mode));
  h = batch_norm(tape, conv(tape, h, unit.conv2, store), unit.bn2, store, mode);
  Var shortcut = (unit.stride == 1 && unit.in_channels == unit.out_channels)
                     ? x
                     : ops::subsample_pad_channels(tape, x, unit.stride, unit.out_channels);
  return relu(tape, ops::add(tape, h, shortcut));
}

template <typename T>
Var dense_block(Tape<T>& tape, Var x, const DenseBlockUnit& block, ParamStore<T>& store, Mode mode) {
  const std::int64_t c = tape.value(x).dim(1);
  if (c != block.in_channels) {
    throw InvalidArgument("dense_block: input has " + std::to_string(c) + " channels, block expects " +
                          std::to_string(block.in_channels));
  }
  Var features = x;
  for (const auto& layer : block.layers) {
    Var h = conv(tape, relu(tape, batch_norm(tape, features, layer.bn, store, mode)), layer.conv, store);
    features = ops::concat_channels(tape, {features, h});
  }
  return features;
}

template <typename T>
Var transition(Tape<T>& tape, Var x, const TransitionUnit& unit, ParamStore<T>& store, Mode mode) {
  Var h = conv(tape, relu(tape, batch_norm(tape, x, unit.bn, store, mode)), unit.conv, store);
  return ops::avg_pool_half(tape, h);
}

template <typename T>
Var block_forward(Tape<T>& tape, Var x, const PartInstance& part, ParamStore<T>& store, Mode mode) {
  return std::visit(
      [&](const auto& unit) -> Var {
        using U = std::decay_t<decltype(unit)>;
        if constexpr (std::is_same_v<U, StemUnit>) {
          return stem_forward(tape, x, unit, store, mode);
        } else if constexpr (std::is_same_v<U, ResidualCompartment>) {
          Var h = x;
          for (const auto& u : unit.units) h = residual_block(tape, h, u, store, mode);
          return h;
        } else if constexpr (std::is_same_v<U, DenseBlockUnit>) {
          return dense_block(tape, x, unit, store, mode);
        } else {
          return transition(tape, x, unit, store, mode);
        }
      },
      part);
}

template <typename T>
Var block_forward(Tape<T>& tape, Var x, const BlockInstance& block, ParamStore<T>& store, Mode mode) {
  Var h = x;
  for (const auto& part : block.parts) h = block_forward(tape, h, part, store, mode);
  return h;
}

template <typename T>
BackboneModel<T> instantiate_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  validate(spec);
  BackboneModel<T> m;
  m.spec = spec;
  std::mt19937_64 rng(seed);
  m.stem = std::get<StemUnit>(instantiate(spec.stem, m.params, rng, "stem"));
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    m.blocks.push_back(instantiate(spec.blocks[b], m.params, rng, "block" + std::to_string(b + 1)));
  }
  const std::int64_t c = spec.out_channels();
  if (spec.head.final_bn_relu) m.final_bn = make_batch_norm(m.params, "final.bn", c);
  m.fc_weight = m.params.add("fc.weight", ParamRole::FullyConnected,
                             he_init<T>(Shape{spec.head.class_count, c}, c, rng));
  m.fc_bias = m.params.add("fc.bias", ParamRole::FullyConnected, Tensor<T>(Shape{spec.head.class_count}));
  return m;
}

template <typename T>
Var backbone_features(Tape<T>& tape, BackboneModel<T>& model, Var x, Mode mode) {
  Var h = stem_forward(tape, x, model.stem, model.params, mode);
  for (const auto& block : model.blocks) h = block_forward(tape, h, block, model.params, mode);
  if (model.final_bn) h = relu(tape, batch_norm(tape, h, *model.final_bn, model.params, mode));
  return h;
}

template <typename T>
Var classifier_head(Tape<T>& tape, Var features, ParamId weight, ParamId bias, ParamStore<T>& store) {
  Var pooled = ops::flatten(tape, ops::global_avg_pool(tape, features));
  return linear(tape, pooled, tape.param(weight, store.value(weight)), tape.param(bias, store.value(bias)));
}

template <typename T>
Var backbone_forward(Tape<T>& tape, BackboneModel<T>& model, Var x, Mode mode) {
  return classifier_head(tape, backbone_features(tape, model, x, mode), model.fc_weight, model.fc_bias,
                         model.params);
}

#define WSMS_INSTANTIATE_BACKBONES(T)                                                                         \
  template ConvSite make_conv<T>(ParamStore<T>&, std::mt19937_64&, const std::string&, std::int64_t,          \
                                 std::int64_t, int, int, int);                                                \
  template PartInstance instantiate<T>(const BlockSpec&, ParamStore<T>&, std::mt19937_64&, const std::string&); \
  template BlockInstance instantiate<T>(const ConvBlock&, ParamStore<T>&, std::mt19937_64&, const std::string&); \
  template void rebind_batch_norm<T>(PartInstance&, ParamStore<T>&, const std::string&);                     \
  template void rebind_batch_norm<T>(BlockInstance&, ParamStore<T>&, const std::string&);                    \
  template Var conv<T>(Tape<T>&, Var, const ConvSite&, ParamStore<T>&);                                      \
  template Var stem_forward<T>(Tape<T>&, Var, const StemUnit&, ParamStore<T>&, Mode);                        \
  template Var residual_block<T>(Tape<T>&, Var, const ResidualUnit&, ParamStore<T>&, Mode);                  \
  template Var dense_block<T>(Tape<T>&, Var, const DenseBlockUnit&, ParamStore<T>&, Mode);                   \
  template Var transition<T>(Tape<T>&, Var, const TransitionUnit&, ParamStore<T>&, Mode);                    \
  template Var block_forward<T>(Tape<T>&, Var, const PartInstance&, ParamStore<T>&, Mode);                   \
  template Var block_forward<T>(Tape<T>&, Var, const BlockInstance&, ParamStore<T>&, Mode);                  \
  template BackboneModel<T> instantiate_backbone<T>(const BackboneSpec&, std::uint64_t);                     \
  template Var backbone_features<T>(Tape<T>&, BackboneModel<T>&, Var, Mode);                                 \
  template Var backbone_forward<T>(Tape<T>&, BackboneModel<T>&, Var, Mode);                                  \
  template Var classifier_head<T>(Tape<T>&, Var, ParamId, ParamId, ParamStore<T>&);

WSMS_INSTANTIATE_BACKBONES(float)
WSMS_INSTANTIATE_BACKBONES(double)

}  // namespace wsms

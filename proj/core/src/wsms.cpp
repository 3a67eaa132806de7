// SPDX-License-Identifier: Apache-2.0
#include "wsms/wsms.hpp"

#include "wsms/errors.hpp"
#include "wsms/ops.hpp"

namespace wsms {

std::string to_string(Integration kind) {
  switch (kind) {
    case Integration::None: return "none";
    case Integration::Conv1x1: return "conv1x1";
    case Integration::Conv3x3: return "conv3x3";
  }
  return "unknown";
}

std::string to_string(Sharing kind) { return kind == Sharing::Shared ? "shared" : "unshared"; }

Integration parse_integration(const std::string& text) {
  if (text == "none") return Integration::None;
  if (text == "conv1x1") return Integration::Conv1x1;
  if (text == "conv3x3") return Integration::Conv3x3;
  throw InvalidArgument("integration must be one of none, conv1x1, conv3x3; got '" + text + "'");
}

Sharing parse_sharing(const std::string& text) {
  if (text == "shared") return Sharing::Shared;
  if (text == "unshared") return Sharing::Unshared;
  throw InvalidArgument("sharing must be shared or unshared; got '" + text + "'");
}

StagePlan plan_stages(const WsmsSpec& spec) {
  validate(spec.backbone);
  const int k = static_cast<int>(spec.backbone.blocks.size());
  if (spec.stages < 1) throw InvalidArgument("stage count must be >= 1, got " + std::to_string(spec.stages));
  if (spec.stages > k) {
    throw InvalidArgument("stage count " + std::to_string(spec.stages) + " exceeds the backbone's k = " +
                          std::to_string(k) + " convolution blocks");
  }
  // Stage s drops the last s-1 blocks and sees an input 2^(s-1) times smaller;
  // outputs line up only if each dropped block halves the feature map.
  for (int d = k - spec.stages + 1; d < k; ++d) {
    if (spec.backbone.blocks[static_cast<std::size_t>(d)].downsample() != 2) {
      throw InvalidArgument("block " + std::to_string(d + 1) +
                            " does not halve the feature map, so stage outputs would differ in size");
    }
  }
  if (spec.integration != Integration::None && spec.integration_channels < 1) {
    throw InvalidArgument("integration_channels must be positive");
  }
  StagePlan plan;
  for (int s = 0; s < spec.stages; ++s) {
    StagePlan::Stage st;
    st.input_divisor = 1 << s;
    st.block_count = k - s;
    st.out_channels = spec.backbone.channels_after(static_cast<std::size_t>(st.block_count));
    plan.concat_channels += st.out_channels;
    plan.stages.push_back(st);
  }
  plan.head_channels = spec.integration == Integration::None ? plan.concat_channels : spec.integration_channels;
  return plan;
}

template <typename T>
WsmsModel<T> build_wsms(const WsmsSpec& spec, std::uint64_t seed) {
  WsmsModel<T> m;
  m.spec = spec;
  m.plan = plan_stages(spec);
  std::mt19937_64 rng(seed);
  const BackboneSpec& bb = spec.backbone;

  for (int s = 0; s < spec.stages; ++s) {
    const std::string prefix = "stage" + std::to_string(s + 1);
    const auto& geo = m.plan.stages[static_cast<std::size_t>(s)];
    StageInstance<T> stage;
    if (s == 0 || spec.sharing == Sharing::Unshared) {
      stage.stem = std::get<StemUnit>(instantiate(bb.stem, m.params, rng, prefix + ".stem"));
      for (int d = 0; d < geo.block_count; ++d) {
        stage.blocks.push_back(instantiate(bb.blocks[static_cast<std::size_t>(d)], m.params, rng,
                                           prefix + ".block" + std::to_string(d + 1)));
      }
    } else {
      const StageInstance<T>& first = m.stages.front();
      PartInstance stem = first.stem;
      rebind_batch_norm(stem, m.params, prefix + ".stem");
      stage.stem = std::get<StemUnit>(stem);
      for (int d = 0; d < geo.block_count; ++d) {
        BlockInstance block = first.blocks[static_cast<std::size_t>(d)];
        rebind_batch_norm(block, m.params, prefix + ".block" + std::to_string(d + 1));
        stage.blocks.push_back(std::move(block));
      }
    }
    if (bb.head.final_bn_relu) stage.tail_bn = make_batch_norm(m.params, prefix + ".final.bn", geo.out_channels);
    m.stages.push_back(std::move(stage));
  }

  if (spec.integration != Integration::None) {
    const bool wide = spec.integration == Integration::Conv3x3;
    IntegrationUnit unit;
    unit.conv = make_conv(m.params, rng, "integration.conv", m.plan.concat_channels, spec.integration_channels,
                          wide ? 3 : 1, 1, wide ? 1 : 0);
    unit.bn = make_batch_norm(m.params, "integration.bn", spec.integration_channels);
    m.integration = unit;
  }
  const std::int64_t d = m.plan.head_channels;
  m.fc_weight = m.params.add("fc.weight", ParamRole::FullyConnected,
                             he_init<T>(Shape{bb.head.class_count, d}, d, rng));
  m.fc_bias = m.params.add("fc.bias", ParamRole::FullyConnected, Tensor<T>(Shape{bb.head.class_count}));
  return m;
}

template <typename T>
std::vector<Var> image_pyramid(Tape<T>& tape, Var x, int stages) {
  if (stages < 1) throw InvalidArgument("image_pyramid: stage count must be >= 1");
  const Shape& s = tape.value(x).shape();
  if (s.rank() != 4) throw InvalidArgument("image_pyramid: input must be N x C x H x W, got " + s.str());
  const std::int64_t div = std::int64_t{1} << (stages - 1);
  if (s[2] % div != 0 || s[3] % div != 0) {
    throw InvalidArgument("image_pyramid: spatial extent " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                          " is not divisible by " + std::to_string(div) + " for " + std::to_string(stages) +
                          " stages");
  }
  std::vector<Var> levels{x};
  for (int i = 1; i < stages; ++i) levels.push_back(ops::avg_pool_half(tape, levels.back()));
  return levels;
}

template <typename T>
std::vector<Tensor<T>> image_pyramid(const Tensor<T>& x, int stages) {
  Tape<T> tape;
  std::vector<Tensor<T>> out;
  for (Var v : image_pyramid(tape, tape.constant(x), stages)) out.push_back(tape.value(v));
  return out;
}

template <typename T>
Var integration_apply(Tape<T>& tape, Var x, const std::optional<IntegrationUnit>& unit, ParamStore<T>& store,
                      Mode mode) {
  if (!unit) return x;
  return relu(tape, batch_norm(tape, conv(tape, x, unit->conv, store), unit->bn, store, mode));
}

template <typename T>
WsmsForward forward_wsms(Tape<T>& tape, WsmsModel<T>& model, Var x, const ForwardOptions& options) {
  const int S = model.spec.stages;
  if (!options.routes.empty() && static_cast<int>(options.routes.size()) != S) {
    throw InvalidArgument("forward_wsms: " + std::to_string(options.routes.size()) + " stage routes for " +
                          std::to_string(S) + " stages");
  }
  const std::vector<Var> pyramid = image_pyramid(tape, x, S);
  WsmsForward out;
  std::vector<Var> routed;
  for (int s = 0; s < S; ++s) {
    const StageInstance<T>& stage = model.stages[static_cast<std::size_t>(s)];
    std::vector<Var> block_outputs;
    Var h;
    try {
      h = stem_forward(tape, pyramid[static_cast<std::size_t>(s)], stage.stem, model.params, options.mode);
      for (const auto& block : stage.blocks) {
        h = block_forward(tape, h, block, model.params, options.mode);
        block_outputs.push_back(h);
      }
      if (stage.tail_bn) h = relu(tape, batch_norm(tape, h, *stage.tail_bn, model.params, options.mode));
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("stage " + std::to_string(s + 1) + ": " + e.what());
    }
    out.stage_outputs.push_back(h);
    out.blocks.push_back(std::move(block_outputs));
    const StageRoute route = options.routes.empty() ? StageRoute::Active : options.routes[static_cast<std::size_t>(s)];
    switch (route) {
      case StageRoute::Active: routed.push_back(h); break;
      case StageRoute::Detached: routed.push_back(ops::detach(tape, h)); break;
      case StageRoute::Zeroed: routed.push_back(tape.constant(Tensor<T>(tape.value(h).shape()))); break;
    }
  }
  try {
    out.concat = S == 1 ? routed.front() : ops::concat_channels(tape, routed);
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(std::string("stage outputs do not align: ") + e.what());
  }
  Var integrated = integration_apply(tape, out.concat, model.integration, model.params, options.mode);
  out.logits = classifier_head(tape, integrated, model.fc_weight, model.fc_bias, model.params);
  return out;
}

#define WSMS_INSTANTIATE_WSMS(T)                                                                             \
  template WsmsModel<T> build_wsms<T>(const WsmsSpec&, std::uint64_t);                                       \
  template std::vector<Var> image_pyramid<T>(Tape<T>&, Var, int);                                            \
  template std::vector<Tensor<T>> image_pyramid<T>(const Tensor<T>&, int);                                   \
  template Var integration_apply<T>(Tape<T>&, Var, const std::optional<IntegrationUnit>&, ParamStore<T>&,    \
                                    Mode);                                                                   \
  template WsmsForward forward_wsms<T>(Tape<T>&, WsmsModel<T>&, Var, const ForwardOptions&);

WSMS_INSTANTIATE_WSMS(float)
WSMS_INSTANTIATE_WSMS(double)

}  // namespace wsms

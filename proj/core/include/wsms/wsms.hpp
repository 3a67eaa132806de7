// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wsms/backbones.hpp"

namespace wsms {

enum class Integration { None, Conv1x1, Conv3x3 };
enum class Sharing { Shared, Unshared };

std::string to_string(Integration kind);
std::string to_string(Sharing kind);
Integration parse_integration(const std::string& text);
Sharing parse_sharing(const std::string& text);

// A backbone wrapped into S parallel stages. Stage s sees the input average
// pooled s-1 times and runs the stem plus the first k-s+1 convolution blocks.
// Stage outputs (all the same spatial size) are concatenated in stage order,
// passed through the integration layer, globally pooled and classified.
//
// Shared: every stage reuses the convolution weights of stage 1 at the same
// depth (stem included); batch-norm sites are private to their stage.
// Unshared: every stage has its own parameters (the MS-Net ablation).
struct WsmsSpec {
  BackboneSpec backbone;
  int stages = 1;
  Integration integration = Integration::None;
  std::int64_t integration_channels = 128;
  Sharing sharing = Sharing::Shared;
};

struct StagePlan {
  struct Stage {
    int input_divisor = 1;  // 1, 2, 4, ...
    int block_count = 0;
    std::int64_t out_channels = 0;
  };
  std::vector<Stage> stages;
  std::int64_t concat_channels = 0;
  std::int64_t head_channels = 0;  // FC input length after integration
};

// Validates the spec and derives per-stage geometry. Throws InvalidArgument
// when S exceeds the number of blocks or the blocks cannot align stage outputs.
StagePlan plan_stages(const WsmsSpec& spec);

struct IntegrationUnit {
  ConvSite conv;
  BatchNormState bn;
};

template <typename T>
struct StageInstance {
  StemUnit stem;
  std::vector<BlockInstance> blocks;
  std::optional<BatchNormState> tail_bn;
};

template <typename T>
struct WsmsModel {
  WsmsSpec spec;
  StagePlan plan;
  ParamStore<T> params;
  std::vector<StageInstance<T>> stages;
  std::optional<IntegrationUnit> integration;
  ParamId fc_weight;
  ParamId fc_bias;
};

// Parameters are allocated stage by stage (stage 1 in backbone order), then
// the integration layer, then the classifier, all He-initialised from `seed`.
template <typename T>
WsmsModel<T> build_wsms(const WsmsSpec& spec, std::uint64_t seed);

// Element 0 is x; element s is element s-1 average pooled by 2.
template <typename T>
std::vector<Var> image_pyramid(Tape<T>& tape, Var x, int stages);

template <typename T>
std::vector<Tensor<T>> image_pyramid(const Tensor<T>& x, int stages);

// Applies the integration layer (identity for None).
template <typename T>
Var integration_apply(Tape<T>& tape, Var x, const std::optional<IntegrationUnit>& unit, ParamStore<T>& store,
                      Mode mode);

// How a stage's output enters the concatenation.
enum class StageRoute {
  Active,    // normal
  Detached,  // same values, gradient blocked
  Zeroed,    // replaced by zeros
};

struct ForwardOptions {
  Mode mode = Mode::Eval;
  std::vector<StageRoute> routes;  // empty means all Active
};

struct WsmsForward {
  Var logits;
  Var concat;                             // pre-integration feature map
  std::vector<Var> stage_outputs;         // per stage, before routing
  std::vector<std::vector<Var>> blocks;   // per stage, output of each block
};

template <typename T>
WsmsForward forward_wsms(Tape<T>& tape, WsmsModel<T>& model, Var x, const ForwardOptions& options = {});

}  // namespace wsms

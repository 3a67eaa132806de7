// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "wsms/data.hpp"
#include "wsms/errors.hpp"
#include "wsms/trainer.hpp"
#include "wsms/wsms.hpp"

namespace wsms::app {

inline constexpr int kConfigFormatVersion = 1;

// Carries the 1-based line of the offending entry (0 when unknown).
class ConfigError : public InvalidArgument {
 public:
  ConfigError(const std::string& origin, int line, const std::string& what)
      : InvalidArgument(origin + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + what),
        line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

struct ModelConfig {
  BackboneKind backbone = BackboneKind::ResNet;
  int n = 18;                       // residual units per compartment
  std::int64_t width = 16;          // ResNet base channels
  std::int64_t growth = 24;         // DenseNet growth rate
  int layers = 32;                  // DenseNet layers per dense block
  std::int64_t stem_channels = 16;  // DenseNet stem
  std::int64_t class_count = 10;
  int stages = 1;
  Integration integration = Integration::None;
  std::int64_t integration_channels = 128;
  Sharing sharing = Sharing::Shared;

  WsmsSpec to_spec() const;
};

enum class DataSource { Cifar10, Cifar100, Synth };
std::string to_string(DataSource s);

struct DataConfig {
  DataSource source = DataSource::Cifar10;
  std::string path;               // resolved against the data root when relative; empty = default
  std::size_t train_subset = 0;   // 0 = all
  std::size_t test_subset = 0;
  SynthScaleConfig synth;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

RunConfig parse_config(std::string_view text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

// Fully resolved form; parse_config(emit_config(c)) == c.
std::string emit_config(const RunConfig& config);

}  // namespace wsms::app

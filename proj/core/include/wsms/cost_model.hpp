// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "wsms/wsms.hpp"

namespace wsms {

struct Extent {
  std::int64_t height = 32;
  std::int64_t width = 32;
};

// One row per layer site. Convolution rows of shared stages carry params = 0
// (the weights are counted at stage 1) and record the would-be count in
// aliased_params. Multiplications cover convolutions only, per batch element.
struct CostRow {
  std::string path;
  std::string kind;
  int stage = 0;  // 1-based; 0 for the shared head
  std::uint64_t params = 0;
  std::uint64_t aliased_params = 0;
  std::uint64_t mults = 0;
  std::string out_shape;  // C x H x W
};

struct CostReport {
  std::vector<CostRow> rows;
  std::uint64_t total_params = 0;
  std::uint64_t bn_params = 0;
  std::uint64_t total_mults = 0;
  std::vector<std::uint64_t> stage_mults;  // convolution mults of each stage (integration excluded)
  std::uint64_t integration_mults = 0;
  Extent input;

  std::uint64_t params_without_bn() const { return total_params - bn_params; }
  std::uint64_t aliased_params() const;
};

// Static analysis at a given input size. Throws InvalidState when the input
// extent cannot flow through every stage.
CostReport analyze(const WsmsSpec& spec, Extent input);
CostReport analyze(const BackboneSpec& spec, Extent input);

// Parameter totals do not depend on the input, so these analyse at the
// smallest compatible input.
CostReport count_params(const WsmsSpec& spec);
CostReport count_params(const BackboneSpec& spec);

CostReport count_mults(const WsmsSpec& spec, Extent input);
CostReport count_mults(const BackboneSpec& spec, Extent input);

// mults(stage s) / mults(stage 1) for s = 2..S.
std::vector<double> stage_overhead(const WsmsSpec& spec, Extent input = {});

// Smallest input edge that every stage can process.
std::int64_t minimal_input_edge(const WsmsSpec& spec);

// 3 significant figures in millions, the convention of published tables ("1.73M", "28.0M").
std::string format_millions(std::uint64_t value);
// Whole millions ("252M").
std::string format_whole_millions(std::uint64_t value);

void write_cost_csv(std::ostream& os, const CostReport& report);
void write_cost_table(std::ostream& os, const CostReport& report, bool per_layer);
std::string cost_summary_line(const CostReport& report);

}  // namespace wsms

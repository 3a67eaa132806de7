// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace wsms {

// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
// near-zero gradients from turning round-off into large relative errors.
double relative_error(double analytic, double numeric, double floor);

enum class GradcheckSize { Tiny, Small };
GradcheckSize parse_gradcheck_size(const std::string& text);

struct GradcheckOptions {
  std::uint64_t seed = 1;
  GradcheckSize size = GradcheckSize::Tiny;
  double threshold = 1e-4;
  double step = 1e-6;       // central-difference step
  double floor = 1e-5;      // see relative_error
  std::size_t max_probes = 48;  // coordinates sampled per tensor; smaller tensors are checked fully
};

struct GradcheckEntry {
  std::string name;
  double max_error = 0;
  std::size_t probes = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double threshold = 0;
  double seconds = 0;

  bool passed() const;
  double max_error() const;
};

// Every differentiable primitive plus a two-stage shared model, in double
// precision. Honours engine::set_fault for fault-injection runs.
GradcheckReport run_gradcheck(const GradcheckOptions& options = {});

}  // namespace wsms

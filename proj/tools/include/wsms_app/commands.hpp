// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace wsms::app {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,    // a check ran and failed (gradcheck)
  kExitUsage = 2,      // usage, config, missing or malformed files
  kExitNumerical = 3,  // divergence during training
};

// Runs the command line `args` (without the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace wsms::app

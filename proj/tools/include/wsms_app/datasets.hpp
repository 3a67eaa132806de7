// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wsms/data.hpp"
#include "wsms_app/config.hpp"

namespace wsms::app {

inline constexpr const char* kDataRootEnv = "WSMS_DATA_ROOT";

// $WSMS_DATA_ROOT, or ./data when unset.
std::filesystem::path default_data_root();

struct LoadedData {
  Dataset train;
  std::vector<std::pair<std::string, Dataset>> evals;  // first entry is the primary test split
  std::string path;           // where the data came from ("" when generated in memory)
  std::uint64_t content_hash = 0;  // over the raw bytes of every split, before normalisation
};

// Raw (unnormalised) splits described by the data section.
LoadedData load_raw_data(const DataConfig& config, const std::filesystem::path& data_root);

std::string hex64(std::uint64_t v);

}  // namespace wsms::app

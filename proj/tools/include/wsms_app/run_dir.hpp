// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace wsms::app {

std::string artifact_version();

// Exclusive ownership of a run directory for the lifetime of the object.
// Throws InvalidState when another process holds the lock.
class RunDirLock {
 public:
  explicit RunDirLock(std::filesystem::path dir);
  ~RunDirLock();
  RunDirLock(const RunDirLock&) = delete;
  RunDirLock& operator=(const RunDirLock&) = delete;

  static constexpr const char* kFileName = ".lock";

 private:
  std::filesystem::path path_;
};

struct RunManifest {
  std::string artifact_version;
  std::string command;
  std::uint64_t seed = 0;
  std::string precision;
  int threads = 1;
  bool deterministic = false;
  std::string config;  // resolved config text
  std::string config_hash;
  std::string dataset_source;
  std::string dataset_path;
  std::string dataset_hash;
  std::vector<std::string> files;
};

std::string to_json(const RunManifest& manifest);
RunManifest parse_manifest(const std::string& json_text);

}  // namespace wsms::app

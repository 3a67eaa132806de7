// SPDX-License-Identifier: Apache-2.0
#include "wsms_app/run_dir.hpp"

#include <cstdio>

#include <nlohmann/json.hpp>

#include "wsms/errors.hpp"

#ifndef WSMS_VERSION
#define WSMS_VERSION "0.0.0"
#endif

namespace wsms::app {

std::string artifact_version() { return WSMS_VERSION; }

RunDirLock::RunDirLock(std::filesystem::path dir) : path_(std::move(dir) / kFileName) {
  std::filesystem::create_directories(path_.parent_path());
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    throw InvalidState("run directory " + path_.parent_path().string() + " is in use (remove " + path_.string() +
                       " if no other process owns it)");
  }
  std::fclose(f);
}

RunDirLock::~RunDirLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

std::string to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["artifact_version"] = m.artifact_version;
  j["command"] = m.command;
  j["seed"] = m.seed;
  j["precision"] = m.precision;
  j["threads"] = m.threads;
  j["deterministic"] = m.deterministic;
  j["config_hash"] = m.config_hash;
  j["config"] = m.config;
  j["dataset"] = {{"source", m.dataset_source}, {"path", m.dataset_path}, {"content_hash", m.dataset_hash}};
  j["files"] = m.files;
  return j.dump(2) + "\n";
}

RunManifest parse_manifest(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RunManifest m;
    m.artifact_version = j.at("artifact_version").get<std::string>();
    m.command = j.at("command").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.precision = j.at("precision").get<std::string>();
    m.threads = j.at("threads").get<int>();
    m.deterministic = j.at("deterministic").get<bool>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config").get<std::string>();
    m.dataset_source = j.at("dataset").at("source").get<std::string>();
    m.dataset_path = j.at("dataset").at("path").get<std::string>();
    m.dataset_hash = j.at("dataset").at("content_hash").get<std::string>();
    m.files = j.at("files").get<std::vector<std::string>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run manifest: ") + e.what());
  }
}

}  // namespace wsms::app

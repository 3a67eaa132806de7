// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "wsms/param_store.hpp"

namespace wsms {

// Binary checkpoint, little-endian, version 1:
//
//   char[8]  magic "WSMSCKPT"
//   u32      version
//   u32      scalar width in bytes (4 = f32, 8 = f64)
//   u64      metadata entry count, then per entry: u32 len, key bytes, u32 len, value bytes
//   u64      parameter count, then per parameter:
//              u32 id, u8 role, u32 len, name bytes, u32 rank, i64 extents[rank], raw values
//   u64      running-statistics slot count, then per slot:
//              i64 channels, raw mean[channels], raw var[channels]
//
// Values are written as raw IEEE bits, so save followed by load is bit-exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

using CheckpointMetadata = std::map<std::string, std::string>;

template <typename T>
struct Checkpoint {
  ParamStore<T> params;
  CheckpointMetadata metadata;
};

template <typename T>
void write_checkpoint(std::ostream& os, const ParamStore<T>& params, const CheckpointMetadata& metadata);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& params,
                     const CheckpointMetadata& metadata);

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& is);

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

// Scalar width recorded in a checkpoint file, without reading the rest.
std::uint32_t checkpoint_scalar_bytes(const std::filesystem::path& path);

}  // namespace wsms

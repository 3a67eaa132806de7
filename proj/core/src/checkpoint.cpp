// SPDX-License-Identifier: Apache-2.0
#include "wsms/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "wsms/errors.hpp"

namespace wsms {
namespace {

constexpr char kMagic[8] = {'W', 'S', 'M', 'S', 'C', 'K', 'P', 'T'};

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
void put_values(std::ostream& os, const Tensor<T>& t) {
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}

template <typename U>
U get(std::istream& is) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError("checkpoint truncated");
  return v;
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError("checkpoint truncated inside a string");
  return s;
}

template <typename T>
void get_values(std::istream& is, Tensor<T>& t) {
  if (!is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)))) {
    throw FormatError("checkpoint truncated inside tensor data");
  }
}

std::uint32_t read_header(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  return get<std::uint32_t>(is);
}

}  // namespace

template <typename T>
void write_checkpoint(std::ostream& os, const ParamStore<T>& params, const CheckpointMetadata& metadata) {
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, sizeof(T));
  put<std::uint64_t>(os, metadata.size());
  for (const auto& [k, v] : metadata) {
    put_string(os, k);
    put_string(os, v);
  }
  put<std::uint64_t>(os, params.size());
  for (ParamId id : params.ids()) {
    const Tensor<T>& t = params.value(id);
    put<std::uint32_t>(os, id.value);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(params.role(id)));
    put_string(os, params.name(id));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().rank()));
    for (std::int64_t d : t.shape().dims()) put<std::int64_t>(os, d);
    put_values(os, t);
  }
  put<std::uint64_t>(os, params.running_stats_count());
  for (std::uint32_t i = 0; i < params.running_stats_count(); ++i) {
    const auto& s = params.running_stats(BnStatsId{i});
    put<std::int64_t>(os, static_cast<std::int64_t>(s.mean.size()));
    put_values(os, s.mean);
    put_values(os, s.var);
  }
  if (!os) throw FormatError("failed writing checkpoint");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& params,
                     const CheckpointMetadata& metadata) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, params, metadata);
}

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& is) {
  const auto width = read_header(is);
  if (width != sizeof(T)) {
    throw FormatError("checkpoint stores " + std::to_string(width * 8) + "-bit scalars, expected " +
                      std::to_string(sizeof(T) * 8));
  }
  Checkpoint<T> out;
  const auto meta_count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < meta_count; ++i) {
    std::string k = get_string(is);
    out.metadata[k] = get_string(is);
  }
  const auto count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const ParamId id{get<std::uint32_t>(is)};
    const auto role = get<std::uint8_t>(is);
    if (role > static_cast<std::uint8_t>(ParamRole::FullyConnected)) {
      throw FormatError("unknown parameter role " + std::to_string(role) + " for " + to_string(id));
    }
    std::string name = get_string(is);
    const auto rank = get<std::uint32_t>(is);
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank) + " for " + to_string(id));
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) d = get<std::int64_t>(is);
    Tensor<T> t{Shape(std::move(dims))};
    get_values(is, t);
    out.params.restore(id, std::move(name), static_cast<ParamRole>(role), std::move(t));
  }
  const auto slots = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < slots; ++i) {
    const auto channels = get<std::int64_t>(is);
    if (channels < 1) throw FormatError("invalid channel count in running statistics");
    auto& s = out.params.running_stats(out.params.add_running_stats(channels));
    get_values(is, s.mean);
    get_values(is, s.var);
  }
  return out;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint<T>(is);
}

std::uint32_t checkpoint_scalar_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return read_header(is);
}

template void write_checkpoint<float>(std::ostream&, const ParamStore<float>&, const CheckpointMetadata&);
template void write_checkpoint<double>(std::ostream&, const ParamStore<double>&, const CheckpointMetadata&);
template void save_checkpoint<float>(const std::filesystem::path&, const ParamStore<float>&,
                                     const CheckpointMetadata&);
template void save_checkpoint<double>(const std::filesystem::path&, const ParamStore<double>&,
                                      const CheckpointMetadata&);
template Checkpoint<float> read_checkpoint<float>(std::istream&);
template Checkpoint<double> read_checkpoint<double>(std::istream&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace wsms

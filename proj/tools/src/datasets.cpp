// SPDX-License-Identifier: Apache-2.0
#include "wsms_app/datasets.hpp"

#include <cstdlib>
#include <iomanip>
#include <sstream>

namespace wsms::app {
namespace {

void truncate(Dataset& d, std::size_t n) {
  if (n > 0 && n < d.images.size()) d.images.resize(n);
}

std::uint64_t hash_splits(const LoadedData& d, CifarVariant layout) {
  std::uint64_t h = fnv1a64(encode_cifar(d.train, layout));
  for (const auto& [name, split] : d.evals) h = fnv1a64(encode_cifar(split, layout), h);
  return h;
}

}  // namespace

std::filesystem::path default_data_root() {
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  return "data";
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

LoadedData load_raw_data(const DataConfig& config, const std::filesystem::path& data_root) {
  LoadedData out;
  std::filesystem::path path = config.path;
  if (!path.empty() && path.is_relative()) path = data_root / path;

  if (config.source == DataSource::Synth) {
    SynthSplits s;
    if (!path.empty()) {
      s = read_synth_dataset(path);
      out.path = path.string();
    } else {
      s = synth_scale_dataset(config.synth);
    }
    out.train = std::move(s.train);
    out.evals.emplace_back("test", std::move(s.test_seen));
    out.evals.emplace_back("held_out", std::move(s.test_held_out));
  } else {
    const bool c10 = config.source == DataSource::Cifar10;
    if (path.empty()) path = data_root / (c10 ? "cifar-10-batches-bin" : "cifar-100-binary");
    DatasetSplits s = load_cifar_dir(path, c10 ? CifarVariant::C10 : CifarVariant::C100);
    out.path = path.string();
    out.train = std::move(s.train);
    out.evals.emplace_back("test", std::move(s.test));
  }
  truncate(out.train, config.train_subset);
  for (auto& [name, split] : out.evals) truncate(split, config.test_subset);
  const CifarVariant layout = config.source == DataSource::Cifar100 ? CifarVariant::C100 : CifarVariant::C10;
  out.content_hash = hash_splits(out, layout);
  return out;
}

}  // namespace wsms::app

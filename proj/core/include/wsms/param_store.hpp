// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "wsms/tape.hpp"
#include "wsms/tensor.hpp"

namespace wsms {

enum class ParamRole : std::uint8_t { ConvWeight = 0, ConvBias = 1, BatchNorm = 2, FullyConnected = 3 };

std::string_view to_string(ParamRole role);

struct BnStatsId {
  std::uint32_t value = 0;
  auto operator<=>(const BnStatsId&) const = default;
};

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
};

// Registry of trainable tensors keyed by ParamId, plus batch-norm running
// statistics (which are state, not parameters, and are never counted or
// touched by the optimizer). Entries are node-stable: references returned by
// value() stay valid while the store lives.
template <typename T>
class ParamStore {
 public:
  ParamId add(std::string name, ParamRole role, Tensor<T> value);
  // Insert under a fixed id (checkpoint loading). Throws if the id exists.
  void restore(ParamId id, std::string name, ParamRole role, Tensor<T> value);

  bool contains(ParamId id) const { return entries_.count(id.value) != 0; }
  Tensor<T>& value(ParamId id);
  const Tensor<T>& value(ParamId id) const;
  ParamRole role(ParamId id) const;
  const std::string& name(ParamId id) const;
  std::vector<ParamId> ids() const;
  std::size_t size() const noexcept { return entries_.size(); }

  // Total number of scalars across parameters (running statistics excluded).
  std::size_t scalar_count() const;
  std::size_t scalar_count(ParamRole role) const;

  BnStatsId add_running_stats(std::int64_t channels);
  RunningStats<T>& running_stats(BnStatsId id);
  const RunningStats<T>& running_stats(BnStatsId id) const;
  std::size_t running_stats_count() const noexcept { return stats_.size(); }

 private:
  struct Entry {
    std::string name;
    ParamRole role;
    Tensor<T> value;
  };
  const Entry& entry(ParamId id) const;

  std::map<std::uint32_t, Entry> entries_;
  std::deque<RunningStats<T>> stats_;
  std::uint32_t next_id_ = 0;
};

// Copies values and running statistics from src into dst. Both stores must
// hold the same ids with the same roles and shapes.
template <typename T>
void assign_params(ParamStore<T>& dst, const ParamStore<T>& src);

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace wsms

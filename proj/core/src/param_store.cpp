// SPDX-License-Identifier: Apache-2.0
#include "wsms/param_store.hpp"

#include "wsms/errors.hpp"

namespace wsms {

std::string_view to_string(ParamRole role) {
  switch (role) {
    case ParamRole::ConvWeight: return "conv-weight";
    case ParamRole::ConvBias: return "conv-bias";
    case ParamRole::BatchNorm: return "bn";
    case ParamRole::FullyConnected: return "fc";
  }
  return "unknown";
}

template <typename T>
ParamId ParamStore<T>::add(std::string name, ParamRole role, Tensor<T> value) {
  const ParamId id{next_id_};
  restore(id, std::move(name), role, std::move(value));
  return id;
}

template <typename T>
void ParamStore<T>::restore(ParamId id, std::string name, ParamRole role, Tensor<T> value) {
  if (contains(id)) throw InvalidState(to_string(id) + " already present in parameter store");
  entries_.emplace(id.value, Entry{std::move(name), role, std::move(value)});
  next_id_ = std::max(next_id_, id.value + 1);
}

template <typename T>
const typename ParamStore<T>::Entry& ParamStore<T>::entry(ParamId id) const {
  auto it = entries_.find(id.value);
  if (it == entries_.end()) throw InvalidState(to_string(id) + " is not in the parameter store");
  return it->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::value(ParamId id) {
  return const_cast<Entry&>(entry(id)).value;
}

template <typename T>
const Tensor<T>& ParamStore<T>::value(ParamId id) const {
  return entry(id).value;
}

template <typename T>
ParamRole ParamStore<T>::role(ParamId id) const {
  return entry(id).role;
}

template <typename T>
const std::string& ParamStore<T>::name(ParamId id) const {
  return entry(id).name;
}

template <typename T>
std::vector<ParamId> ParamStore<T>::ids() const {
  std::vector<ParamId> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(ParamId{k});
  return out;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count(ParamRole role) const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_)
    if (e.role == role) n += e.value.size();
  return n;
}

template <typename T>
BnStatsId ParamStore<T>::add_running_stats(std::int64_t channels) {
  stats_.push_back({Tensor<T>(Shape{channels}, T{0}), Tensor<T>(Shape{channels}, T{1})});
  return BnStatsId{static_cast<std::uint32_t>(stats_.size() - 1)};
}

template <typename T>
RunningStats<T>& ParamStore<T>::running_stats(BnStatsId id) {
  if (id.value >= stats_.size()) throw InvalidState("unknown running-statistics slot " + std::to_string(id.value));
  return stats_[id.value];
}

template <typename T>
const RunningStats<T>& ParamStore<T>::running_stats(BnStatsId id) const {
  if (id.value >= stats_.size()) throw InvalidState("unknown running-statistics slot " + std::to_string(id.value));
  return stats_[id.value];
}

template <typename T>
void assign_params(ParamStore<T>& dst, const ParamStore<T>& src) {
  if (dst.size() != src.size() || dst.running_stats_count() != src.running_stats_count()) {
    throw FormatError("parameter layout mismatch: " + std::to_string(src.size()) + " params / " +
                      std::to_string(src.running_stats_count()) + " bn slots vs expected " +
                      std::to_string(dst.size()) + " / " + std::to_string(dst.running_stats_count()));
  }
  for (ParamId id : dst.ids()) {
    if (!src.contains(id) || src.role(id) != dst.role(id) || src.value(id).shape() != dst.value(id).shape()) {
      throw FormatError("parameter layout mismatch at " + to_string(id) + " (" + dst.name(id) + ")");
    }
  }
  for (ParamId id : dst.ids()) dst.value(id) = src.value(id);
  for (std::uint32_t i = 0; i < dst.running_stats_count(); ++i) {
    const auto& s = src.running_stats(BnStatsId{i});
    auto& d = dst.running_stats(BnStatsId{i});
    if (s.mean.shape() != d.mean.shape()) {
      throw FormatError("running statistics slot " + std::to_string(i) + " has mismatched channel count");
    }
    d = s;
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template void assign_params<float>(ParamStore<float>&, const ParamStore<float>&);
template void assign_params<double>(ParamStore<double>&, const ParamStore<double>&);

}  // namespace wsms

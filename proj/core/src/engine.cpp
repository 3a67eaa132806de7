// SPDX-License-Identifier: Apache-2.0
#include "wsms/engine.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace wsms::engine {
namespace {

std::atomic<int> g_threads{1};
std::mutex g_fault_mutex;
std::string g_fault;

}  // namespace

void set_threads(int n) { g_threads = std::max(1, n); }

int threads() noexcept { return g_threads; }

void parallel_for(std::size_t chunks, const std::function<void(std::size_t)>& body) {
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(g_threads.load()), chunks);
  if (workers <= 1) {
    for (std::size_t i = 0; i < chunks; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (std::size_t i = next++; i < chunks; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(run);
    run();
  }
  if (failure) std::rethrow_exception(failure);
}

void set_fault(std::string primitive) {
  std::lock_guard lock(g_fault_mutex);
  g_fault = std::move(primitive);
}

bool faulty(std::string_view primitive) noexcept {
  std::lock_guard lock(g_fault_mutex);
  return !g_fault.empty() && g_fault == primitive;
}

}  // namespace wsms::engine

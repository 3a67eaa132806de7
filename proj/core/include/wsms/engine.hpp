// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>

// Process-wide execution settings.
namespace wsms::engine {

// Worker threads used inside primitives. Work is split into chunks that do not
// depend on the thread count and reduced in chunk order, so results are identical
// for any setting.
void set_threads(int n);
int threads() noexcept;

// Runs body(chunk) for chunk in [0, chunks). Blocks until all chunks finish.
void parallel_for(std::size_t chunks, const std::function<void(std::size_t)>& body);

// Test hook: when set, the named primitive's backward rule is deliberately wrong.
// Used to prove that the gradient checker can catch a broken rule.
void set_fault(std::string primitive);
bool faulty(std::string_view primitive) noexcept;

class ScopedFault {
 public:
  explicit ScopedFault(std::string primitive) { set_fault(std::move(primitive)); }
  ~ScopedFault() { set_fault({}); }
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;
};

}  // namespace wsms::engine

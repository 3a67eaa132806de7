// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "wsms/engine.hpp"
#include "wsms/errors.hpp"
#include "wsms/gradcheck.hpp"

namespace wsms {
namespace {

TEST(Gradcheck, RelativeErrorFloor) {
  EXPECT_NEAR(relative_error(1.0, 1.1, 1e-5), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-9, 1e-5), 1e-9 / 1e-5);
  EXPECT_EQ(relative_error(2.0, 2.0, 1e-5), 0.0);
}

TEST(Gradcheck, DefaultRunPassesAndCoversModel) {
  const auto r = run_gradcheck();
  EXPECT_TRUE(r.passed());
  EXPECT_LE(r.max_error(), 1e-4);
  bool model = false;
  for (const auto& e : r.entries) {
    EXPECT_TRUE(e.passed) << e.name << " " << e.max_error;
    EXPECT_GT(e.probes, 0u) << e.name;
    model |= e.name.rfind("wsms", 0) == 0;
  }
  EXPECT_TRUE(model);
  EXPECT_GE(r.entries.size(), 15u);
}

TEST(Gradcheck, OtherSeedsAndSmallSizePass) {
  for (std::uint64_t seed : {2u, 17u, 123u}) {
    GradcheckOptions o;
    o.seed = seed;
    EXPECT_TRUE(run_gradcheck(o).passed()) << "seed " << seed;
  }
  GradcheckOptions small;
  small.size = GradcheckSize::Small;
  EXPECT_TRUE(run_gradcheck(small).passed());
  EXPECT_EQ(parse_gradcheck_size("small"), GradcheckSize::Small);
  EXPECT_THROW(parse_gradcheck_size("huge"), InvalidArgument);
}

TEST(Gradcheck, BrokenBackwardRuleIsCaughtAndNamed) {
  for (const std::string primitive : {"conv2d", "batch_norm", "avg_pool_half", "softmax_cross_entropy"}) {
    engine::ScopedFault fault(primitive);
    const auto r = run_gradcheck();
    EXPECT_FALSE(r.passed()) << primitive;
    bool named = false;
    for (const auto& e : r.entries) {
      if (e.name.rfind(primitive, 0) == 0) named |= !e.passed;
      if (!e.passed) {
        const bool expected = e.name.rfind(primitive, 0) == 0 || e.name.rfind("wsms", 0) == 0;
        EXPECT_TRUE(expected) << "unexpected failure " << e.name << " with fault in " << primitive;
      }
    }
    EXPECT_TRUE(named) << primitive;
  }
  EXPECT_TRUE(run_gradcheck().passed());
}

}  // namespace
}  // namespace wsms

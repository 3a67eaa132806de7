// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <map>
#include <numeric>
#include <sstream>

#include "wsms/cost_model.hpp"
#include "wsms/errors.hpp"

namespace wsms {
namespace {

// Published table values in millions for 10 and 100 classes, checked to within 2%.
struct TableRow {
  const char* name;
  WsmsSpec spec;
  double c10;
  double c100;
};

WsmsSpec plain(const BackboneSpec& b) { return WsmsSpec{b, 1, Integration::None}; }

std::vector<TableRow> published_rows(std::int64_t classes = 10) {
  const auto r110 = build_resnet(18, classes);
  const auto d24 = build_densenet(24, classes);
  return {
      {"ResNet-110", plain(r110), 1.73, 1.73},
      {"ResNet-116", plain(build_resnet(19, classes)), 1.82, 1.83},
      {"ResNet-122", plain(build_resnet(20, classes)), 1.92, 1.93},
      {"MS-ResNet 1x1", WsmsSpec{r110, 3, Integration::Conv1x1, 128, Sharing::Unshared}, 2.23, 2.25},
      {"WSMS-ResNet none", WsmsSpec{r110, 3, Integration::None}, 1.73, 1.74},
      {"WSMS-ResNet 3x3", WsmsSpec{r110, 3, Integration::Conv3x3}, 1.86, 1.87},
      {"WSMS-ResNet 1x1", WsmsSpec{r110, 3, Integration::Conv1x1}, 1.75, 1.76},
      {"DenseNet k=24", plain(d24), 27.2, 27.2},
      {"DenseNet k=26", plain(build_densenet(26, classes)), 31.9, 31.9},
      {"MS-DenseNet 1x1", WsmsSpec{d24, 3, Integration::Conv1x1, 128, Sharing::Unshared}, 41.3, 41.3},
      {"WSMS-DenseNet none", WsmsSpec{d24, 3, Integration::None}, 27.4, 27.8},
      {"WSMS-DenseNet 3x3", WsmsSpec{d24, 3, Integration::Conv3x3}, 32.7, 32.7},
      {"WSMS-DenseNet 1x1", WsmsSpec{d24, 3, Integration::Conv1x1}, 28.0, 28.0},
  };
}

TEST(CountParams, PublishedTableValuesWithinTwoPercent) {
  for (std::int64_t classes : {10, 100}) {
    for (const auto& row : published_rows(classes)) {
      const double m = static_cast<double>(count_params(row.spec).total_params) / 1e6;
      const double want = classes == 10 ? row.c10 : row.c100;
      EXPECT_NEAR(m, want, 0.02 * want) << row.name << " classes=" << classes;
    }
  }
}

TEST(CountParams, ExactTotals) {
  EXPECT_EQ(count_params(build_resnet(18, 10)).total_params, 1727962u);
  EXPECT_EQ(count_params(build_densenet(24, 10)).total_params, 27249082u);
  EXPECT_EQ(format_millions(count_params(WsmsSpec{build_resnet(18, 10), 3, Integration::Conv3x3}).total_params),
            "1.86M");
  EXPECT_EQ(format_millions(count_params(WsmsSpec{build_densenet(24, 10), 3, Integration::Conv1x1}).total_params),
            "28.0M");
}

TEST(CountParams, TotalsAreSumsOfRows) {
  for (const auto& row : published_rows()) {
    const auto r = count_params(row.spec);
    std::uint64_t params = 0, mults = 0, bn = 0;
    for (const auto& c : r.rows) {
      params += c.params;
      mults += c.mults;
      if (c.kind == "bn") bn += c.params;
      if (c.kind.rfind("conv", 0) == 0) {
        EXPECT_EQ(c.params + c.aliased_params == 0, false) << c.path;
      }
    }
    EXPECT_EQ(params, r.total_params) << row.name;
    EXPECT_EQ(mults, r.total_mults) << row.name;
    EXPECT_EQ(bn, r.bn_params) << row.name;
    EXPECT_EQ(r.params_without_bn() + r.bn_params, r.total_params);
  }
}

TEST(CountParams, ConvRowFormula) {
  const auto r = count_mults(build_resnet(1, 10), Extent{32, 32});
  const auto& stem = r.rows.front();
  EXPECT_EQ(stem.path, "stage1.stem.conv");
  EXPECT_EQ(stem.params, 16u * 3u * 9u);
  EXPECT_EQ(stem.mults, 16u * 3u * 9u * 32u * 32u);
  EXPECT_EQ(stem.out_shape, "16x32x32");
}

TEST(CountParams, SharedPlusDuplicatedEqualsUnshared) {
  for (const auto& bb : {build_resnet(18, 10), build_densenet(24, 10), build_resnet(2, 5, 4)}) {
    for (auto integration : {Integration::None, Integration::Conv1x1, Integration::Conv3x3}) {
      const auto shared = count_params(WsmsSpec{bb, 3, integration});
      const auto unshared = count_params(WsmsSpec{bb, 3, integration, 128, Sharing::Unshared});
      EXPECT_GT(shared.aliased_params(), 0u);
      EXPECT_EQ(shared.total_params + shared.aliased_params(), unshared.total_params);
    }
  }
}

TEST(CountMults, PublishedFiguresWithinFivePercent) {
  const auto r110 = build_resnet(18, 10);
  const auto d24 = build_densenet(24, 10);
  auto mults = [](const WsmsSpec& s) { return static_cast<double>(count_mults(s, Extent{32, 32}).total_mults) / 1e6; };
  EXPECT_NEAR(mults(plain(r110)), 252, 0.05 * 252);
  const double wsms = mults(WsmsSpec{r110, 3, Integration::Conv1x1});
  EXPECT_NEAR(wsms, 301, 0.05 * 301);
  EXPECT_NEAR(wsms / mults(plain(r110)), 1.2, 0.03);
  EXPECT_NEAR(mults(plain(d24)), 6889, 0.05 * 6889);
  EXPECT_NEAR(mults(WsmsSpec{d24, 3, Integration::Conv1x1}), 8454, 0.05 * 8454);
  EXPECT_EQ(count_mults(plain(r110), Extent{32, 32}).total_mults, 252887040u);
  EXPECT_EQ(format_whole_millions(252887040u), "253M");
}

TEST(CountMults, QuadraticInInputEdge) {
  for (const auto& spec : {plain(build_resnet(3, 10)), WsmsSpec{build_resnet(2, 10), 3, Integration::Conv3x3},
                           WsmsSpec{build_densenet(4, 10, 3), 2, Integration::Conv1x1}}) {
    const auto m16 = count_mults(spec, Extent{16, 16}).total_mults;
    const auto m32 = count_mults(spec, Extent{32, 32}).total_mults;
    const auto m64 = count_mults(spec, Extent{64, 64}).total_mults;
    EXPECT_EQ(m32, 4 * m16);
    EXPECT_EQ(m64, 4 * m32);
    EXPECT_EQ(count_params(spec).total_params, count_mults(spec, Extent{64, 64}).total_params);
  }
}

TEST(CountMults, IncompatibleInputIsInvalidState) {
  EXPECT_THROW(count_mults(WsmsSpec{build_resnet(1, 10), 3, Integration::None}, Extent{6, 6}), InvalidState);
  EXPECT_THROW(count_mults(build_densenet(2, 10, 1), Extent{6, 6}), InvalidState);
}

TEST(StageOverhead, ResnetSecondStageUnderQuarter) {
  const auto ratios = stage_overhead(WsmsSpec{build_resnet(18, 10), 3, Integration::Conv1x1});
  ASSERT_EQ(ratios.size(), 2u);
  EXPECT_LT(ratios[0], 0.25);
  EXPECT_LT(ratios[1], ratios[0]);
  EXPECT_THROW(stage_overhead(plain(build_resnet(1, 10))), InvalidArgument);
}

TEST(StageOverhead, SameLayerAtHalfResolutionCostsExactlyAQuarter) {
  const auto r = count_mults(WsmsSpec{build_resnet(2, 10), 3, Integration::None}, Extent{32, 32});
  std::map<std::string, std::uint64_t> first;
  for (const auto& row : r.rows)
    if (row.stage == 1) first[row.path.substr(row.path.find('.'))] = row.mults;
  int compared = 0;
  for (const auto& row : r.rows) {
    if (row.stage != 2 || row.mults == 0) continue;
    const auto it = first.find(row.path.substr(row.path.find('.')));
    ASSERT_NE(it, first.end()) << row.path;
    EXPECT_EQ(4 * row.mults, it->second) << row.path;
    ++compared;
  }
  EXPECT_GT(compared, 0);
}

TEST(StageOverhead, DensenetCombinedRatio) {
  const auto d24 = build_densenet(24, 10);
  const WsmsSpec spec{d24, 3, Integration::Conv1x1};
  const auto ratios = stage_overhead(spec);
  const auto wsms = count_mults(spec, Extent{32, 32});
  const auto base = static_cast<double>(count_mults(d24, Extent{32, 32}).total_mults);
  const double expected = (static_cast<double>(wsms.total_mults) - base - static_cast<double>(wsms.integration_mults)) / base;
  EXPECT_NEAR(ratios[0] + ratios[1], expected, 1e-9);
  const double published = (8454.0 - 6889.0 - static_cast<double>(wsms.integration_mults) / 1e6) / 6889.0;
  EXPECT_NEAR(ratios[0] + ratios[1], published, 0.01);
}

TEST(CostReport, CsvAndTable) {
  const auto r = count_mults(WsmsSpec{build_resnet(1, 10), 2, Integration::Conv1x1}, Extent{32, 32});
  std::ostringstream csv;
  write_cost_csv(csv, r);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "layer_path,kind,params,mults,out_shape");
  std::size_t count = 0;
  for (std::string line; std::getline(lines, line);) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4) << line;
    ++count;
  }
  EXPECT_EQ(count, r.rows.size());

  std::ostringstream table;
  write_cost_table(table, r, true);
  EXPECT_NE(table.str().find("stage 2 mults="), std::string::npos);
  EXPECT_NE(table.str().find("params="), std::string::npos);
}

TEST(FormatMillions, ThreeSignificantFigures) {
  EXPECT_EQ(format_millions(1727962), "1.73M");
  EXPECT_EQ(format_millions(27953274), "28.0M");
  EXPECT_EQ(format_millions(252887040), "253M");
  EXPECT_EQ(format_whole_millions(300506112), "301M");
}

}  // namespace
}  // namespace wsms

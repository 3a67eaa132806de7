// SPDX-License-Identifier: Apache-2.0
#include "wsms/cost_model.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "wsms/errors.hpp"
#include "wsms/ops.hpp"

namespace wsms {
namespace {

std::string shape_str(std::int64_t c, std::int64_t h, std::int64_t w) {
  return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

// Walks one stage, tracking channels and spatial size and emitting rows.
class StageWalker {
 public:
  StageWalker(CostReport& report, int stage, bool aliased, std::int64_t h, std::int64_t w)
      : report_(report), stage_(stage), aliased_(aliased), h_(h), w_(w) {}

  void conv(const std::string& path, std::int64_t cin, std::int64_t cout, int kernel, int stride, int pad) {
    const std::int64_t ho = ops::conv_out_extent(h_, kernel, stride, pad);
    const std::int64_t wo = ops::conv_out_extent(w_, kernel, stride, pad);
    if (ho < 1 || wo < 1) throw InvalidState(path + ": input " + shape_str(cin, h_, w_) + " too small");
    h_ = ho;
    w_ = wo;
    c_ = cout;
    const auto weights = static_cast<std::uint64_t>(cout * cin * kernel * kernel);
    CostRow row{path, "conv" + std::to_string(kernel) + "x" + std::to_string(kernel), stage_, 0, 0,
                weights * static_cast<std::uint64_t>(ho * wo), shape_str(cout, ho, wo)};
    if (aliased_) {
      row.kind += "(shared)";
      row.aliased_params = weights;
    } else {
      row.params = weights;
    }
    stage_mults_ += row.mults;
    push(std::move(row));
  }

  void batch_norm(const std::string& path) {
    const auto p = static_cast<std::uint64_t>(2 * c_);
    report_.bn_params += p;
    push({path, "bn", stage_, p, 0, 0, shape_str(c_, h_, w_)});
  }

  void marker(const std::string& path, const std::string& kind) {
    push({path, kind, stage_, 0, 0, 0, shape_str(c_, h_, w_)});
  }

  void pool(const std::string& path) {
    if (h_ % 2 || w_ % 2) throw InvalidState(path + ": cannot halve odd extent " + shape_str(c_, h_, w_));
    h_ /= 2;
    w_ /= 2;
    push({path, "avgpool2", stage_, 0, 0, 0, shape_str(c_, h_, w_)});
  }

  void set_channels(std::int64_t c) { c_ = c; }
  std::int64_t channels() const { return c_; }
  std::int64_t height() const { return h_; }
  std::int64_t width() const { return w_; }
  std::uint64_t stage_mults() const { return stage_mults_; }

  void part(const BlockSpec& p, const std::string& path) {
    switch (p.kind) {
      case BlockKind::StemConv:
        conv(path + ".conv", p.in_channels, p.out_channels, 3, 1, 1);
        if (p.bn_relu) batch_norm(path + ".bn");
        break;
      case BlockKind::ResidualCompartment:
        for (int i = 0; i < p.units; ++i) {
          const std::string u = path + ".res" + std::to_string(i + 1);
          const std::int64_t cin = i == 0 ? p.in_channels : p.out_channels;
          const int stride = i == 0 ? p.stride : 1;
          const std::int64_t h_in = h_, w_in = w_;
          conv(u + ".conv1", cin, p.out_channels, 3, stride, 1);
          batch_norm(u + ".bn1");
          conv(u + ".conv2", p.out_channels, p.out_channels, 3, 1, 1);
          batch_norm(u + ".bn2");
          if (stride != 1 || cin != p.out_channels) {
            if ((h_in + stride - 1) / stride != h_ || (w_in + stride - 1) / stride != w_) {
              throw InvalidState(u + ": shortcut and residual path disagree in size");
            }
            marker(u + ".shortcut", "shortcut(pad)");
          }
        }
        break;
      case BlockKind::DenseBlock: {
        std::int64_t c = p.in_channels;
        for (int i = 0; i < p.units; ++i) {
          const std::string u = path + ".layer" + std::to_string(i + 1);
          set_channels(c);
          batch_norm(u + ".bn");
          conv(u + ".conv", c, p.growth, 3, 1, 1);
          c += p.growth;
        }
        set_channels(c);
        break;
      }
      case BlockKind::Transition:
        batch_norm(path + ".bn");
        conv(path + ".conv", p.in_channels, p.out_channels, 1, 1, 0);
        pool(path + ".pool");
        break;
    }
  }

 private:
  void push(CostRow row) {
    report_.total_params += row.params;
    report_.total_mults += row.mults;
    report_.rows.push_back(std::move(row));
  }

  CostReport& report_;
  int stage_;
  bool aliased_;
  std::int64_t h_, w_, c_ = 0;
  std::uint64_t stage_mults_ = 0;
};

WsmsSpec as_single_stage(const BackboneSpec& spec) {
  WsmsSpec w;
  w.backbone = spec;
  w.stages = 1;
  w.integration = Integration::None;
  return w;
}

}  // namespace

std::uint64_t CostReport::aliased_params() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.aliased_params;
  return n;
}

CostReport analyze(const WsmsSpec& spec, Extent input) {
  const StagePlan plan = plan_stages(spec);
  const BackboneSpec& bb = spec.backbone;
  CostReport report;
  report.input = input;
  std::int64_t out_h = -1, out_w = -1;

  for (int s = 0; s < spec.stages; ++s) {
    const auto& geo = plan.stages[static_cast<std::size_t>(s)];
    if (input.height % geo.input_divisor || input.width % geo.input_divisor) {
      throw InvalidState("input " + std::to_string(input.height) + "x" + std::to_string(input.width) +
                         " is not divisible by " + std::to_string(geo.input_divisor) + " for stage " +
                         std::to_string(s + 1));
    }
    const std::string prefix = "stage" + std::to_string(s + 1);
    StageWalker walk(report, s + 1, s > 0 && spec.sharing == Sharing::Shared, input.height / geo.input_divisor,
                     input.width / geo.input_divisor);
    walk.set_channels(bb.input_channels);
    walk.part(bb.stem, prefix + ".stem");
    for (int d = 0; d < geo.block_count; ++d) {
      const ConvBlock& block = bb.blocks[static_cast<std::size_t>(d)];
      for (const auto& p : block.parts) {
        walk.part(p, prefix + ".block" + std::to_string(d + 1) + "." + to_string(p.kind));
      }
    }
    if (bb.head.final_bn_relu) walk.batch_norm(prefix + ".final.bn");
    if (s == 0) {
      out_h = walk.height();
      out_w = walk.width();
    } else if (walk.height() != out_h || walk.width() != out_w) {
      throw InvalidState("stage " + std::to_string(s + 1) + " ends at " + std::to_string(walk.height()) + "x" +
                         std::to_string(walk.width()) + ", stage 1 at " + std::to_string(out_h) + "x" +
                         std::to_string(out_w));
    }
    report.stage_mults.push_back(walk.stage_mults());
  }

  StageWalker head(report, 0, false, out_h, out_w);
  head.set_channels(plan.concat_channels);
  if (spec.stages > 1) head.marker("concat", "concat");
  if (spec.integration != Integration::None) {
    const bool wide = spec.integration == Integration::Conv3x3;
    head.conv("integration.conv", plan.concat_channels, spec.integration_channels, wide ? 3 : 1, 1, wide ? 1 : 0);
    head.batch_norm("integration.bn");
    report.integration_mults = head.stage_mults();
  }
  const std::int64_t d = head.channels();
  report.rows.push_back({"gap", "global_avgpool", 0, 0, 0, 0, shape_str(d, 1, 1)});
  const auto fc = static_cast<std::uint64_t>(d * bb.head.class_count + bb.head.class_count);
  report.rows.push_back({"fc", "fc", 0, fc, 0, 0, std::to_string(bb.head.class_count)});
  report.total_params += fc;
  return report;
}

CostReport analyze(const BackboneSpec& spec, Extent input) { return analyze(as_single_stage(spec), input); }

std::int64_t minimal_input_edge(const WsmsSpec& spec) {
  // Stage s reaches the same blocks with the input already divided by
  // 2^(s-1), and those dropped blocks each halve, so stage 1's total
  // downsampling factor covers every stage.
  plan_stages(spec);
  std::int64_t factor = 1;
  for (const auto& b : spec.backbone.blocks) factor *= b.downsample();
  return factor;
}

CostReport count_params(const WsmsSpec& spec) {
  const std::int64_t edge = minimal_input_edge(spec);
  return analyze(spec, Extent{edge, edge});
}

CostReport count_params(const BackboneSpec& spec) { return count_params(as_single_stage(spec)); }

CostReport count_mults(const WsmsSpec& spec, Extent input) { return analyze(spec, input); }

CostReport count_mults(const BackboneSpec& spec, Extent input) { return analyze(spec, input); }

std::vector<double> stage_overhead(const WsmsSpec& spec, Extent input) {
  if (spec.stages < 2) throw InvalidArgument("stage_overhead needs at least 2 stages, got " + std::to_string(spec.stages));
  const CostReport r = analyze(spec, input);
  std::vector<double> out;
  for (std::size_t s = 1; s < r.stage_mults.size(); ++s) {
    out.push_back(static_cast<double>(r.stage_mults[s]) / static_cast<double>(r.stage_mults[0]));
  }
  return out;
}

std::string format_millions(std::uint64_t value) {
  const double m = static_cast<double>(value) / 1e6;
  int decimals = 2;
  if (m >= 100) decimals = 0;
  else if (m >= 10) decimals = 1;
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << m << 'M';
  return os.str();
}

std::string format_whole_millions(std::uint64_t value) {
  std::ostringstream os;
  os << std::llround(static_cast<double>(value) / 1e6) << 'M';
  return os.str();
}

void write_cost_csv(std::ostream& os, const CostReport& report) {
  os << "layer_path,kind,params,mults,out_shape\n";
  for (const auto& r : report.rows) {
    os << r.path << ',' << r.kind << ',' << r.params << ',' << r.mults << ',' << r.out_shape << '\n';
  }
}

std::string cost_summary_line(const CostReport& report) {
  std::ostringstream os;
  os << "params=" << format_millions(report.total_params) << " mults=" << format_whole_millions(report.total_mults)
     << " (exact params=" << report.total_params << " without_bn=" << report.params_without_bn()
     << " mults=" << report.total_mults << " @" << report.input.height << 'x' << report.input.width << ')';
  return os.str();
}

void write_cost_table(std::ostream& os, const CostReport& report, bool per_layer) {
  if (per_layer) {
    std::size_t width = 10;
    for (const auto& r : report.rows) width = std::max(width, r.path.size());
    os << std::left << std::setw(static_cast<int>(width)) << "layer" << "  " << std::setw(16) << "kind"
       << std::right << std::setw(12) << "params" << std::setw(14) << "mults" << "  out\n";
    for (const auto& r : report.rows) {
      os << std::left << std::setw(static_cast<int>(width)) << r.path << "  " << std::setw(16) << r.kind
         << std::right << std::setw(12) << r.params << std::setw(14) << r.mults << "  " << r.out_shape << '\n';
    }
  }
  for (std::size_t s = 0; s < report.stage_mults.size(); ++s) {
    os << "stage " << s + 1 << " mults=" << report.stage_mults[s];
    if (s > 0) {
      os << " (" << std::fixed << std::setprecision(4)
         << static_cast<double>(report.stage_mults[s]) / static_cast<double>(report.stage_mults[0])
         << " of stage 1)";
      os.unsetf(std::ios::fixed);
    }
    os << '\n';
  }
  if (report.integration_mults) os << "integration mults=" << report.integration_mults << '\n';
  os << cost_summary_line(report) << '\n';
}

}  // namespace wsms

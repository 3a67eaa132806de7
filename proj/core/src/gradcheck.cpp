// SPDX-License-Identifier: Apache-2.0
#include "wsms/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>

#include "wsms/errors.hpp"
#include "wsms/layers.hpp"
#include "wsms/ops.hpp"
#include "wsms/wsms.hpp"

namespace wsms {

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

GradcheckSize parse_gradcheck_size(const std::string& text) {
  if (text == "tiny") return GradcheckSize::Tiny;
  if (text == "small") return GradcheckSize::Small;
  throw InvalidArgument("gradcheck size must be tiny or small; got '" + text + "'");
}

bool GradcheckReport::passed() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

double GradcheckReport::max_error() const {
  double m = 0;
  for (const auto& e : entries) m = std::max(m, e.max_error);
  return m;
}

namespace {

using D = double;
using LossFn = std::function<Var(Tape<D>&, const std::vector<Var>&)>;

Tensor<D> uniform(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(s);
  std::uniform_real_distribution<double> u(lo, hi);
  for (D& v : t.data()) v = u(rng);
  return t;
}

// Random projection to a scalar, fixed for the lifetime of one check so every
// re-evaluation sees the same weights.
class Readout {
 public:
  explicit Readout(std::uint64_t seed) : seed_(seed) {}
  Var operator()(Tape<D>& tape, Var out) {
    const Shape& s = tape.value(out).shape();
    if (!weights_ || weights_->shape() != s) {
      std::mt19937_64 rng(seed_);
      weights_ = std::make_shared<Tensor<D>>(uniform(s, rng));
    }
    return ops::dot(tape, out, *weights_);
  }

 private:
  std::uint64_t seed_;
  std::shared_ptr<Tensor<D>> weights_;
};

struct Problem {
  std::string name;
  std::vector<Tensor<D>> inputs;
  std::shared_ptr<ParamStore<D>> params;  // optional
  LossFn loss;
};

std::vector<std::size_t> probe_indices(std::size_t n, std::size_t max_probes, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n <= max_probes) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_probes);
  std::sort(idx.begin(), idx.end());
  return idx;
}

GradcheckEntry check(Problem& p, const GradcheckOptions& opt, std::mt19937_64& rng) {
  auto eval = [&]() {
    Tape<D> tape;
    std::vector<Var> vars;
    for (const auto& t : p.inputs) vars.push_back(tape.constant(t));
    return tape.value(p.loss(tape, vars)).item();
  };

  Tape<D> tape;
  std::vector<Var> vars;
  for (const auto& t : p.inputs) vars.push_back(tape.leaf(t));
  const Var loss = p.loss(tape, vars);
  const GradMap<D> param_grads = tape.backward(loss);

  GradcheckEntry entry;
  entry.name = p.name;
  auto probe = [&](Tensor<D>& target, const Tensor<D>* analytic) {
    for (std::size_t i : probe_indices(target.size(), opt.max_probes, rng)) {
      const D saved = target[i];
      target[i] = saved + opt.step;
      const double up = eval();
      target[i] = saved - opt.step;
      const double down = eval();
      target[i] = saved;
      const double numeric = (up - down) / (2 * opt.step);
      const double a = analytic ? (*analytic)[i] : 0.0;
      entry.max_error = std::max(entry.max_error, relative_error(a, numeric, opt.floor));
      ++entry.probes;
    }
  };
  for (std::size_t k = 0; k < p.inputs.size(); ++k) probe(p.inputs[k], tape.grad(vars[k]));
  if (p.params) {
    for (ParamId id : p.params->ids()) {
      auto it = param_grads.find(id);
      probe(p.params->value(id), it == param_grads.end() ? nullptr : &it->second);
    }
  }
  entry.passed = std::isfinite(entry.max_error) && entry.max_error <= opt.threshold;
  return entry;
}

std::vector<Problem> primitive_problems(std::mt19937_64& rng, std::uint64_t seed) {
  std::vector<Problem> out;
  auto add = [&](std::string name, std::vector<Tensor<D>> inputs, LossFn fn,
                 std::shared_ptr<ParamStore<D>> params = nullptr) {
    out.push_back({std::move(name), std::move(inputs), std::move(params), std::move(fn)});
  };
  auto readout = [&]() { return Readout(seed ^ (out.size() * 0x9e3779b97f4a7c15ULL)); };

  add("conv2d[3x3,stride1,pad1,bias]",
      {uniform(Shape{2, 3, 5, 5}, rng), uniform(Shape{4, 3, 3, 3}, rng), uniform(Shape{4}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable {
        return r(t, ops::conv2d(t, v[0], v[1], v[2], 1, 1));
      });
  add("conv2d[3x3,stride2,pad1]", {uniform(Shape{2, 2, 6, 6}, rng), uniform(Shape{3, 2, 3, 3}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable {
        return r(t, ops::conv2d(t, v[0], v[1], std::nullopt, 2, 1));
      });
  add("conv2d[1x1,stride1,pad0]", {uniform(Shape{2, 5, 3, 3}, rng), uniform(Shape{2, 5, 1, 1}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable {
        return r(t, ops::conv2d(t, v[0], v[1], std::nullopt, 1, 0));
      });
  add("avg_pool_half", {uniform(Shape{2, 2, 4, 6}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, ops::avg_pool_half(t, v[0])); });
  add("max_pool2", {uniform(Shape{2, 2, 4, 4}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, ops::max_pool2(t, v[0])); });
  add("global_avg_pool", {uniform(Shape{2, 3, 3, 4}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, ops::global_avg_pool(t, v[0])); });
  add("add", {uniform(Shape{2, 3, 2, 2}, rng), uniform(Shape{2, 3, 2, 2}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, ops::add(t, v[0], v[1])); });
  add("scale", {uniform(Shape{3, 4}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, ops::scale(t, v[0], -1.7)); });
  add("concat_channels",
      {uniform(Shape{2, 2, 3, 3}, rng), uniform(Shape{2, 1, 3, 3}, rng), uniform(Shape{2, 3, 3, 3}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, ops::concat_channels(t, v)); });
  add("flatten", {uniform(Shape{2, 3, 2, 2}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, ops::flatten(t, v[0])); });
  add("sum", {uniform(Shape{2, 3, 2}, rng)},
      [](Tape<D>& t, const std::vector<Var>& v) { return ops::sum(t, v[0]); });
  add("dot", {uniform(Shape{4, 3}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, v[0]); });
  add("subsample_pad_channels", {uniform(Shape{2, 2, 4, 4}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable {
        return r(t, ops::subsample_pad_channels(t, v[0], 2, 5));
      });
  add("relu", {uniform(Shape{3, 7}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, relu(t, v[0])); });
  add("linear", {uniform(Shape{3, 5}, rng), uniform(Shape{4, 5}, rng), uniform(Shape{4}, rng)},
      [r = readout()](Tape<D>& t, const std::vector<Var>& v) mutable { return r(t, linear(t, v[0], v[1], v[2])); });

  {
    std::vector<int> labels{2, 0, 3};
    add("softmax_cross_entropy", {uniform(Shape{3, 4}, rng, -2.0, 2.0)},
        [labels](Tape<D>& t, const std::vector<Var>& v) { return softmax_cross_entropy(t, v[0], labels); });
  }
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    auto store = std::make_shared<ParamStore<D>>();
    const BatchNormState bn = make_batch_norm(*store, "bn", 3);
    store->value(bn.gamma) = uniform(Shape{3}, rng, 0.5, 1.5);
    store->value(bn.beta) = uniform(Shape{3}, rng);
    auto& stats = store->running_stats(bn.stats);
    stats.mean = uniform(Shape{3}, rng, -0.2, 0.2);
    stats.var = uniform(Shape{3}, rng, 0.5, 1.5);
    const auto saved = stats;
    add(mode == Mode::Train ? "batch_norm[train]" : "batch_norm[eval]", {uniform(Shape{4, 3, 2, 2}, rng)},
        [r = readout(), store, bn, mode, saved](Tape<D>& t, const std::vector<Var>& v) mutable {
          // Train-mode forward updates the running statistics; reset so
          // every evaluation starts from the same state.
          store->running_stats(bn.stats) = saved;
          return r(t, batch_norm(t, v[0], bn, *store, mode));
        },
        store);
  }
  return out;
}

Problem model_problem(const GradcheckOptions& opt, std::mt19937_64& rng) {
  const bool tiny = opt.size == GradcheckSize::Tiny;
  WsmsSpec spec;
  spec.backbone = build_resnet(1, 3, tiny ? 2 : 4);
  spec.stages = 2;
  spec.integration = Integration::Conv1x1;
  spec.integration_channels = tiny ? 4 : 8;
  spec.sharing = Sharing::Shared;
  auto model = std::make_shared<WsmsModel<D>>(build_wsms<D>(spec, opt.seed));
  // Move parameters away from their initial values so BN gamma/beta and the
  // FC bias are not sitting at special points.
  auto params = std::shared_ptr<ParamStore<D>>(model, &model->params);
  for (ParamId id : params->ids()) {
    for (D& v : params->value(id).data()) v += std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  }
  std::vector<RunningStats<D>> saved;
  for (std::uint32_t i = 0; i < params->running_stats_count(); ++i) saved.push_back(params->running_stats({i}));
  const std::int64_t edge = tiny ? 8 : 16;
  std::vector<int> labels{0, 2, 1};
  Problem p{"wsms[S=2,shared,conv1x1]", {uniform(Shape{3, 3, edge, edge}, rng)}, params,
            [model, labels, saved](Tape<D>& t, const std::vector<Var>& v) {
              for (std::uint32_t i = 0; i < saved.size(); ++i) model->params.running_stats({i}) = saved[i];
              const WsmsForward f = forward_wsms(t, *model, v[0], {Mode::Train, {}});
              return softmax_cross_entropy(t, f.logits, labels);
            }};
  return p;
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(opt.seed);
  GradcheckReport report;
  report.threshold = opt.threshold;
  std::vector<Problem> problems = primitive_problems(rng, opt.seed);
  problems.push_back(model_problem(opt, rng));
  for (auto& p : problems) report.entries.push_back(check(p, opt, rng));
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace wsms

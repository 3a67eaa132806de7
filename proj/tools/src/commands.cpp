// SPDX-License-Identifier: Apache-2.0
#include "wsms_app/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "wsms/checkpoint.hpp"
#include "wsms/cost_model.hpp"
#include "wsms/engine.hpp"
#include "wsms/gradcheck.hpp"
#include "wsms/rng.hpp"
#include "wsms/trainer.hpp"
#include "wsms_app/config.hpp"
#include "wsms_app/datasets.hpp"
#include "wsms_app/run_dir.hpp"

namespace wsms::app {
namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kInitStream = 0x494e4954ULL;

struct Globals {
  int threads = 1;
  bool deterministic = false;
  std::string precision = "f32";
  std::optional<std::uint64_t> seed;
  std::string data_root;
};

fs::path data_root(const Globals& g) { return g.data_root.empty() ? default_data_root() : fs::path(g.data_root); }

std::string model_name(const ModelConfig& m) {
  std::string base;
  if (m.backbone == BackboneKind::ResNet) {
    base = "ResNet-" + std::to_string(6 * m.n + 2);
  } else {
    base = "DenseNet(k=" + std::to_string(m.growth) + ")";
  }
  if (m.stages == 1) return base;
  return (m.sharing == Sharing::Shared ? "WSMS-" : "MS-") + base + " S=" + std::to_string(m.stages) +
         " integration=" + to_string(m.integration);
}

Extent parse_extent(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(text);
    std::size_t used = 0;
    const std::int64_t h = std::stoll(text.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(text);
    const std::string wtext = text.substr(x + 1);
    const std::int64_t w = std::stoll(wtext, &used);
    if (used != wtext.size() || h < 1 || w < 1) throw std::invalid_argument(text);
    return {h, w};
  } catch (const std::logic_error&) {
    throw InvalidArgument("--input must look like 32x32, got '" + text + "'");
  }
}

std::string json_number(double v) { return nlohmann::json(v).dump(); }

// ---------------------------------------------------------------------------

int cmd_count(const std::string& config_path, const std::string& input, const std::string& csv, bool per_layer,
              std::ostream& out) {
  const RunConfig cfg = load_config(config_path);
  const WsmsSpec spec = cfg.model.to_spec();
  const Extent extent = parse_extent(input);
  const CostReport report = analyze(spec, extent);
  const StagePlan plan = plan_stages(spec);
  out << "model: " << model_name(cfg.model) << " classes=" << cfg.model.class_count << '\n';
  out << "stage_channels=";
  for (std::size_t s = 0; s < plan.stages.size(); ++s) out << (s ? "/" : "") << plan.stages[s].out_channels;
  out << " concat=" << plan.concat_channels << " head=" << plan.head_channels << '\n';
  write_cost_table(out, report, per_layer);
  if (!csv.empty()) {
    std::ofstream f(csv, std::ios::trunc);
    if (!f) throw FormatError("cannot write " + csv);
    write_cost_csv(f, report);
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& size, std::uint64_t seed, const std::string& fault, std::ostream& out) {
  GradcheckOptions opt;
  opt.seed = seed;
  opt.size = parse_gradcheck_size(size);
  std::optional<engine::ScopedFault> guard;
  if (!fault.empty()) guard.emplace(fault);
  const GradcheckReport r = run_gradcheck(opt);
  std::size_t width = 0;
  for (const auto& e : r.entries) width = std::max(width, e.name.size());
  for (const auto& e : r.entries) {
    out << std::left << std::setw(static_cast<int>(width)) << e.name << "  max_rel_error=" << std::scientific
        << std::setprecision(3) << e.max_error << std::defaultfloat << "  probes=" << e.probes << "  "
        << (e.passed ? "PASS" : "FAIL") << '\n';
  }
  out << (r.passed() ? "PASS" : "FAIL") << " max_rel_error=" << std::scientific << std::setprecision(3)
      << r.max_error() << std::defaultfloat << " threshold=" << r.threshold << " seconds=" << std::fixed
      << std::setprecision(2) << r.seconds << std::defaultfloat << '\n';
  if (!r.passed()) {
    for (const auto& e : r.entries) {
      if (!e.passed) out << "failed: " << e.name << '\n';
    }
  }
  return r.passed() ? kExitOk : kExitFailure;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir, const Globals& g, std::ostream& out) {
  SynthScaleConfig sc;
  if (!config_path.empty()) sc = load_config(config_path).data.synth;
  if (g.seed) sc.seed = *g.seed;
  const SynthSplits splits = synth_scale_dataset(sc);
  write_synth_dataset(out_dir, splits, sc);
  out << "wrote " << out_dir << ": train=" << splits.train.size() << " test_seen=" << splits.test_seen.size()
      << " test_held_out=" << splits.test_held_out.size() << " seed=" << sc.seed << '\n';
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& baselines, const std::string& target, const std::string& csv,
                std::ostream& out) {
  std::vector<std::vector<Prediction>> base;
  for (const auto& b : baselines) base.push_back(load_predictions_csv(b));
  const auto ids = compare_preds(base, load_predictions_csv(target));
  std::ofstream file;
  if (!csv.empty()) {
    file.open(csv, std::ios::trunc);
    if (!file) throw FormatError("cannot write " + csv);
    file << "id\n";
  }
  for (auto id : ids) {
    out << id << '\n';
    if (file.is_open()) file << id << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

void normalize(LoadedData& data, const Normalization& norm) {
  apply_normalization(data.train, norm);
  for (auto& [name, split] : data.evals) apply_normalization(split, norm);
}

void check_classes(const ModelConfig& m, const LoadedData& data) {
  if (m.class_count != data.train.class_count) {
    throw ConfigError("config", 0, "model.class_count is " + std::to_string(m.class_count) + " but the dataset has " +
                                        std::to_string(data.train.class_count) + " classes");
  }
}

void write_predictions(const fs::path& path, const std::vector<Prediction>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  write_predictions_csv(f, rows);
}

template <typename T>
int train_as(RunConfig cfg, const fs::path& dir, const Globals& g,
             const std::string& command, std::ostream& out, std::ostream& err) {
  RunDirLock lock(dir);
  LoadedData data = load_raw_data(cfg.data, data_root(g));
  check_classes(cfg.model, data);
  const Normalization norm = fit_normalization(data.train);
  for (const auto& w : norm.warnings) err << "warning: " << w << '\n';
  normalize(data, norm);

  WsmsModel<T> model = build_wsms<T>(cfg.model.to_spec(), derive_seed({cfg.train.seed, kInitStream}));
  cfg.train.record_wallclock = !g.deterministic;
  const std::string resolved = emit_config(cfg);

  RunManifest manifest;
  manifest.artifact_version = artifact_version();
  manifest.command = command;
  manifest.seed = cfg.train.seed;
  manifest.precision = g.precision;
  manifest.threads = engine::threads();
  manifest.deterministic = g.deterministic;
  manifest.config = resolved;
  manifest.config_hash = hex64(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(resolved.data()), resolved.size())));
  manifest.dataset_source = to_string(cfg.data.source);
  manifest.dataset_path = data.path;
  manifest.dataset_hash = hex64(data.content_hash);
  manifest.files = {"config.cfg", "metrics.jsonl", "checkpoint_final.bin", "checkpoint_best.bin"};
  for (const auto& [name, split] : data.evals) manifest.files.push_back("predictions_" + name + ".csv");
  {
    std::ofstream f(dir / "manifest.json", std::ios::trunc);
    f << to_json(manifest);
    std::ofstream c(dir / "config.cfg", std::ios::trunc);
    c << resolved;
  }

  TrainData td{&data.train, {}};
  for (const auto& [name, split] : data.evals) td.evals.push_back({name, &split});
  TrainOutputs outputs;
  outputs.final_checkpoint = dir / "checkpoint_final.bin";
  outputs.best_checkpoint = dir / "checkpoint_best.bin";
  outputs.metadata = {{"config", resolved},
                      {"normalization", serialize_normalization(norm)},
                      {"dataset_hash", manifest.dataset_hash},
                      {"precision", g.precision}};
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  outputs.on_record = [&](const MetricsRecord& rec) {
    const std::string line = to_json_line(rec);
    metrics << line << '\n';
    metrics.flush();
    out << line << '\n';
  };
  const TrainResult result = train(model, td, cfg.train, outputs);
  for (const auto& [name, split] : data.evals) {
    write_predictions(dir / ("predictions_" + name + ".csv"), evaluate(model, split).rows);
  }
  out << "final test_error=" << json_number(result.final_test_error) << " best test_error="
      << json_number(result.best_test_error) << " best_epoch=" << result.best_epoch << '\n';
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::optional<int> epochs, const Globals& g,
              const std::string& command, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(config_path);
  if (g.seed) cfg.train.seed = *g.seed;
  if (epochs) {
    if (*epochs < 0) throw InvalidArgument("--epochs must be >= 0");
    cfg.train.epochs = *epochs;
  }
  if (g.precision == "f64") return train_as<double>(cfg, out_dir, g, command, out, err);
  return train_as<float>(cfg, out_dir, g, command, out, err);
}

template <typename T>
int eval_as(const fs::path& checkpoint, const std::string& split_name, const std::string& dump, const Globals& g,
            std::ostream& out, std::ostream& err) {
  Checkpoint<T> ckpt = load_checkpoint<T>(checkpoint);
  auto meta = [&](const char* key) {
    auto it = ckpt.metadata.find(key);
    if (it == ckpt.metadata.end()) throw FormatError(checkpoint.string() + ": metadata lacks '" + key + "'");
    return it->second;
  };
  const RunConfig cfg = parse_config(meta("config"), checkpoint.string() + "[config]");
  LoadedData data = load_raw_data(cfg.data, data_root(g));
  check_classes(cfg.model, data);
  if (hex64(data.content_hash) != meta("dataset_hash")) {
    err << "warning: dataset content hash " << hex64(data.content_hash) << " differs from the training run's "
        << meta("dataset_hash") << '\n';
  }
  normalize(data, parse_normalization(meta("normalization")));
  WsmsModel<T> model = build_wsms<T>(cfg.model.to_spec(), 0);
  assign_params(model.params, ckpt.params);

  const auto it = std::find_if(data.evals.begin(), data.evals.end(), [&](const auto& e) { return e.first == split_name; });
  const Dataset* split = nullptr;
  if (split_name == "train") split = &data.train;
  else if (it != data.evals.end()) split = &it->second;
  else throw InvalidArgument("unknown split '" + split_name + "'");
  const EvalResult r = evaluate(model, *split);
  if (!dump.empty()) write_predictions(dump, r.rows);
  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint.string();
  j["split"] = split_name;
  j["examples"] = r.rows.size();
  j["error"] = r.error_percent;
  j["loss"] = r.mean_loss;
  if (auto e = ckpt.metadata.find("epoch"); e != ckpt.metadata.end()) j["epoch"] = std::stoi(e->second);
  out << j.dump() << '\n';
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& dump, const Globals& g,
             std::ostream& out, std::ostream& err) {
  if (!fs::exists(checkpoint)) throw FormatError("checkpoint " + checkpoint + " does not exist");
  const std::uint32_t bytes = checkpoint_scalar_bytes(checkpoint);
  if (bytes == 8) return eval_as<double>(checkpoint, split, dump, g, out, err);
  return eval_as<float>(checkpoint, split, dump, g, out, err);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weight-shared multi-stage CNNs: cost analysis, gradient checks, training and evaluation", "wsms"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--threads", g.threads, "Worker threads for convolutions")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", g.deterministic, "Single thread, no wallclock in metrics (bitwise reproducible)");
  app.add_option("--precision", g.precision, "Scalar type for training")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--seed", g.seed, "Override the seed");
  app.add_option("--data-root", g.data_root, std::string("Data directory (default $") + kDataRootEnv + " or ./data)");

  std::string config, input = "32x32", csv, out_dir, size = "tiny", fault, checkpoint, split = "test", dump, target;
  bool per_layer = false;
  std::optional<int> epochs;
  std::vector<std::string> baselines;

  auto* count = app.add_subcommand("count", "Parameter and multiplication counts of a model config");
  count->add_option("config", config, "Model config")->required()->check(CLI::ExistingFile);
  count->add_option("--input", input, "Input extent HxW")->capture_default_str();
  count->add_option("--csv", csv, "Write per-layer rows as CSV");
  count->add_flag("--per-layer", per_layer, "Print the per-layer table");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  grad->add_option("--size", size, "Model size for the end-to-end check (tiny|small)")->capture_default_str();
  grad->add_option("--inject-fault", fault, "Test hook: corrupt the backward rule of this primitive");

  auto* tr = app.add_subcommand("train", "Train a model; writes a run directory");
  tr->add_option("config", config, "Run config")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out_dir, "Run directory")->required();
  tr->add_option("--epochs", epochs, "Override train.epochs");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and dump per-example predictions");
  ev->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--split", split, "test, held_out or train")->capture_default_str();
  ev->add_option("--csv,--dump", dump, "Write predictions (id,true,pred,correct)");

  auto* sy = app.add_subcommand("synth-data", "Write the synthetic scale-generalisation dataset");
  sy->add_option("config", config, "Config whose data.synth section is used (defaults otherwise)")
      ->check(CLI::ExistingFile);
  sy->add_option("--out", out_dir, "Output directory")->required();

  auto* cp = app.add_subcommand("compare-preds", "Ids misclassified by all baselines but correct in the target");
  cp->add_option("--baselines", baselines, "Baseline prediction dumps")->required()->expected(1, -1);
  cp->add_option("--target", target, "Target prediction dump")->required();
  cp->add_option("--csv", csv, "Also write the ids as CSV");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << "run with --help for usage" << (sub != &app ? " (" + sub->get_name() + " --help)" : "") << '\n';
    return kExitUsage;
  }

  std::string command = "wsms";
  for (const auto& a : args) command += " " + a;

  try {
    engine::set_threads(g.deterministic ? 1 : g.threads);
    if (*count) return cmd_count(config, input, csv, per_layer, out);
    if (*grad) return cmd_gradcheck(size, g.seed.value_or(1), fault, out);
    if (*tr) return cmd_train(config, out_dir, epochs, g, command, out, err);
    if (*ev) return cmd_eval(checkpoint, split, dump, g, out, err);
    if (*sy) return cmd_synth(config, out_dir, g, out);
    if (*cp) return cmd_compare(baselines, target, csv, out);
  } catch (const NumericalError& e) {
    err << "error: training diverged: " << e.what() << " (epoch " << e.epoch() << ", batch " << e.batch() << ")\n";
    return kExitNumerical;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidState& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace wsms::app

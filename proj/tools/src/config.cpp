// SPDX-License-Identifier: Apache-2.0
#include "wsms_app/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace wsms::app {

WsmsSpec ModelConfig::to_spec() const {
  WsmsSpec spec;
  spec.backbone = backbone == BackboneKind::ResNet ? build_resnet(n, class_count, width)
                                                   : build_densenet(growth, class_count, layers, stem_channels);
  spec.stages = stages;
  spec.integration = integration;
  spec.integration_channels = integration_channels;
  spec.sharing = sharing;
  return spec;
}

std::string to_string(DataSource s) {
  switch (s) {
    case DataSource::Cifar10: return "cifar10";
    case DataSource::Cifar100: return "cifar100";
    case DataSource::Synth: return "synth";
  }
  return "unknown";
}

namespace {

int line_of(const YAML::Node& n) { return n.Mark().is_null() ? 0 : n.Mark().line + 1; }

class Reader {
 public:
  explicit Reader(std::string origin) : origin_(std::move(origin)) {}

  [[noreturn]] void fail(const YAML::Node& at, const std::string& what) const {
    throw ConfigError(origin_, line_of(at), what);
  }

  template <typename V>
  V scalar(const YAML::Node& n, const std::string& key, const char* expected) const {
    if (!n.IsScalar()) fail(n, key + ": expected " + expected);
    try {
      return n.as<V>();
    } catch (const YAML::Exception&) {
      fail(n, key + ": expected " + expected + ", got '" + n.Scalar() + "'");
    }
  }

  // Iterates a section, rejecting unknown keys.
  template <typename Fn>
  void section(const YAML::Node& node, const std::string& name, const std::set<std::string>& keys, Fn&& fn) const {
    if (!node.IsMap()) fail(node, "section '" + name + "' must be a mapping");
    for (const auto& kv : node) {
      const std::string key = kv.first.as<std::string>();
      if (!keys.count(key)) fail(kv.first, "unknown key '" + key + "' in section '" + name + "'");
      try {
        fn(key, kv.second);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        fail(kv.second, name + "." + key + ": " + e.what());
      }
    }
  }

  void require_positive(const YAML::Node& n, const std::string& key, double v) const {
    if (!(v > 0)) fail(n, key + " must be positive");
  }

 private:
  std::string origin_;
};

ScaleRange read_range(const Reader& r, const YAML::Node& n, const std::string& key) {
  if (!n.IsSequence() || n.size() != 2) r.fail(n, key + ": expected [lo, hi]");
  return {r.scalar<double>(n[0], key, "a number"), r.scalar<double>(n[1], key, "a number")};
}

void read_model(const Reader& r, const YAML::Node& node, ModelConfig& m) {
  static const std::set<std::string> keys{"backbone", "n", "width", "growth", "layers", "stem_channels",
                                          "class_count", "stages", "integration", "integration_channels", "sharing"};
  r.section(node, "model", keys, [&](const std::string& k, const YAML::Node& v) {
    if (k == "backbone") {
      const auto s = r.scalar<std::string>(v, k, "resnet or densenet");
      if (s == "resnet") m.backbone = BackboneKind::ResNet;
      else if (s == "densenet") m.backbone = BackboneKind::DenseNet;
      else r.fail(v, "backbone must be resnet or densenet, got '" + s + "'");
    } else if (k == "n") {
      m.n = r.scalar<int>(v, k, "an integer");
      r.require_positive(v, k, m.n);
    } else if (k == "width") {
      m.width = r.scalar<std::int64_t>(v, k, "an integer");
      r.require_positive(v, k, static_cast<double>(m.width));
    } else if (k == "growth") {
      m.growth = r.scalar<std::int64_t>(v, k, "an integer");
      r.require_positive(v, k, static_cast<double>(m.growth));
    } else if (k == "layers") {
      m.layers = r.scalar<int>(v, k, "an integer");
      r.require_positive(v, k, m.layers);
    } else if (k == "stem_channels") {
      m.stem_channels = r.scalar<std::int64_t>(v, k, "an integer");
      r.require_positive(v, k, static_cast<double>(m.stem_channels));
    } else if (k == "class_count") {
      m.class_count = r.scalar<std::int64_t>(v, k, "an integer");
      if (m.class_count < 2) r.fail(v, "class_count must be >= 2");
    } else if (k == "stages") {
      m.stages = r.scalar<int>(v, k, "an integer");
    } else if (k == "integration") {
      m.integration = parse_integration(r.scalar<std::string>(v, k, "none, conv1x1 or conv3x3"));
    } else if (k == "integration_channels") {
      m.integration_channels = r.scalar<std::int64_t>(v, k, "an integer");
    } else if (k == "sharing") {
      m.sharing = parse_sharing(r.scalar<std::string>(v, k, "shared or unshared"));
    }
  });
  try {
    plan_stages(m.to_spec());
  } catch (const InvalidArgument& e) {
    r.fail(node, std::string("model: ") + e.what());
  }
}

void read_train(const Reader& r, const YAML::Node& node, TrainConfig& t) {
  static const std::set<std::string> keys{"epochs",   "batch_size", "momentum", "weight_decay", "lr_schedule",
                                          "seed",     "eval_every", "bn_decay", "augment"};
  r.section(node, "train", keys, [&](const std::string& k, const YAML::Node& v) {
    if (k == "epochs") t.epochs = r.scalar<int>(v, k, "an integer");
    else if (k == "batch_size") t.batch_size = r.scalar<int>(v, k, "an integer");
    else if (k == "momentum") t.momentum = r.scalar<double>(v, k, "a number");
    else if (k == "weight_decay") t.weight_decay = r.scalar<double>(v, k, "a number");
    else if (k == "lr_schedule") {
      const auto s = r.scalar<std::string>(v, k, "'epoch:lr, ...'");
      if (s == "resnet") t.lr_schedule = resnet_schedule();
      else if (s == "densenet") t.lr_schedule = densenet_schedule();
      else t.lr_schedule = parse_schedule(s);
    } else if (k == "seed") t.seed = r.scalar<std::uint64_t>(v, k, "a non-negative integer");
    else if (k == "eval_every") t.eval_every = r.scalar<int>(v, k, "an integer");
    else if (k == "bn_decay") t.bn_decay = r.scalar<bool>(v, k, "true or false");
    else if (k == "augment") t.augment = r.scalar<bool>(v, k, "true or false");
  });
  try {
    validate(t);
  } catch (const InvalidArgument& e) {
    r.fail(node, std::string("train: ") + e.what());
  }
}

void read_synth(const Reader& r, const YAML::Node& node, SynthScaleConfig& s) {
  static const std::set<std::string> keys{"class_count",       "image_size", "train_scales",
                                          "test_scales",       "samples_per_class",
                                          "test_samples_per_class", "noise", "seed"};
  r.section(node, "data.synth", keys, [&](const std::string& k, const YAML::Node& v) {
    if (k == "class_count") s.class_count = r.scalar<int>(v, k, "an integer");
    else if (k == "image_size") s.image_size = r.scalar<int>(v, k, "an integer");
    else if (k == "train_scales") s.train_scales = read_range(r, v, k);
    else if (k == "test_scales") s.test_scales = read_range(r, v, k);
    else if (k == "samples_per_class") s.samples_per_class = r.scalar<int>(v, k, "an integer");
    else if (k == "test_samples_per_class") s.test_samples_per_class = r.scalar<int>(v, k, "an integer");
    else if (k == "noise") s.noise = r.scalar<double>(v, k, "a number");
    else if (k == "seed") s.seed = r.scalar<std::uint64_t>(v, k, "a non-negative integer");
  });
  try {
    validate(s);
  } catch (const InvalidArgument& e) {
    r.fail(node, std::string("data.synth: ") + e.what());
  }
}

void read_data(const Reader& r, const YAML::Node& node, DataConfig& d) {
  static const std::set<std::string> keys{"source", "path", "train_subset", "test_subset", "synth"};
  r.section(node, "data", keys, [&](const std::string& k, const YAML::Node& v) {
    if (k == "source") {
      const auto s = r.scalar<std::string>(v, k, "cifar10, cifar100 or synth");
      if (s == "cifar10") d.source = DataSource::Cifar10;
      else if (s == "cifar100") d.source = DataSource::Cifar100;
      else if (s == "synth") d.source = DataSource::Synth;
      else r.fail(v, "source must be cifar10, cifar100 or synth, got '" + s + "'");
    } else if (k == "path") d.path = r.scalar<std::string>(v, k, "a path");
    else if (k == "train_subset") d.train_subset = r.scalar<std::size_t>(v, k, "a non-negative integer");
    else if (k == "test_subset") d.test_subset = r.scalar<std::size_t>(v, k, "a non-negative integer");
    else if (k == "synth") read_synth(r, v, d.synth);
  });
}

}  // namespace

RunConfig parse_config(std::string_view text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::ParserException& e) {
    throw ConfigError(origin, e.mark.line + 1, e.msg);
  }
  const Reader r(origin);
  if (!root.IsMap()) throw ConfigError(origin, line_of(root), "config must be a mapping of sections");
  const YAML::Node version = root["format_version"];
  if (!version) throw ConfigError(origin, 1, "missing format_version");
  const int v = r.scalar<int>(version, "format_version", "an integer");
  if (v != kConfigFormatVersion) {
    r.fail(version, "unsupported format_version " + std::to_string(v) + " (this build reads " +
                        std::to_string(kConfigFormatVersion) + ")");
  }
  RunConfig c;
  bool have_model = false;
  for (const auto& kv : root) {
    const std::string key = kv.first.as<std::string>();
    if (key == "format_version") continue;
    if (key == "model") {
      read_model(r, kv.second, c.model);
      have_model = true;
    } else if (key == "train") {
      read_train(r, kv.second, c.train);
    } else if (key == "data") {
      read_data(r, kv.second, c.data);
    } else {
      r.fail(kv.first, "unknown section '" + key + "'");
    }
  }
  if (!have_model) throw ConfigError(origin, 0, "missing section 'model'");
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), 0, "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string emit_config(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const ModelConfig& m = c.model;
  os << "format_version: " << kConfigFormatVersion << "\n\nmodel:\n";
  os << "  backbone: " << (m.backbone == BackboneKind::ResNet ? "resnet" : "densenet") << '\n';
  if (m.backbone == BackboneKind::ResNet) {
    os << "  n: " << m.n << "\n  width: " << m.width << '\n';
  } else {
    os << "  growth: " << m.growth << "\n  layers: " << m.layers << "\n  stem_channels: " << m.stem_channels << '\n';
  }
  os << "  class_count: " << m.class_count << "\n  stages: " << m.stages << "\n  integration: "
     << to_string(m.integration) << "\n  integration_channels: " << m.integration_channels
     << "\n  sharing: " << to_string(m.sharing) << "\n\n";
  const TrainConfig& t = c.train;
  os << "train:\n  epochs: " << t.epochs << "\n  batch_size: " << t.batch_size << "\n  momentum: " << t.momentum
     << "\n  weight_decay: " << t.weight_decay << "\n  lr_schedule: \"" << format_schedule(t.lr_schedule)
     << "\"\n  seed: " << t.seed << "\n  eval_every: " << t.eval_every << "\n  bn_decay: "
     << (t.bn_decay ? "true" : "false") << "\n  augment: " << (t.augment ? "true" : "false") << "\n\n";
  const DataConfig& d = c.data;
  os << "data:\n  source: " << to_string(d.source) << '\n';
  if (!d.path.empty()) os << "  path: \"" << d.path << "\"\n";
  os << "  train_subset: " << d.train_subset << "\n  test_subset: " << d.test_subset << '\n';
  if (d.source == DataSource::Synth) {
    const SynthScaleConfig& s = d.synth;
    os << "  synth:\n    class_count: " << s.class_count << "\n    image_size: " << s.image_size
       << "\n    train_scales: [" << s.train_scales.lo << ", " << s.train_scales.hi << "]\n    test_scales: ["
       << s.test_scales.lo << ", " << s.test_scales.hi << "]\n    samples_per_class: " << s.samples_per_class
       << "\n    test_samples_per_class: " << s.test_samples_per_class << "\n    noise: " << s.noise
       << "\n    seed: " << s.seed << '\n';
  }
  return os.str();
}

}  // namespace wsms::app

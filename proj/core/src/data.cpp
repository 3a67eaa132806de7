// SPDX-License-Identifier: Apache-2.0
#include "wsms/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wsms/errors.hpp"
#include "wsms/rng.hpp"

namespace wsms {
namespace {

int label_limit(CifarVariant v) { return v == CifarVariant::C10 ? 10 : 100; }
std::size_t label_bytes(CifarVariant v) { return v == CifarVariant::C10 ? 1 : 2; }

}  // namespace

std::size_t cifar_record_bytes(CifarVariant variant, std::int64_t height, std::int64_t width) {
  return label_bytes(variant) + static_cast<std::size_t>(3 * height * width);
}

Dataset decode_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant, std::int64_t first_id,
                     std::int64_t height, std::int64_t width) {
  const std::size_t rec = cifar_record_bytes(variant, height, width);
  if (bytes.empty() || bytes.size() % rec != 0) {
    const std::size_t records = bytes.size() / rec + 1;
    throw FormatError("CIFAR data of " + std::to_string(bytes.size()) + " bytes is not a whole number of " +
                      std::to_string(rec) + "-byte records (expected " + std::to_string(records * rec) +
                      " bytes for " + std::to_string(records) + " records, actual " + std::to_string(bytes.size()) +
                      ")");
  }
  Dataset out;
  out.height = height;
  out.width = width;
  out.class_count = label_limit(variant);
  const std::size_t n = bytes.size() / rec;
  const std::size_t lb = label_bytes(variant);
  const std::size_t plane = static_cast<std::size_t>(3 * height * width);
  out.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    LabeledImage img;
    img.id = first_id + static_cast<std::int64_t>(i);
    if (variant == CifarVariant::C100) {
      if (r[0] >= 20) {
        throw FormatError("record " + std::to_string(i) + ": coarse label " + std::to_string(r[0]) +
                          " out of range [0, 20)");
      }
      img.coarse_label = r[0];
    }
    img.label = r[lb - 1];
    if (img.label >= out.class_count) {
      throw FormatError("record " + std::to_string(i) + ": label " + std::to_string(img.label) +
                        " out of range [0, " + std::to_string(out.class_count) + ")");
    }
    img.pixels.resize(plane);
    for (std::size_t p = 0; p < plane; ++p) img.pixels[p] = static_cast<float>(r[lb + p]) / 255.0f;
    out.images.push_back(std::move(img));
  }
  return out;
}

std::vector<std::uint8_t> encode_cifar(const Dataset& data, CifarVariant variant) {
  if (data.channels != 3) throw InvalidArgument("CIFAR records need 3 channels, got " + std::to_string(data.channels));
  const std::size_t rec = cifar_record_bytes(variant, data.height, data.width);
  const std::size_t lb = label_bytes(variant);
  std::vector<std::uint8_t> out(rec * data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const LabeledImage& img = data.images[i];
    if (img.pixels.size() != rec - lb) {
      throw InvalidArgument("image " + std::to_string(img.id) + " has " + std::to_string(img.pixels.size()) +
                            " values, expected " + std::to_string(rec - lb));
    }
    if (img.label < 0 || img.label >= label_limit(variant)) {
      throw InvalidArgument("image " + std::to_string(img.id) + ": label " + std::to_string(img.label) +
                            " does not fit the record format");
    }
    std::uint8_t* r = out.data() + i * rec;
    if (variant == CifarVariant::C100) r[0] = static_cast<std::uint8_t>(img.coarse_label.value_or(0));
    r[lb - 1] = static_cast<std::uint8_t>(img.label);
    for (std::size_t p = 0; p < rec - lb; ++p) {
      const float v = std::clamp(img.pixels[p], 0.0f, 1.0f);
      r[lb + p] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Dataset load_cifar(const std::filesystem::path& file, CifarVariant variant, std::int64_t first_id) {
  const auto bytes = read_file_bytes(file);
  try {
    return decode_cifar(bytes, variant, first_id);
  } catch (const FormatError& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
}

DatasetSplits load_cifar_dir(const std::filesystem::path& dir, CifarVariant variant) {
  std::vector<std::filesystem::path> train_files;
  std::filesystem::path test_file;
  if (variant == CifarVariant::C10) {
    for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    test_file = dir / "test_batch.bin";
  } else {
    train_files.push_back(dir / "train.bin");
    test_file = dir / "test.bin";
  }
  DatasetSplits out;
  out.train.class_count = label_limit(variant);
  for (const auto& f : train_files) {
    if (!std::filesystem::exists(f)) throw FormatError("missing CIFAR file " + f.string());
    Dataset part = load_cifar(f, variant, static_cast<std::int64_t>(out.train.size()));
    for (auto& img : part.images) out.train.images.push_back(std::move(img));
  }
  if (!std::filesystem::exists(test_file)) throw FormatError("missing CIFAR file " + test_file.string());
  // Test ids continue after the training ids so the two never collide.
  out.test = load_cifar(test_file, variant, static_cast<std::int64_t>(out.train.size()));
  return out;
}

// ---------------------------------------------------------------------------

Normalization fit_normalization(const Dataset& train) {
  if (train.size() == 0) throw InvalidArgument("cannot fit normalisation on an empty dataset");
  const auto c = static_cast<std::size_t>(train.channels);
  const auto plane = static_cast<std::size_t>(train.height * train.width);
  Normalization norm;
  norm.mean.assign(c, 0.0);
  norm.stddev.assign(c, 0.0);
  const double count = static_cast<double>(train.size() * plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0;
    for (const auto& img : train.images) {
      for (std::size_t p = 0; p < plane; ++p) sum += img.pixels[ch * plane + p];
    }
    const double mean = sum / count;
    double sq = 0;
    for (const auto& img : train.images) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = img.pixels[ch * plane + p] - mean;
        sq += d * d;
      }
    }
    double sd = std::sqrt(sq / count);
    if (!(sd > 1e-12)) {
      norm.warnings.push_back("channel " + std::to_string(ch) + " has zero variance; stddev set to 1");
      sd = 1.0;
    }
    norm.mean[ch] = mean;
    norm.stddev[ch] = sd;
  }
  return norm;
}

void apply_normalization(Dataset& data, const Normalization& norm) {
  const auto c = static_cast<std::size_t>(data.channels);
  if (norm.mean.size() != c || norm.stddev.size() != c) {
    throw InvalidArgument("normalisation has " + std::to_string(norm.mean.size()) + " channels, dataset has " +
                          std::to_string(c));
  }
  const auto plane = static_cast<std::size_t>(data.height * data.width);
  for (auto& img : data.images) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double m = norm.mean[ch], s = norm.stddev[ch];
      for (std::size_t p = 0; p < plane; ++p) {
        float& v = img.pixels[ch * plane + p];
        v = static_cast<float>((v - m) / s);
      }
    }
  }
}

Normalization normalize_per_channel(Dataset& train, std::span<Dataset* const> others) {
  Normalization norm = fit_normalization(train);
  apply_normalization(train, norm);
  for (Dataset* d : others) apply_normalization(*d, norm);
  return norm;
}

std::string serialize_normalization(const Normalization& norm) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < norm.mean.size(); ++i) os << (i ? " " : "") << norm.mean[i] << ':' << norm.stddev[i];
  return os.str();
}

Normalization parse_normalization(const std::string& text) {
  Normalization norm;
  std::istringstream is(text);
  std::string item;
  while (is >> item) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw FormatError("bad normalisation entry '" + item + "'");
    try {
      norm.mean.push_back(std::stod(item.substr(0, colon)));
      norm.stddev.push_back(std::stod(item.substr(colon + 1)));
    } catch (const std::exception&) {
      throw FormatError("bad normalisation entry '" + item + "'");
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------

LabeledImage augment_with(const LabeledImage& img, const Dataset& geometry, int offset_y, int offset_x, bool flip,
                          int pad) {
  if (offset_y < 0 || offset_x < 0 || offset_y > 2 * pad || offset_x > 2 * pad) {
    throw InvalidArgument("crop offset (" + std::to_string(offset_y) + ", " + std::to_string(offset_x) +
                          ") outside [0, " + std::to_string(2 * pad) + "]");
  }
  const std::int64_t h = geometry.height, w = geometry.width;
  LabeledImage out;
  out.label = img.label;
  out.id = img.id;
  out.coarse_label = img.coarse_label;
  out.pixels.assign(img.pixels.size(), 0.0f);
  for (std::int64_t c = 0; c < geometry.channels; ++c) {
    const float* src = img.pixels.data() + c * h * w;
    float* dst = out.pixels.data() + c * h * w;
    for (std::int64_t y = 0; y < h; ++y) {
      const std::int64_t sy = y + offset_y - pad;
      if (sy < 0 || sy >= h) continue;
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sx = x + offset_x - pad;
        if (sx < 0 || sx >= w) continue;
        dst[y * w + (flip ? w - 1 - x : x)] = src[sy * w + sx];
      }
    }
  }
  return out;
}

LabeledImage augment(const LabeledImage& img, const Dataset& geometry, std::mt19937_64& rng, int pad) {
  std::uniform_int_distribution<int> offset(0, 2 * pad);
  const int oy = offset(rng);
  const int ox = offset(rng);
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  return augment_with(img, geometry, oy, ox, flip, pad);
}

// ---------------------------------------------------------------------------

std::string to_string(Glyph g) {
  switch (g) {
    case Glyph::Disc: return "disc";
    case Glyph::Cross: return "cross";
    case Glyph::Ring: return "ring";
    case Glyph::BarPair: return "bar-pair";
    case Glyph::Triangle: return "triangle";
    case Glyph::Square: return "square";
    case Glyph::Diamond: return "diamond";
  }
  return "unknown";
}

namespace {

// Shape membership in glyph-box coordinates u, v in [-1, 1] (v grows downwards).
bool inside(Glyph g, double u, double v) {
  const double r = std::hypot(u, v);
  const double au = std::abs(u), av = std::abs(v);
  switch (g) {
    case Glyph::Disc: return r <= 0.9;
    case Glyph::Cross: return (au <= 0.25 && av <= 0.9) || (av <= 0.25 && au <= 0.9);
    case Glyph::Ring: return r >= 0.5 && r <= 0.9;
    case Glyph::BarPair: return au >= 0.3 && au <= 0.75 && av <= 0.9;
    case Glyph::Triangle: return v <= 0.8 && v >= -0.9 && au <= (v + 0.9) * 0.5;
    case Glyph::Square: return std::max(au, av) <= 0.85 && std::max(au, av) >= 0.5;
    case Glyph::Diamond: return au + av <= 0.95;
  }
  return false;
}

constexpr int kSupersample = 4;

void check_scale(double scale, int size) {
  if (!(scale > 0.0 && scale <= 1.0)) throw InvalidArgument("glyph scale must be in (0, 1], got " + std::to_string(scale));
  if (scale * size < 2.0) {
    throw InvalidArgument("glyph scale " + std::to_string(scale) + " covers " + std::to_string(scale * size) +
                          " pixels at image size " + std::to_string(size) + "; at least 2 are needed");
  }
}

Dataset render_split(const SynthScaleConfig& cfg, const ScaleRange& scales, int per_class, std::uint64_t seed,
                     std::int64_t first_id) {
  Dataset out;
  out.height = out.width = cfg.image_size;
  out.class_count = cfg.class_count;
  const auto n = static_cast<std::size_t>(per_class) * static_cast<std::size_t>(cfg.class_count);
  const int size = cfg.image_size;
  const std::size_t plane = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed({seed, i}));
    // Interleaved classes keep any prefix of the split close to balanced.
    const int label = static_cast<int>(i % static_cast<std::size_t>(cfg.class_count));
    const double scale = std::uniform_real_distribution<double>(scales.lo, scales.hi)(rng);
    const double half = scale * size / 2.0;
    std::uniform_real_distribution<double> pos(half, size - half);
    const double cx = pos(rng), cy = pos(rng);
    const auto coverage = render_glyph(static_cast<Glyph>(label), size, scale, cx, cy);
    std::array<double, 3> fg{}, bg{};
    for (int c = 0; c < 3; ++c) {
      fg[static_cast<std::size_t>(c)] = std::uniform_real_distribution<double>(0.55, 1.0)(rng);
      bg[static_cast<std::size_t>(c)] = std::uniform_real_distribution<double>(0.0, 0.35)(rng);
    }
    std::normal_distribution<double> noise(0.0, cfg.noise);
    LabeledImage img;
    img.label = label;
    img.id = first_id + static_cast<std::int64_t>(i);
    img.pixels.resize(3 * plane);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        double v = bg[c] + (fg[c] - bg[c]) * coverage[p];
        if (cfg.noise > 0) v += noise(rng);
        v = std::clamp(v, 0.0, 1.0);
        // Quantised so the persisted byte form decodes to the same values.
        img.pixels[c * plane + p] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
      }
    }
    out.images.push_back(std::move(img));
  }
  return out;
}

}  // namespace

void validate(const SynthScaleConfig& cfg) {
  if (cfg.class_count < 2 || cfg.class_count > kGlyphCount) {
    throw InvalidArgument("synthetic class_count must be in [2, " + std::to_string(kGlyphCount) + "], got " +
                          std::to_string(cfg.class_count));
  }
  if (cfg.image_size < 4) throw InvalidArgument("synthetic image_size must be >= 4");
  for (const auto* r : {&cfg.train_scales, &cfg.test_scales}) {
    if (r->lo > r->hi) throw InvalidArgument("scale range lower bound exceeds upper bound");
    check_scale(r->lo, cfg.image_size);
    check_scale(r->hi, cfg.image_size);
  }
  if (cfg.train_scales.overlaps(cfg.test_scales)) {
    throw InvalidArgument("train scales [" + std::to_string(cfg.train_scales.lo) + ", " +
                          std::to_string(cfg.train_scales.hi) + "] overlap held-out scales [" +
                          std::to_string(cfg.test_scales.lo) + ", " + std::to_string(cfg.test_scales.hi) + "]");
  }
  if (cfg.samples_per_class < 1 || cfg.test_samples_per_class < 1) {
    throw InvalidArgument("synthetic sample counts must be positive");
  }
  if (cfg.noise < 0) throw InvalidArgument("synthetic noise must be >= 0");
}

std::vector<float> render_glyph(Glyph glyph, int size, double scale, double cx, double cy) {
  check_scale(scale, size);
  const double half = scale * size / 2.0;
  std::vector<float> out(static_cast<std::size_t>(size) * static_cast<std::size_t>(size), 0.0f);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSupersample; ++sy) {
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double px = x + (sx + 0.5) / kSupersample;
          const double py = y + (sy + 0.5) / kSupersample;
          hits += inside(glyph, (px - cx) / half, (py - cy) / half);
        }
      }
      out[static_cast<std::size_t>(y * size + x)] = static_cast<float>(hits) / (kSupersample * kSupersample);
    }
  }
  return out;
}

SynthSplits synth_scale_dataset(const SynthScaleConfig& cfg) {
  validate(cfg);
  SynthSplits out;
  out.train = render_split(cfg, cfg.train_scales, cfg.samples_per_class, derive_seed({cfg.seed, 1}), 0);
  out.test_seen = render_split(cfg, cfg.train_scales, cfg.test_samples_per_class, derive_seed({cfg.seed, 2}),
                               static_cast<std::int64_t>(out.train.size()));
  out.test_held_out =
      render_split(cfg, cfg.test_scales, cfg.test_samples_per_class, derive_seed({cfg.seed, 3}),
                   static_cast<std::int64_t>(out.train.size() + out.test_seen.size()));
  return out;
}

void write_synth_dataset(const std::filesystem::path& dir, const SynthSplits& splits,
                         const SynthScaleConfig& cfg) {
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::object();
  const std::pair<const char*, const Dataset*> parts[] = {
      {"train.bin", &splits.train}, {"test_seen.bin", &splits.test_seen}, {"test_held_out.bin", &splits.test_held_out}};
  for (const auto& [name, data] : parts) {
    const auto bytes = encode_cifar(*data, CifarVariant::C10);
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing " + (dir / name).string());
    std::ostringstream hash;
    hash << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(bytes);
    files[name] = {{"records", data->size()}, {"first_id", data->images.empty() ? 0 : data->images.front().id},
                   {"fnv1a64", hash.str()}};
  }
  nlohmann::json manifest = {
      {"format", "wsms-synth-scale"},
      {"format_version", 1},
      {"seed", cfg.seed},
      {"class_count", cfg.class_count},
      {"classes", nlohmann::json::array()},
      {"image_size", cfg.image_size},
      {"train_scales", {cfg.train_scales.lo, cfg.train_scales.hi}},
      {"test_scales", {cfg.test_scales.lo, cfg.test_scales.hi}},
      {"samples_per_class", cfg.samples_per_class},
      {"test_samples_per_class", cfg.test_samples_per_class},
      {"noise", cfg.noise},
      {"record_layout", "label byte + 3 planes of image_size^2 bytes"},
      {"files", files},
  };
  for (int c = 0; c < cfg.class_count; ++c) manifest["classes"].push_back(to_string(static_cast<Glyph>(c)));
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw FormatError("failed writing " + (dir / "manifest.json").string());
}

SynthSplits read_synth_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("missing " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  if (m.value("format", "") != "wsms-synth-scale") throw FormatError("manifest.json: not a synthetic dataset manifest");
  const std::int64_t size = m.at("image_size").get<std::int64_t>();
  const int classes = m.at("class_count").get<int>();
  auto load = [&](const char* name) {
    const auto bytes = read_file_bytes(dir / name);
    const auto& entry = m.at("files").at(name);
    const std::int64_t first = entry.at("first_id").get<std::int64_t>();
    std::ostringstream hash;
    hash << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(bytes);
    if (entry.value("fnv1a64", hash.str()) != hash.str()) {
      throw FormatError((dir / name).string() + ": content hash " + hash.str() + " does not match manifest " +
                        entry.value("fnv1a64", ""));
    }
    Dataset d;
    try {
      d = decode_cifar(bytes, CifarVariant::C10, first, size, size);
    } catch (const FormatError& e) {
      throw FormatError((dir / name).string() + ": " + e.what());
    }
    d.class_count = classes;
    for (const auto& img : d.images) {
      if (img.label >= classes) throw FormatError((dir / name).string() + ": label exceeds class_count");
    }
    return d;
  };
  return {load("train.bin"), load("test_seen.bin"), load("test_held_out.bin")};
}

}  // namespace wsms

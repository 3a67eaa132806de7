// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace wsms {

// Pixels are planar C x H x W floats. Decoded images are in [0, 1]; after
// normalisation they are zero-mean per channel.
struct LabeledImage {
  std::vector<float> pixels;
  int label = 0;
  std::int64_t id = 0;
  std::optional<int> coarse_label;  // CIFAR-100 only, kept for re-encoding
};

struct Dataset {
  std::int64_t channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;
  int class_count = 10;
  std::vector<LabeledImage> images;

  std::size_t size() const noexcept { return images.size(); }
  std::size_t pixels_per_image() const noexcept { return static_cast<std::size_t>(channels * height * width); }
};

// ---------------------------------------------------------------------------
// CIFAR binary format. CIFAR-10 records: 1 label byte + 3 x 1024 plane bytes
// (R, G, B, each row-major). CIFAR-100 records: coarse label byte, fine label
// byte, then the same pixel planes; the fine label is used.

enum class CifarVariant { C10, C100 };

std::size_t cifar_record_bytes(CifarVariant variant, std::int64_t height = 32, std::int64_t width = 32);

Dataset decode_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant, std::int64_t first_id = 0,
                     std::int64_t height = 32, std::int64_t width = 32);
std::vector<std::uint8_t> encode_cifar(const Dataset& data, CifarVariant variant);

Dataset load_cifar(const std::filesystem::path& file, CifarVariant variant, std::int64_t first_id = 0);

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

// Reads data_batch_{1..5}.bin + test_batch.bin (CIFAR-10) or train.bin +
// test.bin (CIFAR-100) from a directory.
DatasetSplits load_cifar_dir(const std::filesystem::path& dir, CifarVariant variant);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& file);
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

// ---------------------------------------------------------------------------
// Per-channel normalisation.

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::string> warnings;  // one per channel whose stddev was guarded to 1
};

// Population statistics of each channel over the whole dataset.
Normalization fit_normalization(const Dataset& train);
void apply_normalization(Dataset& data, const Normalization& norm);

// Fits on `train` and applies to train and every extra split.
Normalization normalize_per_channel(Dataset& train, std::span<Dataset* const> others = {});

std::string serialize_normalization(const Normalization& norm);
Normalization parse_normalization(const std::string& text);

// ---------------------------------------------------------------------------
// Augmentation: zero-pad by `pad` on every side, crop back to the original
// size at (offset_y, offset_x) in the padded image, then optionally mirror
// horizontally. offset (pad, pad) without flip is the identity.

LabeledImage augment_with(const LabeledImage& img, const Dataset& geometry, int offset_y, int offset_x, bool flip,
                          int pad = 4);
LabeledImage augment(const LabeledImage& img, const Dataset& geometry, std::mt19937_64& rng, int pad = 4);

// ---------------------------------------------------------------------------
// Synthetic scale-generalisation benchmark: procedurally rendered glyph classes
// where the training split only shows objects in one size range and a
// held-out split only in a disjoint smaller range.

enum class Glyph { Disc, Cross, Ring, BarPair, Triangle, Square, Diamond };
inline constexpr int kGlyphCount = 7;
std::string to_string(Glyph g);

struct ScaleRange {
  double lo = 0.6;
  double hi = 1.0;
  bool overlaps(const ScaleRange& o) const { return lo <= o.hi && o.lo <= hi; }
};

struct SynthScaleConfig {
  int class_count = 5;
  int image_size = 32;
  ScaleRange train_scales{0.6, 1.0};
  ScaleRange test_scales{0.3, 0.5};
  int samples_per_class = 400;       // training images per class
  int test_samples_per_class = 100;  // per class in each test split
  double noise = 0.05;               // stddev of additive Gaussian pixel noise
  std::uint64_t seed = 1;
};

struct SynthSplits {
  Dataset train;
  Dataset test_seen;      // scales drawn from train_scales
  Dataset test_held_out;  // scales drawn from test_scales
};

void validate(const SynthScaleConfig& config);

// Anti-aliased coverage in [0, 1] of a glyph whose bounding box has side
// scale * size pixels, centred at (cx, cy) in pixel coordinates. Row-major size x size.
std::vector<float> render_glyph(Glyph glyph, int size, double scale, double cx, double cy);

SynthSplits synth_scale_dataset(const SynthScaleConfig& config);

// Writes train.bin, test_seen.bin, test_held_out.bin (CIFAR-10 record layout at
// the configured image size) and manifest.json describing config and seed.
void write_synth_dataset(const std::filesystem::path& dir, const SynthSplits& splits,
                         const SynthScaleConfig& config);
SynthSplits read_synth_dataset(const std::filesystem::path& dir);

}  // namespace wsms

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "covt/tensor.hpp"

namespace covt {

struct Sample {
  Tensor image;  // [3, H, W], normalized
  std::size_t label = 0;
  std::string source;  // file path, or "synth:<class>:<index>"
};

struct Dataset {
  std::vector<Sample> items;
  std::vector<std::string> class_names;
  std::string split = "all";

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  std::size_t num_classes() const { return class_names.size(); }

  /// Stacks the selected images into [B, 3, H, W].
  Tensor images(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> labels(std::span<const std::size_t> indices) const;
};

/// Per-channel (x - mean) / std applied to [0, 1] pixel values.
struct Normalization {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stddev{0.5, 0.5, 0.5};
};

Tensor normalize(const Tensor& image, const Normalization& norm);
Tensor denormalize(const Tensor& image, const Normalization& norm);

/// Decoded image as planar RGB in [0, 1]; grayscale is replicated to three
/// channels.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // [3, H, W]
};

/// PNG, binary/ASCII PPM (P3/P6) and PGM (P2/P5). Throws DataError.
RgbImage decode_image(const std::filesystem::path& path);
/// Bilinear resampling with half-pixel centers.
RgbImage resize_bilinear(const RgbImage& image, std::size_t height, std::size_t width);
/// Writes 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const RgbImage& image);

struct LoadReport {
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

/// Reads `<root>/<class_name>/*.png|ppm|pgm`. Classes are sorted by name;
/// files within a class by file name. Undecodable files are skipped and
/// counted; a class directory without any loadable image is an error.
Dataset load_image_dir(const std::filesystem::path& root, std::size_t height, std::size_t width,
                       const Normalization& norm = {}, LoadReport* report = nullptr);

struct SynthConfig {
  std::size_t per_class = 16;
  std::size_t num_classes = 2;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

/// Class-separable synthetic images: class k is an oriented sinusoid with a
/// class-specific frequency, orientation and brightness offset, plus seeded
/// Gaussian noise. Values are already in normalized space.
Dataset synth_dataset(const SynthConfig& config);

/// Writes a dataset as `<dir>/<class_name>/<index>.png`.
void write_dataset_png(const Dataset& data, const std::filesystem::path& dir, const Normalization& norm = {});

/// Stratified, seeded split into (train, val). `fractions` holds one or two
/// positive entries summing to at most 1.
std::pair<Dataset, Dataset> split(const Dataset& data, std::span<const double> fractions, std::uint64_t seed);

}  // namespace covt

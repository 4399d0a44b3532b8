#pragma once

// Class-folder dataset ingestion, stratified 70/15/15 splitting, and the
// synthetic blob dataset used as verifiable ground truth.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xmed/model.hpp"
#include "xmed/tensor.hpp"

namespace xmed {

/// Pixel rectangle [x0, x1) x [y0, y1).
struct BoundingBox {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t x1 = 0;
  std::size_t y1 = 0;

  bool contains(std::size_t x, std::size_t y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const BoundingBox&) const = default;
};

struct Sample {
  std::string source;  // file path, or a synthetic identifier
  Tensor image;        // 1 x c x h x w, raw [0,255] values
  int label = 0;
  std::optional<BoundingBox> lesion_box;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  ImageShape image_shape;
  std::size_t positive_class = 0;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::vector<std::size_t> class_counts() const;
};

struct LoadResult {
  Dataset dataset;
  std::vector<std::string> warnings;
};

/// Reads `root/<class>/*.png`. Classes are the sorted subdirectory names;
/// files are visited in sorted order and resized bilinearly to image_size.
/// Empty class folders produce warnings; undecodable files are collected
/// and reported together in one IoError.
LoadResult load_dataset(const std::filesystem::path& root, ImageShape image_size);

/// Default positive class: the lexicographically greatest name.
std::size_t default_positive_class(const std::vector<std::string>& class_names);

struct SplitSpec {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
  std::uint64_t seed = 0;
};

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Per-class stratified split. Each class's samples are sorted by source,
/// shuffled with the seed, then cut into floor(train * n), floor(val * n)
/// and the remainder.
Splits split_dataset(const Dataset& dataset, const SplitSpec& spec);

struct SyntheticSpec {
  double background_mean = 60.0;
  double background_std = 20.0;
  double min_amplitude = 110.0;
  double max_amplitude = 170.0;
  double min_sigma_frac = 0.05;  // blob sigma as a fraction of the shorter side
  double max_sigma_frac = 0.08;
  double box_sigmas = 2.0;       // bounding box half-width in sigmas
};

/// Balanced two-class dataset ("lesion", "normal"). Lesion images carry one
/// bright Gaussian blob on the noise background and record its bounding box;
/// the positive class is "lesion".
Dataset generate_synthetic(std::size_t n, ImageShape size, std::uint64_t seed, const SyntheticSpec& spec = {});

}  // namespace xmed

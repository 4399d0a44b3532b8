#pragma once

// Seedable on-the-fly augmentation: rescale, then a random affine warp
// (rotation, zoom, shift, horizontal flip) with reflect fill.

#include <cstddef>
#include <cstdint>

#include "xmed/tensor.hpp"

namespace xmed {

struct AugmentConfig {
  double rescale = 1.0 / 255.0;
  double max_rotation_deg = 15.0;
  double max_shift_frac = 0.10;
  double max_zoom_frac = 0.10;
  bool hflip = true;
  std::uint64_t seed = 0;

  /// Throws ConfigError when a range is out of bounds.
  void validate() const;

  /// A configuration whose warp is the identity (rescale kept).
  static AugmentConfig none(double rescale = 1.0 / 255.0);
};

/// Shift is stored as a fraction of the image width / height.
struct AffineParams {
  double angle_deg = 0.0;
  double shift_x = 0.0;
  double shift_y = 0.0;
  double zoom = 1.0;
  bool flip = false;

  bool operator==(const AffineParams&) const = default;
};

Tensor rescale(const Tensor& image, double factor);

/// Draws from a stream keyed on (seed, sample_index, epoch), so any sample of
/// any epoch can be regenerated independently.
AffineParams sample_params(const AugmentConfig& config, std::size_t sample_index, std::size_t epoch);

/// Mirror-without-edge-repeat: on [1,2,3], index -1 reads 2 and index 3 reads 2.
std::size_t reflect_index(std::ptrdiff_t index, std::size_t length);

/// Inverse-mapped warp of a single image about its center with bilinear
/// sampling and reflect fill.
Tensor apply_affine(const Tensor& image, const AffineParams& params);

/// rescale followed by apply_affine with freshly sampled parameters.
Tensor augment_image(const Tensor& raw, const AugmentConfig& config, std::size_t sample_index, std::size_t epoch);

}  // namespace xmed

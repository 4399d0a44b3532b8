#include "xmed/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "xmed/error.hpp"

namespace xmed {
namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class SampleStream {
 public:
  SampleStream(std::uint64_t seed, std::uint64_t index, std::uint64_t epoch) : state_(seed) {
    state_ ^= splitmix64(state_) + index;
    state_ ^= splitmix64(state_) + epoch;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(splitmix64(state_) >> 11) * 0x1.0p-53; }

  double symmetric(double half_width) { return (2.0 * uniform() - 1.0) * half_width; }

 private:
  std::uint64_t state_;
};

}  // namespace

void AugmentConfig::validate() const {
  if (!(max_shift_frac >= 0.0 && max_shift_frac < 1.0)) throw ConfigError("max_shift_frac must be in [0,1)");
  if (!(max_zoom_frac >= 0.0 && max_zoom_frac < 1.0)) throw ConfigError("max_zoom_frac must be in [0,1)");
  if (!(max_rotation_deg >= 0.0)) throw ConfigError("max_rotation_deg must be >= 0");
  if (!std::isfinite(rescale)) throw ConfigError("rescale must be finite");
}

AugmentConfig AugmentConfig::none(double rescale) {
  AugmentConfig c;
  c.rescale = rescale;
  c.max_rotation_deg = 0.0;
  c.max_shift_frac = 0.0;
  c.max_zoom_frac = 0.0;
  c.hflip = false;
  return c;
}

Tensor rescale(const Tensor& image, double factor) {
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = static_cast<float>(image[i] * factor);
  return out;
}

AffineParams sample_params(const AugmentConfig& config, std::size_t sample_index, std::size_t epoch) {
  SampleStream rng(config.seed, sample_index, epoch);
  // Always consume five draws so streams stay aligned across configs.
  AffineParams p;
  p.angle_deg = rng.symmetric(config.max_rotation_deg);
  p.shift_x = rng.symmetric(config.max_shift_frac);
  p.shift_y = rng.symmetric(config.max_shift_frac);
  p.zoom = 1.0 + rng.symmetric(config.max_zoom_frac);
  p.flip = rng.uniform() < 0.5 && config.hflip;
  return p;
}

std::size_t reflect_index(std::ptrdiff_t index, std::size_t length) {
  if (length <= 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (length - 1));
  std::ptrdiff_t i = index % period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(length)) i = period - i;
  return static_cast<std::size_t>(i);
}

Tensor apply_affine(const Tensor& image, const AffineParams& params) {
  if (image.n() != 1) throw ShapeError("apply_affine expects a single image, got " + image.shape().str());
  const std::size_t h = image.h();
  const std::size_t w = image.w();
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta);
  const double sin_t = std::sin(theta);
  const double dx = params.shift_x * static_cast<double>(w);
  const double dy = params.shift_y * static_cast<double>(h);

  Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Undo flip, shift, rotation and zoom in that order.
      const double xo = params.flip ? static_cast<double>(w - 1 - x) : static_cast<double>(x);
      const double u = xo - cx - dx;
      const double v = static_cast<double>(y) - cy - dy;
      const double sx = (cos_t * u + sin_t * v) / params.zoom + cx;
      const double sy = (-sin_t * u + cos_t * v) / params.zoom + cy;
      const double fx0 = std::floor(sx);
      const double fy0 = std::floor(sy);
      const double fx = sx - fx0;
      const double fy = sy - fy0;
      const auto ix = static_cast<std::ptrdiff_t>(fx0);
      const auto iy = static_cast<std::ptrdiff_t>(fy0);
      const std::size_t x0 = reflect_index(ix, w);
      const std::size_t x1 = reflect_index(ix + 1, w);
      const std::size_t y0 = reflect_index(iy, h);
      const std::size_t y1 = reflect_index(iy + 1, h);
      for (std::size_t c = 0; c < image.c(); ++c) {
        const float a = image(0, c, y0, x0);
        const float b = image(0, c, y0, x1);
        const float d = image(0, c, y1, x0);
        const float e = image(0, c, y1, x1);
        const double top = (1.0 - fx) * a + fx * b;
        const double bottom = (1.0 - fx) * d + fx * e;
        // Bilinear is a convex combination; clamp away rounding overshoot.
        const float v = static_cast<float>((1.0 - fy) * top + fy * bottom);
        out(0, c, y, x) = std::clamp(v, std::min({a, b, d, e}), std::max({a, b, d, e}));
      }
    }
  }
  return out;
}

Tensor augment_image(const Tensor& raw, const AugmentConfig& config, std::size_t sample_index, std::size_t epoch) {
  return apply_affine(rescale(raw, config.rescale), sample_params(config, sample_index, epoch));
}

}  // namespace xmed

#pragma once

// Grad-CAM: channel weights are spatially averaged gradients of a raw class
// logit with respect to the captured feature maps; the map is the ReLU of the
// weighted feature-map sum, normalized to [0,1] and overlaid as a colormap.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xmed/image.hpp"
#include "xmed/model.hpp"

namespace xmed {

/// Row-major 2-D grid of reals.
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  Grid(std::size_t h, std::size_t w, std::vector<double> v);

  double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  bool operator==(const Grid&) const = default;
};

struct Heatmap {
  Grid grid;  // values in [0,1]; max is 1 unless the map is all zero
  std::string source_layer;
  std::size_t class_index = 0;
};

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  bool operator==(const Rgb&) const = default;
};

/// alpha_k = mean over (h, w) of channel k. Requires a batch of one.
std::vector<double> cam_weights(const Tensor& grad_capture);

/// ReLU(sum_k alpha_k * activation[0, k]).
Grid cam_map(const Tensor& activation, std::span<const double> alpha);

/// Divides by the maximum; an all-zero map stays zero.
Heatmap normalize(const Grid& raw);

/// Align-corners bilinear: output index i samples input i * (in-1) / (out-1);
/// a single output row/column samples the input center.
Grid upsample_bilinear(const Grid& map, std::size_t out_h, std::size_t out_w);

/// Piecewise-linear blue, cyan, green, yellow, red at t = 0, .25, .5, .75, 1,
/// rounded half-up. t is clamped to [0,1].
Rgb colormap(double t);

/// (1 - alpha) * image + alpha * colormap(heat), rounded half-up. Gray images
/// are expanded to RGB first.
Image8 overlay(const Image8& image, const Grid& heat, double alpha);

struct Explanation {
  Heatmap heatmap;   // at capture-layer resolution
  Grid upsampled;    // heatmap at input resolution
  Image8 overlay;
  std::size_t class_index = 0;
  std::vector<double> probabilities;
};

/// Full pipeline for one image given as raw [0,255] values (1 x c x h x w):
/// rescale, forward with capture, backward from the target logit (predicted
/// class unless given), weights, map, normalize, upsample, overlay.
Explanation explain(const Model& model, const Tensor& raw_image, std::optional<std::size_t> class_index = std::nullopt,
                    double alpha = 0.4, double rescale_factor = 1.0 / 255.0);

}  // namespace xmed

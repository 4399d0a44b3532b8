#include "xmed/gradcam.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "xmed/augment.hpp"
#include "xmed/error.hpp"
#include "xmed/layers.hpp"

namespace xmed {
namespace {

std::uint8_t round_half_up(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

}  // namespace

Grid::Grid(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
  if (values.size() != h * w) throw ShapeError("grid data does not match " + std::to_string(h) + "x" + std::to_string(w));
}

std::vector<double> cam_weights(const Tensor& grad_capture) {
  if (grad_capture.n() != 1) throw ShapeError("cam_weights expects a batch of one, got " + grad_capture.shape().str());
  std::vector<double> alpha(grad_capture.c(), 0.0);
  const std::size_t plane = grad_capture.h() * grad_capture.w();
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    const float* p = grad_capture.plane(0, k);
    double sum = 0;
    for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    alpha[k] = sum / static_cast<double>(plane);
  }
  return alpha;
}

Grid cam_map(const Tensor& activation, std::span<const double> alpha) {
  if (activation.n() != 1) throw ShapeError("cam_map expects a batch of one, got " + activation.shape().str());
  if (alpha.size() != activation.c()) {
    throw ShapeError("cam_map: " + std::to_string(alpha.size()) + " weights for activation " +
                     activation.shape().str());
  }
  Grid map(activation.h(), activation.w());
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    const float* p = activation.plane(0, k);
    for (std::size_t i = 0; i < map.values.size(); ++i) map.values[i] += alpha[k] * p[i];
  }
  for (auto& v : map.values) v = std::max(v, 0.0);
  return map;
}

Heatmap normalize(const Grid& raw) {
  Heatmap h{raw, {}, 0};
  double top = 0;
  for (double v : raw.values) top = std::max(top, v);
  if (top > 0) {
    for (auto& v : h.grid.values) v = std::clamp(v / top, 0.0, 1.0);
  } else {
    std::fill(h.grid.values.begin(), h.grid.values.end(), 0.0);
  }
  return h;
}

Grid upsample_bilinear(const Grid& map, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ShapeError("upsample target must be >= 1");
  if (map.values.empty()) throw ShapeError("cannot upsample an empty grid");
  auto source = [](std::size_t i, std::size_t in, std::size_t out) {
    if (out == 1) return (static_cast<double>(in) - 1.0) / 2.0;
    return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  };
  Grid out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = source(y, map.height, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, map.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = source(x, map.width, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, map.width - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1 - fx) * map.at(y0, x0) + fx * map.at(y0, x1);
      const double bottom = (1 - fx) * map.at(y1, x0) + fx * map.at(y1, x1);
      out.at(y, x) = (1 - fy) * top + fy * bottom;
    }
  }
  return out;
}

Rgb colormap(double t) {
  static constexpr std::array<std::array<double, 3>, 5> kStops = {{
      {0, 0, 255},
      {0, 255, 255},
      {0, 255, 0},
      {255, 255, 0},
      {255, 0, 0},
  }};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  const double pos = t * 4.0;
  const auto seg = std::min<std::size_t>(static_cast<std::size_t>(pos), 3);
  const double f = pos - static_cast<double>(seg);
  const auto& a = kStops[seg];
  const auto& b = kStops[seg + 1];
  return {round_half_up(a[0] + f * (b[0] - a[0])), round_half_up(a[1] + f * (b[1] - a[1])),
          round_half_up(a[2] + f * (b[2] - a[2]))};
}

Image8 overlay(const Image8& image, const Grid& heat, double alpha) {
  if (heat.height != image.height || heat.width != image.width) {
    throw ShapeError("overlay: heatmap " + std::to_string(heat.height) + "x" + std::to_string(heat.width) +
                     " vs image " + std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("overlay alpha must be in [0,1]");
  if (image.channels != 1 && image.channels != 3) throw InputError("overlay expects a gray or RGB image");
  Image8 out(image.height, image.width, 3);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const Rgb c = colormap(heat.at(y, x));
      const std::uint8_t tint[3] = {c.r, c.g, c.b};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double base = image.at(y, x, image.channels == 3 ? ch : 0);
        out.at(y, x, ch) = round_half_up((1.0 - alpha) * base + alpha * tint[ch]);
      }
    }
  }
  return out;
}

Explanation explain(const Model& model, const Tensor& raw_image, std::optional<std::size_t> class_index, double alpha,
                    double rescale_factor) {
  if (raw_image.n() != 1) throw ShapeError("explain expects a single image, got " + raw_image.shape().str());
  const ForwardPass<float> pass = model.forward(rescale(raw_image, rescale_factor));
  Explanation ex;
  const Tensor probs = softmax(pass.logits);
  ex.probabilities.assign(probs.values().begin(), probs.values().end());
  ex.class_index = class_index.value_or(
      static_cast<std::size_t>(std::max_element(pass.logits.values().begin(), pass.logits.values().end()) -
                               pass.logits.values().begin()));

  const Tensor grad = model.backward_to_capture(pass, ex.class_index);
  ex.heatmap = normalize(cam_map(pass.captured, cam_weights(grad)));
  ex.heatmap.source_layer = model.capture_layer();
  ex.heatmap.class_index = ex.class_index;
  ex.upsampled = upsample_bilinear(ex.heatmap.grid, raw_image.h(), raw_image.w());
  ex.overlay = overlay(tensor_to_image(raw_image), ex.upsampled, alpha);
  return ex;
}

}  // namespace xmed

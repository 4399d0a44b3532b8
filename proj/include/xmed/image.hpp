#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "xmed/tensor.hpp"

namespace xmed {

/// 8-bit image with interleaved channels (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }

  bool operator==(const Image8&) const = default;
};

/// Decodes an 8-bit (or wider, reduced to 8-bit) gray or color PNG. Alpha is
/// dropped. Throws IoError with the path on failure.
Image8 read_png(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image8& image);

/// 1 x channels x h x w tensor of raw [0,255] values. RGB is reduced to gray
/// with ITU-R BT.601 luma weights when channels == 1; gray is replicated when
/// channels == 3.
Tensor image_to_tensor(const Image8& image, std::size_t channels);

/// Rounds half-up and clamps each value of sample 0 into an 8-bit image.
Image8 tensor_to_image(const Tensor& raw);

/// Half-pixel-center bilinear resize of every sample and channel; identity
/// when the size is unchanged.
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);

}  // namespace xmed

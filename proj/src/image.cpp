#include "xmed/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "xmed/error.hpp"

namespace xmed {

Image8 read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 image(png.height, png.width, color ? 3 : 1);
  if (!png_image_finish_read(&png, nullptr, image.pixels.data(), 0, nullptr)) {
    const std::string message = png.message;
    png_image_free(&png);
    throw IoError("cannot decode PNG " + path.string() + ": " + message);
  }
  return image;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw InputError("write_png: only gray or RGB images");
  if (image.pixels.size() != image.height * image.width * image.channels) throw ShapeError("write_png: bad buffer size");
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

Tensor image_to_tensor(const Image8& image, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ConfigError("image channels must be 1 or 3");
  Tensor t({1, channels, image.height, image.width});
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      if (image.channels == channels) {
        for (std::size_t c = 0; c < channels; ++c) t(0, c, y, x) = image.at(y, x, c);
      } else if (channels == 1) {
        t(0, 0, y, x) = static_cast<float>(0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) +
                                           0.114 * image.at(y, x, 2));
      } else {
        for (std::size_t c = 0; c < 3; ++c) t(0, c, y, x) = image.at(y, x, 0);
      }
    }
  }
  return t;
}

Image8 tensor_to_image(const Tensor& raw) {
  Image8 image(raw.h(), raw.w(), raw.c());
  for (std::size_t y = 0; y < raw.h(); ++y) {
    for (std::size_t x = 0; x < raw.w(); ++x) {
      for (std::size_t c = 0; c < raw.c(); ++c) {
        const double v = std::floor(static_cast<double>(raw(0, c, y, x)) + 0.5);
        image.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  return image;
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ShapeError("resize target must be >= 1");
  if (image.h() == out_h && image.w() == out_w) return image;
  const Shape4& s = image.shape();
  Tensor out({s.n, s.c, out_h, out_w});
  const double scale_y = static_cast<double>(s.h) / static_cast<double>(out_h);
  const double scale_x = static_cast<double>(s.w) / static_cast<double>(out_w);
  auto source = [](double pos, std::size_t len, std::size_t& i0, std::size_t& i1, double& frac) {
    pos = std::clamp(pos, 0.0, static_cast<double>(len - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, len - 1);
    frac = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    source((static_cast<double>(y) + 0.5) * scale_y - 0.5, s.h, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      source((static_cast<double>(x) + 0.5) * scale_x - 0.5, s.w, x0, x1, fx);
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
          const double top = (1 - fx) * image(n, c, y0, x0) + fx * image(n, c, y0, x1);
          const double bottom = (1 - fx) * image(n, c, y1, x0) + fx * image(n, c, y1, x1);
          out(n, c, y, x) = static_cast<float>((1 - fy) * top + fy * bottom);
        }
      }
    }
  }
  return out;
}

}  // namespace xmed

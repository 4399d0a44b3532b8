#pragma once

// Neural layer primitives with hand-written forward and vector-Jacobian
// (backward) passes. Every forward returns its output together with the cache
// its backward needs; caches are plain values owned by the caller.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "xmed/error.hpp"
#include "xmed/tensor.hpp"

namespace xmed {

enum class Padding { same, valid };
enum class Mode { train, infer };

template <typename T, typename Cache>
struct Forward {
  Tensor4<T> output;
  Cache cache;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require_valid(bool valid, const char* op) {
  if (!valid) throw UsageError(std::string(op) + ": backward called without a matching forward cache");
}

inline void require_grad_shape(const Shape4& grad, const Shape4& expected, const char* op) {
  if (grad != expected) {
    throw UsageError(std::string(op) + ": gradient shape " + grad.str() + " does not match forward output " +
                     expected.str() + " (stale cache?)");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// Output size and top/left zero padding of a 2-D convolution or pooling window.
struct WindowGeometry {
  std::size_t out_h = 1;
  std::size_t out_w = 1;
  std::size_t pad_top = 0;
  std::size_t pad_left = 0;
};

/// "same" pads symmetrically with the odd pixel on the bottom/right and yields
/// ceil(size / stride); "valid" yields floor((size - k) / stride) + 1.
inline WindowGeometry window_geometry(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                                      std::size_t stride, Padding padding) {
  if (stride == 0) throw ShapeError("stride must be >= 1");
  WindowGeometry g;
  if (padding == Padding::same) {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    const std::size_t need_h = (g.out_h - 1) * stride + kh;
    const std::size_t need_w = (g.out_w - 1) * stride + kw;
    g.pad_top = need_h > h ? (need_h - h) / 2 : 0;
    g.pad_left = need_w > w ? (need_w - w) / 2 : 0;
  } else {
    if (h < kh || w < kw) {
      throw ShapeError("window " + std::to_string(kh) + "x" + std::to_string(kw) + " larger than input " +
                       std::to_string(h) + "x" + std::to_string(w));
    }
    g.out_h = (h - kh) / stride + 1;
    g.out_w = (w - kw) / stride + 1;
  }
  return g;
}

template <typename T>
struct ConvCache {
  bool valid = false;
  Tensor4<T> input;
  Tensor4<T> weights;
  std::size_t stride = 1;
  WindowGeometry geometry;
  Shape4 out_shape;
};

template <typename T>
struct ConvGrads {
  Tensor4<T> input;
  Tensor4<T> weights;
  std::vector<T> bias;
};

namespace detail {

// Rows are (channel, ky, kx) in row-major order, columns are output pixels.
template <typename T>
void im2col(const T* in, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, const WindowGeometry& g, T* cols) {
  const std::size_t pixels = g.out_h * g.out_w;
  for (std::size_t ci = 0; ci < channels; ++ci) {
    const T* src = in + ci * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = cols + ((ci * kh + ky) * kw + kx) * pixels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(dst, g.out_w, T{0});
            continue;
          }
          const T* line = src + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T{0} : line[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, const WindowGeometry& g, T* out) {
  const std::size_t pixels = g.out_h * g.out_w;
  for (std::size_t ci = 0; ci < channels; ++ci) {
    T* dst = out + ci * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((ci * kh + ky) * kw + kx) * pixels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* line = dst + static_cast<std::size_t>(iy) * w;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// weights are (out_c, in_c, kh, kw); bias has out_c entries.
template <typename T>
Forward<T, ConvCache<T>> conv2d_forward(const Tensor4<T>& input, const Tensor4<T>& weights,
                                        std::type_identity_t<std::span<const T>> bias, std::size_t stride, Padding padding) {
  const Shape4& in = input.shape();
  const Shape4& ws = weights.shape();
  if (in.c != ws.c) {
    throw ShapeError("conv2d: input " + in.str() + " has " + std::to_string(in.c) + " channels but weights " +
                     ws.str() + " expect " + std::to_string(ws.c));
  }
  if (bias.size() != ws.n) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " vs weights " + ws.str());
  }
  const WindowGeometry g = window_geometry(in.h, in.w, ws.h, ws.w, stride, padding);
  const std::size_t pixels = g.out_h * g.out_w;
  const std::size_t depth = ws.c * ws.h * ws.w;
  const bool pointwise = ws.h == 1 && ws.w == 1 && stride == 1;

  Tensor4<T> out({in.n, ws.n, g.out_h, g.out_w});
  detail::ConstMatrixMap<T> wm(weights.data(), static_cast<Eigen::Index>(ws.n), static_cast<Eigen::Index>(depth));
  AlignedVector<T> cols(pointwise ? 0 : depth * pixels);
  for (std::size_t n = 0; n < in.n; ++n) {
    const T* src = input.plane(n, 0);
    if (!pointwise) {
      detail::im2col(src, in.c, in.h, in.w, ws.h, ws.w, stride, g, cols.data());
      src = cols.data();
    }
    detail::ConstMatrixMap<T> cm(src, static_cast<Eigen::Index>(depth), static_cast<Eigen::Index>(pixels));
    detail::MatrixMap<T> om(out.plane(n, 0), static_cast<Eigen::Index>(ws.n), static_cast<Eigen::Index>(pixels));
    om.noalias() = wm * cm;
    for (std::size_t o = 0; o < ws.n; ++o) om.row(static_cast<Eigen::Index>(o)).array() += bias[o];
  }

  ConvCache<T> cache{true, input, weights, stride, g, out.shape()};
  return {std::move(out), std::move(cache)};
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& grad_out, const ConvCache<T>& cache) {
  detail::require_valid(cache.valid, "conv2d_backward");
  detail::require_grad_shape(grad_out.shape(), cache.out_shape, "conv2d_backward");
  const Shape4& in = cache.input.shape();
  const Shape4& ws = cache.weights.shape();
  const WindowGeometry& g = cache.geometry;
  const std::size_t pixels = g.out_h * g.out_w;
  const std::size_t depth = ws.c * ws.h * ws.w;
  const bool pointwise = ws.h == 1 && ws.w == 1 && cache.stride == 1;
  const auto ed = static_cast<Eigen::Index>(depth);
  const auto eo = static_cast<Eigen::Index>(ws.n);
  const auto ep = static_cast<Eigen::Index>(pixels);

  ConvGrads<T> grads{Tensor4<T>(in), Tensor4<T>(ws), std::vector<T>(ws.n, T{0})};
  detail::ConstMatrixMap<T> wm(cache.weights.data(), eo, ed);
  detail::MatrixMap<T> gw(grads.weights.data(), eo, ed);
  AlignedVector<T> cols(pointwise ? 0 : depth * pixels);
  AlignedVector<T> grad_cols(pointwise ? 0 : depth * pixels);
  for (std::size_t n = 0; n < in.n; ++n) {
    detail::ConstMatrixMap<T> go(grad_out.plane(n, 0), eo, ep);
    const T* src = cache.input.plane(n, 0);
    if (!pointwise) {
      detail::im2col(src, in.c, in.h, in.w, ws.h, ws.w, cache.stride, g, cols.data());
      src = cols.data();
    }
    detail::ConstMatrixMap<T> cm(src, ed, ep);
    gw.noalias() += go * cm.transpose();
    for (std::size_t o = 0; o < ws.n; ++o) {
      const T* row = grad_out.plane(n, o);
      T total{0};
      for (std::size_t p = 0; p < pixels; ++p) total += row[p];
      grads.bias[o] += total;
    }
    if (pointwise) {
      detail::MatrixMap<T> gi(grads.input.plane(n, 0), ed, ep);
      gi.noalias() = wm.transpose() * go;
    } else {
      detail::MatrixMap<T> gc(grad_cols.data(), ed, ep);
      gc.noalias() = wm.transpose() * go;
      detail::col2im_add(grad_cols.data(), in.c, in.h, in.w, ws.h, ws.w, cache.stride, g, grads.input.plane(n, 0));
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization

/// View of one batch-norm layer's parameters and running statistics.
template <typename T>
struct BatchNormParams {
  std::span<const T> gamma;
  std::span<const T> beta;
  std::span<T> running_mean;
  std::span<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.9);
};

template <typename T>
struct BatchNormCache {
  bool valid = false;
  Mode mode = Mode::infer;
  Tensor4<T> normalized;
  std::vector<T> gamma;
  std::vector<T> inv_std;
};

template <typename T>
struct BatchNormGrads {
  Tensor4<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

/// Train mode normalizes with biased batch statistics over (n, h, w) and
/// folds them into the running statistics: running = momentum * running +
/// (1 - momentum) * batch.
template <typename T>
Forward<T, BatchNormCache<T>> batchnorm_forward(const Tensor4<T>& input, BatchNormParams<T> params, Mode mode) {
  const Shape4& s = input.shape();
  if (params.gamma.size() != s.c || params.beta.size() != s.c || params.running_mean.size() != s.c ||
      params.running_var.size() != s.c) {
    throw ShapeError("batchnorm: parameter length " + std::to_string(params.gamma.size()) + " vs input " + s.str());
  }
  if (!(params.eps > T{0})) throw ConfigError("batchnorm: eps must be positive");

  BatchNormCache<T> cache{true, mode, Tensor4<T>(s), std::vector<T>(params.gamma.begin(), params.gamma.end()),
                          std::vector<T>(s.c)};
  Tensor4<T> out(s);
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n * plane);
  for (std::size_t c = 0; c < s.c; ++c) {
    double mean = 0;
    double var = 0;
    if (mode == Mode::train) {
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= count;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = input.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          var += d * d;
        }
      }
      var /= count;
      params.running_mean[c] = static_cast<T>(params.momentum * params.running_mean[c] +
                                              (T{1} - params.momentum) * static_cast<T>(mean));
      params.running_var[c] = static_cast<T>(params.momentum * params.running_var[c] +
                                             (T{1} - params.momentum) * static_cast<T>(var));
    } else {
      mean = params.running_mean[c];
      var = params.running_var[c];
    }
    const T inv_std = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(params.eps)));
    cache.inv_std[c] = inv_std;
    const T m = static_cast<T>(mean);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = input.plane(n, c);
      T* xh = cache.normalized.plane(n, c);
      T* y = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - m) * inv_std;
        y[i] = params.gamma[c] * xh[i] + params.beta[c];
      }
    }
  }
  return {std::move(out), std::move(cache)};
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor4<T>& grad_out, const BatchNormCache<T>& cache) {
  detail::require_valid(cache.valid, "batchnorm_backward");
  detail::require_grad_shape(grad_out.shape(), cache.normalized.shape(), "batchnorm_backward");
  const Shape4& s = grad_out.shape();
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n * plane);
  BatchNormGrads<T> grads{Tensor4<T>(s), std::vector<T>(s.c), std::vector<T>(s.c)};
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_g = 0;
    double sum_gx = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* g = grad_out.plane(n, c);
      const T* xh = cache.normalized.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += g[i];
        sum_gx += static_cast<double>(g[i]) * xh[i];
      }
    }
    grads.beta[c] = static_cast<T>(sum_g);
    grads.gamma[c] = static_cast<T>(sum_gx);
    const T scale = cache.gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* g = grad_out.plane(n, c);
      const T* xh = cache.normalized.plane(n, c);
      T* gi = grads.input.plane(n, c);
      if (cache.mode == Mode::train) {
        const T mean_g = static_cast<T>(sum_g / count);
        const T mean_gx = static_cast<T>(sum_gx / count);
        for (std::size_t i = 0; i < plane; ++i) gi[i] = scale * (g[i] - mean_g - xh[i] * mean_gx);
      } else {
        for (std::size_t i = 0; i < plane; ++i) gi[i] = scale * g[i];
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
struct ReluCache {
  bool valid = false;
  Tensor4<T> input;
};

template <typename T>
Forward<T, ReluCache<T>> relu(const Tensor4<T>& input) {
  Tensor4<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
  return {std::move(out), ReluCache<T>{true, input}};
}

/// Subgradient at exactly zero is zero.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& grad_out, const ReluCache<T>& cache) {
  detail::require_valid(cache.valid, "relu_backward");
  detail::require_grad_shape(grad_out.shape(), cache.input.shape(), "relu_backward");
  Tensor4<T> grad(grad_out.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = cache.input[i] > T{0} ? grad_out[i] : T{0};
  return grad;
}

template <typename T>
Tensor4<T> residual_add(const Tensor4<T>& a, const Tensor4<T>& b) {
  a.require_same(b, "residual_add");
  Tensor4<T> out(a);
  out += b;
  return out;
}

template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> residual_add_backward(const Tensor4<T>& grad_out) {
  return {grad_out, grad_out};
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
struct MaxPoolCache {
  bool valid = false;
  Shape4 input_shape;
  Shape4 out_shape;
  std::vector<std::size_t> argmax;
};

/// Unpadded max pooling. Ties pick the first maximal element in row-major order.
template <typename T>
Forward<T, MaxPoolCache<T>> maxpool2d(const Tensor4<T>& input, std::size_t window, std::size_t stride) {
  const Shape4& s = input.shape();
  if (window == 0) throw ShapeError("maxpool2d: window must be >= 1");
  const WindowGeometry g = window_geometry(s.h, s.w, window, window, stride, Padding::valid);
  Tensor4<T> out({s.n, s.c, g.out_h, g.out_w});
  MaxPoolCache<T> cache{true, s, out.shape(), std::vector<std::size_t>(out.size())};
  std::size_t k = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * s.plane();
      const T* p = input.data() + base;
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox, ++k) {
          std::size_t best = oy * stride * s.w + ox * stride;
          for (std::size_t ky = 0; ky < window; ++ky) {
            for (std::size_t kx = 0; kx < window; ++kx) {
              const std::size_t idx = (oy * stride + ky) * s.w + ox * stride + kx;
              if (p[idx] > p[best]) best = idx;
            }
          }
          out[k] = p[best];
          cache.argmax[k] = base + best;
        }
      }
    }
  }
  return {std::move(out), std::move(cache)};
}

template <typename T>
Tensor4<T> maxpool2d_backward(const Tensor4<T>& grad_out, const MaxPoolCache<T>& cache) {
  detail::require_valid(cache.valid, "maxpool2d_backward");
  detail::require_grad_shape(grad_out.shape(), cache.out_shape, "maxpool2d_backward");
  Tensor4<T> grad(cache.input_shape);
  for (std::size_t k = 0; k < grad_out.size(); ++k) grad[cache.argmax[k]] += grad_out[k];
  return grad;
}

template <typename T>
struct AvgPoolCache {
  bool valid = false;
  Shape4 input_shape;
  Shape4 out_shape;
  std::size_t window = 1;
  std::size_t stride = 1;
};

template <typename T>
Forward<T, AvgPoolCache<T>> avgpool2d(const Tensor4<T>& input, std::size_t window, std::size_t stride) {
  const Shape4& s = input.shape();
  if (window == 0) throw ShapeError("avgpool2d: window must be >= 1");
  const WindowGeometry g = window_geometry(s.h, s.w, window, window, stride, Padding::valid);
  Tensor4<T> out({s.n, s.c, g.out_h, g.out_w});
  const T scale = T{1} / static_cast<T>(window * window);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = input.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          T sum{0};
          for (std::size_t ky = 0; ky < window; ++ky) {
            for (std::size_t kx = 0; kx < window; ++kx) sum += p[(oy * stride + ky) * s.w + ox * stride + kx];
          }
          o[oy * g.out_w + ox] = sum * scale;
        }
      }
    }
  }
  AvgPoolCache<T> cache{true, s, out.shape(), window, stride};
  return {std::move(out), cache};
}

template <typename T>
Tensor4<T> avgpool2d_backward(const Tensor4<T>& grad_out, const AvgPoolCache<T>& cache) {
  detail::require_valid(cache.valid, "avgpool2d_backward");
  detail::require_grad_shape(grad_out.shape(), cache.out_shape, "avgpool2d_backward");
  const Shape4& s = cache.input_shape;
  const Shape4& o = cache.out_shape;
  const T scale = T{1} / static_cast<T>(cache.window * cache.window);
  Tensor4<T> grad(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* go = grad_out.plane(n, c);
      T* gi = grad.plane(n, c);
      for (std::size_t oy = 0; oy < o.h; ++oy) {
        for (std::size_t ox = 0; ox < o.w; ++ox) {
          const T v = go[oy * o.w + ox] * scale;
          for (std::size_t ky = 0; ky < cache.window; ++ky) {
            for (std::size_t kx = 0; kx < cache.window; ++kx) {
              gi[(oy * cache.stride + ky) * s.w + ox * cache.stride + kx] += v;
            }
          }
        }
      }
    }
  }
  return grad;
}

template <typename T>
struct GapCache {
  bool valid = false;
  Shape4 input_shape;
};

/// Per-(n, c) mean over the spatial plane; output is (n, c, 1, 1).
template <typename T>
Forward<T, GapCache<T>> global_avg_pool(const Tensor4<T>& input) {
  const Shape4& s = input.shape();
  Tensor4<T> out({s.n, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = input.plane(n, c);
      T sum{0};
      for (std::size_t i = 0; i < s.plane(); ++i) sum += p[i];
      out(n, c, 0, 0) = sum / static_cast<T>(s.plane());
    }
  }
  return {std::move(out), GapCache<T>{true, s}};
}

template <typename T>
Tensor4<T> global_avg_pool_backward(const Tensor4<T>& grad_out, const GapCache<T>& cache) {
  detail::require_valid(cache.valid, "global_avg_pool_backward");
  const Shape4& s = cache.input_shape;
  detail::require_grad_shape(grad_out.shape(), {s.n, s.c, 1, 1}, "global_avg_pool_backward");
  Tensor4<T> grad(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T v = grad_out(n, c, 0, 0) / static_cast<T>(s.plane());
      std::fill_n(grad.plane(n, c), s.plane(), v);
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Fully connected head

template <typename T>
struct DenseCache {
  bool valid = false;
  Tensor4<T> input;
  Tensor4<T> weights;
};

template <typename T>
struct DenseGrads {
  Tensor4<T> input;
  Tensor4<T> weights;
  std::vector<T> bias;
};

/// y = x W + b. The input is read as an n x (c*h*w) matrix, weights are a
/// (d, k, 1, 1) tensor holding the d x k matrix, output is (n, k, 1, 1).
template <typename T>
Forward<T, DenseCache<T>> dense(const Tensor4<T>& input, const Tensor4<T>& weights,
                               std::type_identity_t<std::span<const T>> bias) {
  const std::size_t rows = input.n();
  const std::size_t in_dim = input.size() / rows;
  const std::size_t d = weights.n();
  const std::size_t k = weights.size() / d;
  if (in_dim != d || bias.size() != k) {
    throw ShapeError("dense: input " + input.shape().str() + " weights " + weights.shape().str() + " bias " +
                     std::to_string(bias.size()));
  }
  Tensor4<T> out({rows, k, 1, 1});
  detail::ConstMatrixMap<T> xm(input.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d));
  detail::ConstMatrixMap<T> wm(weights.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  detail::MatrixMap<T> ym(out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
  ym.noalias() = xm * wm;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] += bias[j];
  }
  return {std::move(out), DenseCache<T>{true, input, weights}};
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor4<T>& grad_out, const DenseCache<T>& cache) {
  detail::require_valid(cache.valid, "dense_backward");
  const std::size_t rows = cache.input.n();
  const std::size_t d = cache.weights.n();
  const std::size_t k = cache.weights.size() / d;
  detail::require_grad_shape(grad_out.shape(), {rows, k, 1, 1}, "dense_backward");
  DenseGrads<T> grads{Tensor4<T>(cache.input.shape()), Tensor4<T>(cache.weights.shape()), std::vector<T>(k, T{0})};
  const auto er = static_cast<Eigen::Index>(rows);
  const auto ed = static_cast<Eigen::Index>(d);
  const auto ek = static_cast<Eigen::Index>(k);
  detail::ConstMatrixMap<T> xm(cache.input.data(), er, ed);
  detail::ConstMatrixMap<T> wm(cache.weights.data(), ed, ek);
  detail::ConstMatrixMap<T> gm(grad_out.data(), er, ek);
  detail::MatrixMap<T>(grads.weights.data(), ed, ek).noalias() = xm.transpose() * gm;
  detail::MatrixMap<T>(grads.input.data(), er, ed).noalias() = gm * wm.transpose();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) grads.bias[j] += grad_out[r * k + j];
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Loss

/// Row-wise max-subtracted softmax of (n, k, 1, 1) logits.
template <typename T>
Tensor4<T> softmax(const Tensor4<T>& logits) {
  const std::size_t rows = logits.n();
  const std::size_t k = logits.size() / rows;
  Tensor4<T> out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.data() + r * k;
    const T top = *std::max_element(z, z + k);
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(static_cast<double>(z[j] - top));
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = static_cast<T>(std::exp(static_cast<double>(z[j] - top)) / total);
  }
  return out;
}

template <typename T>
struct LossResult {
  double loss = 0;
  Tensor4<T> grad_logits;
};

/// Mean softmax cross-entropy over the batch; grad = (softmax - one_hot) / n.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor4<T>& logits, std::span<const int> labels) {
  const std::size_t rows = logits.n();
  const std::size_t k = logits.size() / rows;
  if (labels.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  LossResult<T> result{0.0, Tensor4<T>(logits.shape())};
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw InputError("softmax_cross_entropy: label " + std::to_string(labels[r]) + " outside [0," +
                       std::to_string(k) + ")");
    }
    const T* z = logits.data() + r * k;
    const double top = *std::max_element(z, z + k);
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(z[j] - top);
    const double log_total = std::log(total);
    const auto label = static_cast<std::size_t>(labels[r]);
    result.loss += -(z[label] - top - log_total);
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(z[j] - top - log_total);
      result.grad_logits[r * k + j] = static_cast<T>((p - (j == label ? 1.0 : 0.0)) / static_cast<double>(rows));
    }
  }
  result.loss /= static_cast<double>(rows);
  return result;
}

// ---------------------------------------------------------------------------
// Channel concatenation

/// Stacks the parts along the channel axis in argument order.
template <typename T>
Tensor4<T> channel_concat(const std::vector<Tensor4<T>>& parts) {
  if (parts.empty()) throw ShapeError("channel_concat: no parts");
  const Shape4& first = parts.front().shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.n() != first.n || p.h() != first.h || p.w() != first.w) {
      throw ShapeError("channel_concat: part " + p.shape().str() + " incompatible with " + first.str());
    }
    channels += p.c();
  }
  Tensor4<T> out({first.n, channels, first.h, first.w});
  for (std::size_t n = 0; n < first.n; ++n) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      std::copy_n(p.plane(n, 0), p.c() * first.plane(), out.plane(n, offset));
      offset += p.c();
    }
  }
  return out;
}

/// Adjoint of channel_concat: slices a gradient back into per-part tensors.
template <typename T>
std::vector<Tensor4<T>> channel_split(const Tensor4<T>& grad, std::span<const std::size_t> channels) {
  std::size_t total = 0;
  for (auto c : channels) total += c;
  if (total != grad.c()) {
    throw ShapeError("channel_split: parts sum to " + std::to_string(total) + " channels, gradient " +
                     grad.shape().str());
  }
  std::vector<Tensor4<T>> parts;
  parts.reserve(channels.size());
  std::size_t offset = 0;
  for (auto c : channels) {
    Tensor4<T> part({grad.n(), c, grad.h(), grad.w()});
    for (std::size_t n = 0; n < grad.n(); ++n) std::copy_n(grad.plane(n, offset), c * grad.h() * grad.w(), part.plane(n, 0));
    parts.push_back(std::move(part));
    offset += c;
  }
  return parts;
}

}  // namespace xmed

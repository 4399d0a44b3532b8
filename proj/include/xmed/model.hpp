#pragma once

// Layer-graph model with mini ResNet / DenseNet builders. Layers are plain
// value descriptions that reference tensors in the model's parameter list by
// index, so a GraphModel copies like any other value.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "xmed/error.hpp"
#include "xmed/layers.hpp"
#include "xmed/tensor.hpp"

namespace xmed {

/// Per-sample input dimensions (channels, height, width).
struct ImageShape {
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  constexpr bool operator==(const ImageShape&) const = default;
};

enum class LayerKind { conv, batchnorm, relu, maxpool, gap, dense, residual_block, dense_block, transition, flatten };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::gap: return "gap";
    case LayerKind::dense: return "dense";
    case LayerKind::residual_block: return "residual_block";
    case LayerKind::dense_block: return "dense_block";
    case LayerKind::transition: return "transition";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

// Layer descriptions. Fields named after parameters are indices into the
// owning model's parameter list.

struct ConvSpec {
  std::size_t in_c = 1;
  std::size_t out_c = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  Padding padding = Padding::same;
  std::size_t weight = 0;
  std::size_t bias = 0;
};

struct BatchNormSpec {
  std::size_t channels = 1;
  double eps = 1e-5;
  double momentum = 0.9;
  std::size_t gamma = 0;
  std::size_t beta = 0;
  std::size_t mean = 0;
  std::size_t var = 0;
};

struct ReluSpec {};

struct MaxPoolSpec {
  std::size_t window = 2;
  std::size_t stride = 2;
};

struct GapSpec {};

struct DenseSpec {
  std::size_t in = 1;
  std::size_t out = 1;
  std::size_t weight = 0;
  std::size_t bias = 0;
};

/// conv-BN-ReLU-conv-BN plus a shortcut (identity, or 1x1 projection when the
/// channel count or stride changes), followed by ReLU.
struct ResidualBlockSpec {
  std::size_t in_c = 1;
  std::size_t out_c = 1;
  std::size_t stride = 1;
  ConvSpec conv1;
  BatchNormSpec bn1;
  ConvSpec conv2;
  BatchNormSpec bn2;
  std::optional<ConvSpec> projection;
};

struct DenseUnitSpec {
  BatchNormSpec bn;
  ConvSpec conv;
};

/// Each unit maps the running concatenation through BN-ReLU-conv3x3 to
/// `growth` new channels and appends them.
struct DenseBlockSpec {
  std::size_t in_c = 1;
  std::size_t growth = 1;
  std::vector<DenseUnitSpec> units;
  std::size_t out_c() const { return in_c + growth * units.size(); }
};

/// 1x1 convolution followed by 2x2 stride-2 average pooling.
struct TransitionSpec {
  std::size_t in_c = 1;
  std::size_t out_c = 1;
  ConvSpec conv;
};

struct FlattenSpec {};

// Alternative order matches LayerKind.
using LayerBody = std::variant<ConvSpec, BatchNormSpec, ReluSpec, MaxPoolSpec, GapSpec, DenseSpec, ResidualBlockSpec,
                               DenseBlockSpec, TransitionSpec, FlattenSpec>;

struct LayerSpec {
  std::string name;
  LayerBody body;
  LayerKind kind() const { return static_cast<LayerKind>(body.index()); }
};

enum class ParamRole { conv_weight, dense_weight, bias, gamma, beta, running_mean, running_var };

template <typename T>
struct Parameter {
  std::string name;
  Tensor4<T> value;
  ParamRole role = ParamRole::bias;
  std::size_t fan_in = 1;
  bool trainable() const { return role != ParamRole::running_mean && role != ParamRole::running_var; }
};

// Per-layer caches for one forward pass.

template <typename T>
struct ResidualCache {
  ConvCache<T> conv1;
  BatchNormCache<T> bn1;
  ReluCache<T> relu1;
  ConvCache<T> conv2;
  BatchNormCache<T> bn2;
  std::optional<ConvCache<T>> projection;
  ReluCache<T> out_relu;
};

template <typename T>
struct DenseUnitCache {
  BatchNormCache<T> bn;
  ReluCache<T> relu;
  ConvCache<T> conv;
  std::size_t in_c = 0;
};

template <typename T>
struct DenseBlockCache {
  std::vector<DenseUnitCache<T>> units;
};

template <typename T>
struct TransitionCache {
  ConvCache<T> conv;
  AvgPoolCache<T> pool;
};

struct FlattenCache {
  Shape4 input_shape;
};

template <typename T>
using LayerCache = std::variant<std::monostate, ConvCache<T>, BatchNormCache<T>, ReluCache<T>, MaxPoolCache<T>,
                                GapCache<T>, DenseCache<T>, ResidualCache<T>, DenseBlockCache<T>, TransitionCache<T>,
                                FlattenCache>;

template <typename T>
class GraphModel;

/// Everything a backward pass needs from one forward call.
template <typename T>
struct ForwardPass {
  Tensor4<T> logits;
  Tensor4<T> captured;
  std::vector<LayerCache<T>> caches;
  Mode mode = Mode::infer;

 private:
  friend class GraphModel<T>;
  const GraphModel<T>* owner_ = nullptr;
  std::uint64_t version_ = 0;
};

template <typename T>
class GraphModel {
 public:
  GraphModel(ImageShape input_shape, std::size_t num_classes) : input_shape_(input_shape), num_classes_(num_classes) {
    if (input_shape.c == 0 || input_shape.h == 0 || input_shape.w == 0) throw ConfigError("input shape must be >= 1");
    if (num_classes == 0) throw ConfigError("num_classes must be >= 1");
  }

  // -- construction --------------------------------------------------------

  std::size_t add_param(std::string name, Shape4 shape, ParamRole role, std::size_t fan_in = 1) {
    for (const auto& p : params_) {
      if (p.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
    }
    params_.push_back({std::move(name), Tensor4<T>(shape), role, fan_in});
    ++version_;
    return params_.size() - 1;
  }

  /// Appends a layer after checking that its channel arithmetic continues the
  /// chain from the previous layer's output.
  void append(LayerSpec layer) {
    for (const auto& l : layers_) {
      if (l.name == layer.name) throw ConfigError("duplicate layer name '" + layer.name + "'");
    }
    const Shape4 in = layers_.empty() ? Shape4{1, input_shape_.c, input_shape_.h, input_shape_.w} : shapes_.back();
    shapes_.push_back(infer_shape(layer, in));
    layers_.push_back(std::move(layer));
    ++version_;
  }

  /// Grad-CAM target. Must name a layer with a spatial feature-map output.
  void set_capture_layer(std::string_view name) {
    const std::size_t idx = layer_index(name);
    switch (layers_[idx].kind()) {
      case LayerKind::gap:
      case LayerKind::dense:
      case LayerKind::flatten:
        throw ConfigError("layer '" + std::string(name) + "' is not a feature-map layer and cannot be captured");
      default:
        break;
    }
    capture_ = idx;
  }

  /// He-normal weights, unit gamma / running variance, zeros elsewhere.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& p : params_) {
      switch (p.role) {
        case ParamRole::conv_weight:
        case ParamRole::dense_weight: {
          std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(p.fan_in)));
          for (auto& v : p.value.values()) v = static_cast<T>(dist(rng));
          break;
        }
        case ParamRole::gamma:
        case ParamRole::running_var: p.value.fill(T{1}); break;
        default: p.value.fill(T{0}); break;
      }
    }
    ++version_;
  }

  // -- introspection -------------------------------------------------------

  const ImageShape& input_shape() const noexcept { return input_shape_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::vector<Parameter<T>>& params() const noexcept { return params_; }

  /// Mutable access invalidates every earlier ForwardPass.
  std::vector<Parameter<T>>& mutable_params() noexcept {
    ++version_;
    return params_;
  }

  const Parameter<T>& param(std::string_view name) const { return params_[param_index(name)]; }
  Parameter<T>& param(std::string_view name) {
    ++version_;
    return params_[param_index(name)];
  }

  std::size_t param_index(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    throw ConfigError("no parameter named '" + std::string(name) + "'");
  }

  std::size_t layer_index(std::string_view name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].name == name) return i;
    }
    throw ConfigError("no layer named '" + std::string(name) + "'");
  }

  const std::string& capture_layer() const {
    if (!capture_) throw ConfigError("model has no capture layer");
    return layers_[*capture_].name;
  }

  /// Output shape of a layer for a batch of one.
  const Shape4& layer_output_shape(std::string_view name) const { return shapes_[layer_index(name)]; }

  /// Number of trainable scalars.
  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.trainable() ? p.value.size() : 0;
    return total;
  }

  /// Number of stored scalars, including running statistics.
  std::size_t stored_value_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.size();
    return total;
  }

  // Descriptive metadata carried through serialization.
  std::string architecture;
  std::vector<std::string> class_names;
  std::size_t positive_class = 1;

  template <typename U>
  GraphModel<U> cast() const {
    GraphModel<U> out(input_shape_, num_classes_);
    for (const auto& p : params_) out.add_param(p.name, p.value.shape(), p.role, p.fan_in);
    auto& dst = out.mutable_params();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i].value = params_[i].value.template cast<U>();
    for (const auto& l : layers_) out.append(l);
    if (capture_) out.set_capture_layer(layers_[*capture_].name);
    out.architecture = architecture;
    out.class_names = class_names;
    out.positive_class = positive_class;
    return out;
  }

  // -- execution -----------------------------------------------------------

  /// Train mode uses batch statistics and updates batch-norm running stats.
  ForwardPass<T> forward(const Tensor4<T>& batch, Mode mode) {
    if (mode == Mode::train) ++version_;
    return run_forward(batch, mode, params_);
  }

  /// Inference on a shared, unmodified model.
  ForwardPass<T> forward(const Tensor4<T>& batch) const {
    // Infer mode never writes running statistics.
    return run_forward(batch, Mode::infer, const_cast<std::vector<Parameter<T>>&>(params_));
  }

  /// Gradients for every parameter (zeros for running statistics), given the
  /// gradient of the loss with respect to the logits.
  std::vector<Tensor4<T>> backward(const ForwardPass<T>& pass, const Tensor4<T>& grad_logits) const {
    check_pass(pass);
    std::vector<Tensor4<T>> grads;
    grads.reserve(params_.size());
    for (const auto& p : params_) grads.emplace_back(p.value.shape());
    backward_range(pass, grad_logits, layers_.size(), &grads);
    return grads;
  }

  /// d logit[class_index] / d captured activation, for a batch of one.
  Tensor4<T> backward_to_capture(const ForwardPass<T>& pass, std::size_t class_index) const {
    check_pass(pass);
    if (!capture_) throw ConfigError("model has no capture layer");
    if (pass.logits.n() != 1) throw UsageError("backward_to_capture requires a batch of one");
    if (class_index >= num_classes_) {
      throw InputError("class index " + std::to_string(class_index) + " outside [0," + std::to_string(num_classes_) +
                       ")");
    }
    Tensor4<T> seed(pass.logits.shape());
    seed[class_index] = T{1};
    return backward_range(pass, seed, *capture_, nullptr);
  }

 private:
  template <typename U>
  friend class GraphModel;

  using Params = std::vector<Parameter<T>>;
  using Grads = std::vector<Tensor4<T>>;

  // ---- shape inference ----

  static void require_channels(std::size_t have, std::size_t want, const std::string& name) {
    if (have != want) {
      throw ConfigError("layer '" + name + "' expects " + std::to_string(want) + " channels, receives " +
                        std::to_string(have));
    }
  }

  static Shape4 conv_shape(const ConvSpec& s, const Shape4& in, const std::string& name) {
    require_channels(in.c, s.in_c, name);
    WindowGeometry g;
    try {
      g = window_geometry(in.h, in.w, s.kernel, s.kernel, s.stride, s.padding);
    } catch (const ShapeError& e) {
      throw ConfigError("layer '" + name + "': input too small: " + e.what());
    }
    return {in.n, s.out_c, g.out_h, g.out_w};
  }

  static Shape4 pool_shape(std::size_t window, std::size_t stride, const Shape4& in, const std::string& name) {
    if (in.h < window || in.w < window) {
      throw ConfigError("layer '" + name + "': input " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                        " too small for " + std::to_string(window) + "x" + std::to_string(window) + " pooling");
    }
    const WindowGeometry g = window_geometry(in.h, in.w, window, window, stride, Padding::valid);
    return {in.n, in.c, g.out_h, g.out_w};
  }

  Shape4 infer_shape(const LayerSpec& layer, const Shape4& in) const {
    const std::string& name = layer.name;
    return std::visit(
        [&](const auto& s) -> Shape4 {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, ConvSpec>) {
            return conv_shape(s, in, name);
          } else if constexpr (std::is_same_v<S, BatchNormSpec>) {
            require_channels(in.c, s.channels, name);
            return in;
          } else if constexpr (std::is_same_v<S, ReluSpec>) {
            return in;
          } else if constexpr (std::is_same_v<S, MaxPoolSpec>) {
            return pool_shape(s.window, s.stride, in, name);
          } else if constexpr (std::is_same_v<S, GapSpec>) {
            return {in.n, in.c, 1, 1};
          } else if constexpr (std::is_same_v<S, FlattenSpec>) {
            return {in.n, in.c * in.h * in.w, 1, 1};
          } else if constexpr (std::is_same_v<S, DenseSpec>) {
            require_channels(in.c * in.h * in.w, s.in, name);
            return {in.n, s.out, 1, 1};
          } else if constexpr (std::is_same_v<S, ResidualBlockSpec>) {
            require_channels(in.c, s.in_c, name);
            if (s.stride > 1 && (in.h < 2 || in.w < 2)) {
              throw ConfigError("layer '" + name + "': input " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                                " too small to downsample");
            }
            return conv_shape(s.conv2, conv_shape(s.conv1, in, name), name);
          } else if constexpr (std::is_same_v<S, DenseBlockSpec>) {
            require_channels(in.c, s.in_c, name);
            return {in.n, s.out_c(), in.h, in.w};
          } else {
            static_assert(std::is_same_v<S, TransitionSpec>);
            require_channels(in.c, s.in_c, name);
            return pool_shape(2, 2, {in.n, s.out_c, in.h, in.w}, name);
          }
        },
        layer.body);
  }

  // ---- forward ----

  static Tensor4<T> conv_fwd(const ConvSpec& s, const Params& p, const Tensor4<T>& x, ConvCache<T>& cache) {
    auto [y, c] = conv2d_forward<T>(x, p[s.weight].value, p[s.bias].value.values(), s.stride, s.padding);
    cache = std::move(c);
    return std::move(y);
  }

  static Tensor4<T> bn_fwd(const BatchNormSpec& s, Params& p, const Tensor4<T>& x, Mode mode,
                           BatchNormCache<T>& cache) {
    BatchNormParams<T> bp{p[s.gamma].value.values(), p[s.beta].value.values(), p[s.mean].value.values(),
                          p[s.var].value.values(),   static_cast<T>(s.eps),    static_cast<T>(s.momentum)};
    auto [y, c] = batchnorm_forward(x, bp, mode);
    cache = std::move(c);
    return std::move(y);
  }

  static Tensor4<T> relu_fwd(const Tensor4<T>& x, ReluCache<T>& cache) {
    auto [y, c] = relu(x);
    cache = std::move(c);
    return std::move(y);
  }

  static Tensor4<T> residual_fwd(const ResidualBlockSpec& s, Params& p, const Tensor4<T>& x, Mode mode,
                                 ResidualCache<T>& cache) {
    Tensor4<T> h = conv_fwd(s.conv1, p, x, cache.conv1);
    h = bn_fwd(s.bn1, p, h, mode, cache.bn1);
    h = relu_fwd(h, cache.relu1);
    h = conv_fwd(s.conv2, p, h, cache.conv2);
    h = bn_fwd(s.bn2, p, h, mode, cache.bn2);
    if (s.projection) {
      cache.projection.emplace();
      h = residual_add(h, conv_fwd(*s.projection, p, x, *cache.projection));
    } else {
      h = residual_add(h, x);
    }
    return relu_fwd(h, cache.out_relu);
  }

  static Tensor4<T> dense_block_fwd(const DenseBlockSpec& s, Params& p, const Tensor4<T>& x, Mode mode,
                                    DenseBlockCache<T>& cache) {
    cache.units.resize(s.units.size());
    Tensor4<T> features = x;
    for (std::size_t i = 0; i < s.units.size(); ++i) {
      auto& uc = cache.units[i];
      uc.in_c = features.c();
      Tensor4<T> h = bn_fwd(s.units[i].bn, p, features, mode, uc.bn);
      h = relu_fwd(h, uc.relu);
      h = conv_fwd(s.units[i].conv, p, h, uc.conv);
      features = channel_concat<T>({std::move(features), std::move(h)});
    }
    return features;
  }

  ForwardPass<T> run_forward(const Tensor4<T>& batch, Mode mode, Params& p) const {
    const Shape4& bs = batch.shape();
    if (bs.c != input_shape_.c || bs.h != input_shape_.h || bs.w != input_shape_.w) {
      throw ShapeError("batch " + bs.str() + " does not match model input (" + std::to_string(input_shape_.c) + "," +
                       std::to_string(input_shape_.h) + "," + std::to_string(input_shape_.w) + ")");
    }
    ForwardPass<T> pass;
    pass.mode = mode;
    pass.caches.resize(layers_.size());
    Tensor4<T> x = batch;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& slot = pass.caches[i];
      x = std::visit(
          [&](const auto& s) -> Tensor4<T> {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, ConvSpec>) {
              return conv_fwd(s, p, x, slot.template emplace<ConvCache<T>>());
            } else if constexpr (std::is_same_v<S, BatchNormSpec>) {
              return bn_fwd(s, p, x, mode, slot.template emplace<BatchNormCache<T>>());
            } else if constexpr (std::is_same_v<S, ReluSpec>) {
              return relu_fwd(x, slot.template emplace<ReluCache<T>>());
            } else if constexpr (std::is_same_v<S, MaxPoolSpec>) {
              auto [y, c] = maxpool2d(x, s.window, s.stride);
              slot = std::move(c);
              return std::move(y);
            } else if constexpr (std::is_same_v<S, GapSpec>) {
              auto [y, c] = global_avg_pool(x);
              slot = std::move(c);
              return std::move(y);
            } else if constexpr (std::is_same_v<S, FlattenSpec>) {
              slot = FlattenCache{x.shape()};
              return Tensor4<T>({x.n(), x.c() * x.h() * x.w(), 1, 1}, std::vector<T>(x.values().begin(), x.values().end()));
            } else if constexpr (std::is_same_v<S, DenseSpec>) {
              auto [y, c] = dense<T>(x, p[s.weight].value, p[s.bias].value.values());
              slot = std::move(c);
              return std::move(y);
            } else if constexpr (std::is_same_v<S, ResidualBlockSpec>) {
              return residual_fwd(s, p, x, mode, slot.template emplace<ResidualCache<T>>());
            } else if constexpr (std::is_same_v<S, DenseBlockSpec>) {
              return dense_block_fwd(s, p, x, mode, slot.template emplace<DenseBlockCache<T>>());
            } else {
              auto& tc = slot.template emplace<TransitionCache<T>>();
              Tensor4<T> h = conv_fwd(s.conv, p, x, tc.conv);
              auto [y, c] = avgpool2d(h, 2, 2);
              tc.pool = std::move(c);
              return std::move(y);
            }
          },
          layers_[i].body);
      if (capture_ && i == *capture_) pass.captured = x;
    }
    pass.logits = std::move(x);
    pass.owner_ = this;
    pass.version_ = version_;
    return pass;
  }

  // ---- backward ----

  void check_pass(const ForwardPass<T>& pass) const {
    if (pass.owner_ != this || pass.version_ != version_ || pass.caches.size() != layers_.size()) {
      throw UsageError("forward pass is stale or belongs to a different model");
    }
  }

  static void accumulate(Grads* grads, std::size_t index, const Tensor4<T>& g) {
    if (grads) (*grads)[index] += g;
  }

  static void accumulate(Grads* grads, std::size_t index, const std::vector<T>& g) {
    if (!grads) return;
    auto& dst = (*grads)[index];
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  static Tensor4<T> conv_bwd(const ConvSpec& s, const Tensor4<T>& g, const ConvCache<T>& cache, Grads* grads) {
    ConvGrads<T> cg = conv2d_backward(g, cache);
    accumulate(grads, s.weight, cg.weights);
    accumulate(grads, s.bias, cg.bias);
    return std::move(cg.input);
  }

  static Tensor4<T> bn_bwd(const BatchNormSpec& s, const Tensor4<T>& g, const BatchNormCache<T>& cache,
                           Grads* grads) {
    BatchNormGrads<T> bg = batchnorm_backward(g, cache);
    accumulate(grads, s.gamma, bg.gamma);
    accumulate(grads, s.beta, bg.beta);
    return std::move(bg.input);
  }

  static Tensor4<T> residual_bwd(const ResidualBlockSpec& s, const Tensor4<T>& g, const ResidualCache<T>& cache,
                                 Grads* grads) {
    const Tensor4<T> gsum = relu_backward(g, cache.out_relu);
    auto [gbranch, gshort] = residual_add_backward(gsum);
    Tensor4<T> h = bn_bwd(s.bn2, gbranch, cache.bn2, grads);
    h = conv_bwd(s.conv2, h, cache.conv2, grads);
    h = relu_backward(h, cache.relu1);
    h = bn_bwd(s.bn1, h, cache.bn1, grads);
    h = conv_bwd(s.conv1, h, cache.conv1, grads);
    if (s.projection) {
      h += conv_bwd(*s.projection, gshort, *cache.projection, grads);
    } else {
      h += gshort;
    }
    return h;
  }

  static Tensor4<T> dense_block_bwd(const DenseBlockSpec& s, const Tensor4<T>& g, const DenseBlockCache<T>& cache,
                                    Grads* grads) {
    Tensor4<T> gfeat = g;
    for (std::size_t i = s.units.size(); i-- > 0;) {
      const auto& uc = cache.units[i];
      const std::size_t widths[2] = {uc.in_c, s.growth};
      auto parts = channel_split<T>(gfeat, widths);
      Tensor4<T> h = conv_bwd(s.units[i].conv, parts[1], uc.conv, grads);
      h = relu_backward(h, uc.relu);
      h = bn_bwd(s.units[i].bn, h, uc.bn, grads);
      parts[0] += h;
      gfeat = std::move(parts[0]);
    }
    return gfeat;
  }

  // Runs layers [stop+1, end) backwards; returns the gradient with respect to
  // the output of layer `stop` (or the model input when stop == size()).
  Tensor4<T> backward_range(const ForwardPass<T>& pass, const Tensor4<T>& grad_logits, std::size_t stop,
                            Grads* grads) const {
    if (grad_logits.shape() != pass.logits.shape()) {
      throw ShapeError("logit gradient " + grad_logits.shape().str() + " vs logits " + pass.logits.shape().str());
    }
    const std::size_t first = stop == layers_.size() ? 0 : stop + 1;
    Tensor4<T> g = grad_logits;
    for (std::size_t i = layers_.size(); i-- > first;) {
      const auto& slot = pass.caches[i];
      g = std::visit(
          [&](const auto& s) -> Tensor4<T> {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, ConvSpec>) {
              return conv_bwd(s, g, std::get<ConvCache<T>>(slot), grads);
            } else if constexpr (std::is_same_v<S, BatchNormSpec>) {
              return bn_bwd(s, g, std::get<BatchNormCache<T>>(slot), grads);
            } else if constexpr (std::is_same_v<S, ReluSpec>) {
              return relu_backward(g, std::get<ReluCache<T>>(slot));
            } else if constexpr (std::is_same_v<S, MaxPoolSpec>) {
              return maxpool2d_backward(g, std::get<MaxPoolCache<T>>(slot));
            } else if constexpr (std::is_same_v<S, GapSpec>) {
              return global_avg_pool_backward(g, std::get<GapCache<T>>(slot));
            } else if constexpr (std::is_same_v<S, FlattenSpec>) {
              return Tensor4<T>(std::get<FlattenCache>(slot).input_shape,
                                std::vector<T>(g.values().begin(), g.values().end()));
            } else if constexpr (std::is_same_v<S, DenseSpec>) {
              DenseGrads<T> dg = dense_backward(g, std::get<DenseCache<T>>(slot));
              accumulate(grads, s.weight, dg.weights);
              accumulate(grads, s.bias, dg.bias);
              return std::move(dg.input);
            } else if constexpr (std::is_same_v<S, ResidualBlockSpec>) {
              return residual_bwd(s, g, std::get<ResidualCache<T>>(slot), grads);
            } else if constexpr (std::is_same_v<S, DenseBlockSpec>) {
              return dense_block_bwd(s, g, std::get<DenseBlockCache<T>>(slot), grads);
            } else {
              const auto& tc = std::get<TransitionCache<T>>(slot);
              return conv_bwd(s.conv, avgpool2d_backward(g, tc.pool), tc.conv, grads);
            }
          },
          layers_[i].body);
    }
    return g;
  }

  ImageShape input_shape_;
  std::size_t num_classes_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape4> shapes_;
  Params params_;
  std::optional<std::size_t> capture_;
  std::uint64_t version_ = 0;
};

using Model = GraphModel<float>;

// ---------------------------------------------------------------------------
// Layer factories. Each registers its parameters (named "<prefix>.<field>")
// on the model and returns the description to append.

template <typename T>
ConvSpec make_conv(GraphModel<T>& m, const std::string& prefix, std::size_t in_c, std::size_t out_c,
                   std::size_t kernel, std::size_t stride = 1, Padding padding = Padding::same) {
  if (in_c == 0 || out_c == 0 || kernel == 0 || stride == 0) throw ConfigError("conv '" + prefix + "': zero size");
  ConvSpec s{in_c, out_c, kernel, stride, padding, 0, 0};
  s.weight = m.add_param(prefix + ".weight", {out_c, in_c, kernel, kernel}, ParamRole::conv_weight,
                         in_c * kernel * kernel);
  s.bias = m.add_param(prefix + ".bias", {1, out_c, 1, 1}, ParamRole::bias);
  return s;
}

template <typename T>
BatchNormSpec make_batchnorm(GraphModel<T>& m, const std::string& prefix, std::size_t channels, double eps = 1e-5,
                             double momentum = 0.9) {
  if (!(eps > 0)) throw ConfigError("batchnorm '" + prefix + "': eps must be positive");
  if (!(momentum > 0 && momentum < 1)) throw ConfigError("batchnorm '" + prefix + "': momentum must be in (0,1)");
  BatchNormSpec s{channels, eps, momentum, 0, 0, 0, 0};
  s.gamma = m.add_param(prefix + ".gamma", {1, channels, 1, 1}, ParamRole::gamma);
  s.beta = m.add_param(prefix + ".beta", {1, channels, 1, 1}, ParamRole::beta);
  s.mean = m.add_param(prefix + ".running_mean", {1, channels, 1, 1}, ParamRole::running_mean);
  s.var = m.add_param(prefix + ".running_var", {1, channels, 1, 1}, ParamRole::running_var);
  return s;
}

template <typename T>
DenseSpec make_dense(GraphModel<T>& m, const std::string& prefix, std::size_t in, std::size_t out) {
  DenseSpec s{in, out, 0, 0};
  s.weight = m.add_param(prefix + ".weight", {in, out, 1, 1}, ParamRole::dense_weight, in);
  s.bias = m.add_param(prefix + ".bias", {1, out, 1, 1}, ParamRole::bias);
  return s;
}

template <typename T>
ResidualBlockSpec make_residual_block(GraphModel<T>& m, const std::string& prefix, std::size_t in_c,
                                      std::size_t out_c, std::size_t stride) {
  ResidualBlockSpec s;
  s.in_c = in_c;
  s.out_c = out_c;
  s.stride = stride;
  s.conv1 = make_conv(m, prefix + ".conv1", in_c, out_c, 3, stride);
  s.bn1 = make_batchnorm(m, prefix + ".bn1", out_c);
  s.conv2 = make_conv(m, prefix + ".conv2", out_c, out_c, 3, 1);
  s.bn2 = make_batchnorm(m, prefix + ".bn2", out_c);
  if (in_c != out_c || stride != 1) s.projection = make_conv(m, prefix + ".shortcut", in_c, out_c, 1, stride);
  return s;
}

template <typename T>
DenseBlockSpec make_dense_block(GraphModel<T>& m, const std::string& prefix, std::size_t in_c, std::size_t layers,
                                std::size_t growth) {
  if (growth == 0) throw ConfigError("dense block '" + prefix + "': growth rate must be >= 1");
  if (layers == 0) throw ConfigError("dense block '" + prefix + "': needs at least one layer");
  DenseBlockSpec s;
  s.in_c = in_c;
  s.growth = growth;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string unit = prefix + ".unit" + std::to_string(i + 1);
    const std::size_t c = in_c + i * growth;
    DenseUnitSpec u;
    u.bn = make_batchnorm(m, unit + ".bn", c);
    u.conv = make_conv(m, unit + ".conv", c, growth, 3, 1);
    s.units.push_back(u);
  }
  return s;
}

template <typename T>
TransitionSpec make_transition(GraphModel<T>& m, const std::string& prefix, std::size_t in_c, std::size_t out_c) {
  return {in_c, out_c, make_conv(m, prefix + ".conv", in_c, out_c, 1, 1)};
}

// ---------------------------------------------------------------------------
// Builders

/// Stem conv-BN-ReLU, then `stages[i]` residual blocks per stage with width
/// base_width * 2^i (stages after the first downsample by 2), then GAP and a
/// dense head. The capture layer is the output of the last residual block.
template <typename T = float>
GraphModel<T> build_resnet_mini(const std::vector<std::size_t>& stages, std::size_t base_width,
                                std::size_t num_classes, ImageShape input, std::uint64_t seed = 0) {
  if (stages.empty()) throw ConfigError("resnet-mini: stages must be non-empty");
  if (base_width == 0) throw ConfigError("resnet-mini: base width must be >= 1");
  GraphModel<T> m(input, num_classes);
  m.architecture = "resnet-mini";
  m.append({"stem_conv", make_conv(m, "stem_conv", input.c, base_width, 3)});
  m.append({"stem_bn", make_batchnorm(m, "stem_bn", base_width)});
  m.append({"stem_relu", ReluSpec{}});
  std::size_t width = base_width;
  std::string last;
  for (std::size_t stage = 0; stage < stages.size(); ++stage) {
    if (stages[stage] == 0) throw ConfigError("resnet-mini: every stage needs at least one block");
    const std::size_t out = base_width << stage;
    for (std::size_t b = 0; b < stages[stage]; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      last = "stage" + std::to_string(stage + 1) + "_block" + std::to_string(b + 1);
      m.append({last, make_residual_block(m, last, width, out, stride)});
      width = out;
    }
  }
  m.append({"gap", GapSpec{}});
  m.append({"flatten", FlattenSpec{}});
  m.append({"fc", make_dense(m, "fc", width, num_classes)});
  m.set_capture_layer(last);
  m.initialize(seed);
  return m;
}

/// Stem conv (2 * growth channels)-BN-ReLU-maxpool, dense blocks separated by
/// channel-halving transitions, then GAP and a dense head. The capture layer
/// is the output of the last dense block.
template <typename T = float>
GraphModel<T> build_densenet_mini(const std::vector<std::size_t>& blocks, std::size_t growth_rate,
                                  std::size_t num_classes, ImageShape input, std::uint64_t seed = 0) {
  if (blocks.empty()) throw ConfigError("densenet-mini: blocks must be non-empty");
  if (growth_rate == 0) throw ConfigError("densenet-mini: growth rate must be >= 1");
  GraphModel<T> m(input, num_classes);
  m.architecture = "densenet-mini";
  std::size_t width = 2 * growth_rate;
  m.append({"stem_conv", make_conv(m, "stem_conv", input.c, width, 3)});
  m.append({"stem_bn", make_batchnorm(m, "stem_bn", width)});
  m.append({"stem_relu", ReluSpec{}});
  m.append({"stem_pool", MaxPoolSpec{2, 2}});
  std::string last;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    last = "dense" + std::to_string(b + 1);
    DenseBlockSpec block = make_dense_block(m, last, width, blocks[b], growth_rate);
    width = block.out_c();
    m.append({last, std::move(block)});
    if (b + 1 < blocks.size()) {
      const std::string name = "transition" + std::to_string(b + 1);
      const std::size_t out = std::max<std::size_t>(1, width / 2);
      m.append({name, make_transition(m, name, width, out)});
      width = out;
    }
  }
  m.append({"gap", GapSpec{}});
  m.append({"flatten", FlattenSpec{}});
  m.append({"fc", make_dense(m, "fc", width, num_classes)});
  m.set_capture_layer(last);
  m.initialize(seed);
  return m;
}

}  // namespace xmed

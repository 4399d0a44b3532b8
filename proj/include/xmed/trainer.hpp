#pragma once

// Adam optimisation with reduce-on-plateau, early stopping and best-weight
// checkpointing, all keyed on validation loss.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "xmed/augment.hpp"
#include "xmed/dataset.hpp"
#include "xmed/error.hpp"
#include "xmed/model.hpp"

namespace xmed {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor4<T>> m;
  std::vector<Tensor4<T>> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update of every tensor in `params`. Moment
/// buffers are created on the first call.
template <typename T>
void adam_step(std::span<Tensor4<T>* const> params, std::span<const Tensor4<T>> grads, AdamState<T>& state,
               double lr, const AdamHyper& hyper = {}) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty() && state.t == 0) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->require_same(grads[i], "adam_step");
    params[i]->require_same(state.m[i], "adam_step state");
  }

  state.t += 1;
  const double correct1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double correct2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor4<T>& theta = *params[i];
    Tensor4<T>& m = state.m[i];
    Tensor4<T>& v = state.v[i];
    const Tensor4<T>& g = grads[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = g[k];
      const double mk = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * gk;
      const double vk = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double m_hat = mk / correct1;
      const double v_hat = vk / correct2;
      theta[k] = static_cast<T>(theta[k] - lr * m_hat / (std::sqrt(v_hat) + hyper.eps));
    }
  }
}

/// Improvement means best - loss > min_delta.
inline bool improves(double loss, double best, double min_delta) { return best - loss > min_delta; }

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without improvement, then starts counting again.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience, double min_delta = 0.0);

  /// Returns true when this update reduced the learning rate.
  bool update(double val_loss);
  double lr() const { return lr_; }
  std::size_t wait() const { return wait_; }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t wait_ = 0;
};

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience, double min_delta = 0.0);

  /// True once `patience` consecutive epochs show no improvement.
  bool update(double val_loss);
  std::size_t wait() const { return wait_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t wait_ = 0;
};

struct CheckpointResult {
  double best = std::numeric_limits<double>::infinity();
  bool saved = false;
};

/// Writes `model` to `path` only when val_loss strictly improves on best_so_far.
CheckpointResult checkpoint_best(const Model& model, double val_loss, double best_so_far,
                                 const std::filesystem::path& path);

struct TrainConfig {
  double lr0 = 1e-4;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 50;
  double plateau_factor = 0.2;
  std::size_t plateau_patience = 5;
  std::size_t early_stop_patience = 10;
  double min_delta = 0.0;
  AdamHyper adam;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augmentation;  // seed is taken from `seed`
  std::optional<std::filesystem::path> checkpoint_path;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;  // percent
  double lr = 0;            // rate used during this epoch
  std::vector<std::string> events;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();

  /// One JSON object per line, one line per epoch.
  void write_jsonl(std::ostream& out) const;
  bool operator==(const TrainLog&) const = default;
};

struct LossEvaluation {
  double loss = 0;
  double accuracy_pct = 0;
};

/// Mean cross-entropy and accuracy in inference mode (rescale only).
LossEvaluation evaluate_loss(const Model& model, const Dataset& split, double rescale = 1.0 / 255.0,
                             std::size_t batch_size = 32);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs the epoch loop and leaves `model` holding the weights of the epoch
/// with the lowest validation loss.
TrainLog train(Model& model, const Dataset& train_split, const Dataset& val_split, const TrainConfig& config,
               const EpochCallback& on_epoch = {});

}  // namespace xmed

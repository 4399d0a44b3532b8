#include "xmed/trainer.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "json.hpp"

#include "xmed/layers.hpp"
#include "xmed/model_io.hpp"
#include "xmed/parallel.hpp"

namespace xmed {

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience, double min_delta)
    : lr_(lr), factor_(factor), patience_(patience), min_delta_(min_delta) {
  if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau factor must be in (0,1)");
  if (patience == 0) throw ConfigError("plateau patience must be >= 1");
}

bool PlateauScheduler::update(double val_loss) {
  if (!std::isfinite(val_loss)) throw InputError("plateau scheduler received a non-finite loss");
  if (improves(val_loss, best_, min_delta_)) {
    best_ = val_loss;
    wait_ = 0;
    return false;
  }
  if (++wait_ >= patience_) {
    lr_ *= factor_;
    wait_ = 0;
    return true;
  }
  return false;
}

EarlyStopping::EarlyStopping(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {
  if (patience == 0) throw ConfigError("early-stopping patience must be >= 1");
}

bool EarlyStopping::update(double val_loss) {
  if (!std::isfinite(val_loss)) throw InputError("early stopping received a non-finite loss");
  if (improves(val_loss, best_, min_delta_)) {
    best_ = val_loss;
    wait_ = 0;
    return false;
  }
  return ++wait_ >= patience_;
}

CheckpointResult checkpoint_best(const Model& model, double val_loss, double best_so_far,
                                 const std::filesystem::path& path) {
  if (!improves(val_loss, best_so_far, 0.0)) return {best_so_far, false};
  save_model(model, path);
  return {val_loss, true};
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("plateau factor must be in (0,1)");
  if (plateau_patience == 0 || early_stop_patience == 0) throw ConfigError("patience must be >= 1");
  augmentation.validate();
}

void TrainLog::write_jsonl(std::ostream& out) const {
  for (const auto& e : epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["val_loss"] = e.val_loss;
    j["val_accuracy"] = e.val_accuracy;
    j["lr"] = e.lr;
    j["events"] = e.events;
    out << j.dump() << '\n';
  }
}

namespace {

Tensor assemble(const Dataset& split, std::span<const std::size_t> indices, const AugmentConfig& aug,
                std::size_t epoch, bool augment) {
  const ImageShape& s = split.image_shape;
  const std::size_t stride = s.c * s.h * s.w;
  Tensor batch({indices.size(), s.c, s.h, s.w});
  parallel_for(indices.size(), [&](std::size_t k) {
    const Tensor& raw = split.samples[indices[k]].image;
    const Tensor img = augment ? augment_image(raw, aug, indices[k], epoch) : rescale(raw, aug.rescale);
    if (img.size() != stride) throw ShapeError("sample " + split.samples[indices[k]].source + " has wrong size");
    std::copy_n(img.data(), stride, batch.data() + k * stride);
  });
  return batch;
}

std::vector<int> labels_of(const Dataset& split, std::span<const std::size_t> indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (auto i : indices) labels.push_back(split.samples[i].label);
  return labels;
}

}  // namespace

LossEvaluation evaluate_loss(const Model& model, const Dataset& split, double rescale_factor, std::size_t batch_size) {
  if (split.empty()) throw ConfigError("cannot evaluate an empty split");
  const AugmentConfig plain = AugmentConfig::none(rescale_factor);
  double loss = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> indices;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, split.size() - start);
    indices.resize(count);
    std::iota(indices.begin(), indices.end(), start);
    const Tensor batch = assemble(split, indices, plain, 0, false);
    const std::vector<int> labels = labels_of(split, indices);
    const Tensor logits = model.forward(batch).logits;
    loss += softmax_cross_entropy(logits, labels).loss * static_cast<double>(count);
    const std::size_t k = model.num_classes();
    for (std::size_t r = 0; r < count; ++r) {
      const float* row = logits.data() + r * k;
      const auto pred = static_cast<int>(std::max_element(row, row + k) - row);
      if (pred == labels[r]) ++correct;
    }
  }
  const auto n = static_cast<double>(split.size());
  return {loss / n, 100.0 * static_cast<double>(correct) / n};
}

TrainLog train(Model& model, const Dataset& train_split, const Dataset& val_split, const TrainConfig& config,
               const EpochCallback& on_epoch) {
  config.validate();
  TrainLog log;
  if (config.max_epochs == 0) return log;
  if (train_split.empty() || val_split.empty()) throw ConfigError("training needs non-empty train and validation splits");

  AugmentConfig aug = config.augmentation;
  aug.seed = config.seed;

  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    if (model.params()[i].trainable()) trainable.push_back(i);
  }

  AdamState<float> adam;
  PlateauScheduler plateau(config.lr0, config.plateau_factor, config.plateau_patience, config.min_delta);
  EarlyStopping stopper(config.early_stop_patience, config.min_delta);
  std::vector<Parameter<float>> best_params = model.params();

  std::vector<std::size_t> order(train_split.size());
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    EpochRecord record;
    record.epoch = epoch + 1;
    record.lr = plateau.lr();

    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(config.seed + epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - start);
      const std::span<const std::size_t> indices(order.data() + start, count);
      const Tensor batch = assemble(train_split, indices, aug, epoch, config.augment);
      const std::vector<int> labels = labels_of(train_split, indices);

      const ForwardPass<float> pass = model.forward(batch, Mode::train);
      LossResult<float> loss = softmax_cross_entropy(pass.logits, labels);
      if (!std::isfinite(loss.loss)) throw Error("training diverged: non-finite loss in epoch " + std::to_string(epoch + 1));
      std::vector<Tensor> grads = model.backward(pass, loss.grad_logits);

      auto& params = model.mutable_params();
      std::vector<Tensor*> values;
      std::vector<Tensor> trainable_grads;
      values.reserve(trainable.size());
      trainable_grads.reserve(trainable.size());
      for (auto i : trainable) {
        values.push_back(&params[i].value);
        trainable_grads.push_back(std::move(grads[i]));
      }
      adam_step<float>(values, trainable_grads, adam, record.lr, config.adam);
      loss_sum += loss.loss * static_cast<double>(count);
    }
    record.train_loss = loss_sum / static_cast<double>(order.size());

    const LossEvaluation val = evaluate_loss(model, val_split, aug.rescale, config.batch_size);
    record.val_loss = val.loss;
    record.val_accuracy = val.accuracy_pct;

    if (improves(val.loss, log.best_val_loss, 0.0)) {
      log.best_val_loss = val.loss;
      log.best_epoch = record.epoch;
      best_params = model.params();
      if (config.checkpoint_path) save_model(model, *config.checkpoint_path);
      record.events.emplace_back("checkpoint_saved");
    }
    if (plateau.update(val.loss)) record.events.emplace_back("lr_reduced");
    const bool stop = stopper.update(val.loss);
    if (stop) record.events.emplace_back("early_stopped");

    log.epochs.push_back(record);
    if (on_epoch) on_epoch(record);
    if (stop) break;
  }

  model.mutable_params() = std::move(best_params);
  return log;
}

}  // namespace xmed

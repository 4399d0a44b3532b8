#include "xmed/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "xmed/augment.hpp"
#include "xmed/error.hpp"
#include "xmed/layers.hpp"

namespace xmed {
namespace {

struct Sweep {
  std::size_t positives = 0;
  std::size_t negatives = 0;
  // Cumulative (tp, fp) after each distinct threshold, descending.
  std::vector<std::pair<std::size_t, std::size_t>> steps;
};

Sweep sweep(const ScoredPredictions& preds) {
  preds.validate();
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds.scores[a] > preds.scores[b]; });
  Sweep s;
  for (int label : preds.labels) (label == 1 ? s.positives : s.negatives)++;
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (preds.labels[order[k]] == 1 ? tp : fp)++;
    const bool group_end = k + 1 == order.size() || preds.scores[order[k + 1]] != preds.scores[order[k]];
    if (group_end) s.steps.emplace_back(tp, fp);
  }
  return s;
}

}  // namespace

void ScoredPredictions::validate() const {
  if (scores.size() != labels.size()) {
    throw InputError("scores/labels length mismatch: " + std::to_string(scores.size()) + " vs " +
                     std::to_string(labels.size()));
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw InputError("labels must be 0 or 1, got " + std::to_string(l));
  }
}

ConfusionMatrix confusion(const ScoredPredictions& preds, double threshold) {
  preds.validate();
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool predicted = preds.scores[i] >= threshold;
    const bool actual = preds.labels[i] == 1;
    if (predicted && actual) ++cm.tp;
    else if (predicted) ++cm.fp;
    else if (actual) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw UndefinedMetricError("accuracy of an empty confusion matrix");
  return 100.0 * static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
}

double f1(const ConfusionMatrix& cm) {
  if (cm.tp + cm.fp == 0 || cm.tp + cm.fn == 0) return 0.0;
  const double precision = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
  const double recall = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

RocResult roc_auc(const ScoredPredictions& preds) {
  const Sweep s = sweep(preds);
  if (s.positives == 0 || s.negatives == 0) {
    throw UndefinedMetricError("ROC AUC needs at least one positive and one negative label");
  }
  const auto p = static_cast<double>(s.positives);
  const auto n = static_cast<double>(s.negatives);
  RocResult r;
  r.points.emplace_back(0.0, 0.0);
  double area2 = 0;  // twice the area, in (tp, fp) count units
  std::size_t prev_tp = 0;
  std::size_t prev_fp = 0;
  for (const auto& [tp, fp] : s.steps) {
    area2 += static_cast<double>(fp - prev_fp) * static_cast<double>(tp + prev_tp);
    r.points.emplace_back(static_cast<double>(fp) / n, static_cast<double>(tp) / p);
    prev_tp = tp;
    prev_fp = fp;
  }
  r.auc = area2 / (2.0 * p * n);
  return r;
}

PrResult average_precision(const ScoredPredictions& preds) {
  const Sweep s = sweep(preds);
  if (s.positives == 0) throw UndefinedMetricError("average precision needs at least one positive label");
  const auto p = static_cast<double>(s.positives);
  PrResult r;
  r.points.emplace_back(0.0, 1.0);
  double prev_recall = 0;
  for (const auto& [tp, fp] : s.steps) {
    const double recall = static_cast<double>(tp) / p;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    r.ap += (recall - prev_recall) * precision;
    r.points.emplace_back(recall, precision);
    prev_recall = recall;
  }
  return r;
}

MetricsReport compute_report(const ScoredPredictions& preds, double threshold) {
  MetricsReport report;
  report.threshold = threshold;
  report.confusion = confusion(preds, threshold);
  report.accuracy_pct = accuracy(report.confusion);
  report.f1 = f1(report.confusion);
  try {
    RocResult roc = roc_auc(preds);
    report.auc = roc.auc;
    report.roc = std::move(roc.points);
  } catch (const UndefinedMetricError&) {
  }
  try {
    PrResult pr = average_precision(preds);
    report.avg_precision = pr.ap;
    report.pr = std::move(pr.points);
  } catch (const UndefinedMetricError&) {
  }
  return report;
}

ScoredPredictions score_dataset(const Model& model, const Dataset& split, std::size_t batch_size) {
  if (split.empty()) throw ConfigError("cannot evaluate on an empty split");
  const ImageShape& in = model.input_shape();
  const double scale = 1.0 / 255.0;
  ScoredPredictions preds;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, split.size() - start);
    Tensor batch({count, in.c, in.h, in.w});
    const std::size_t stride = in.c * in.h * in.w;
    for (std::size_t k = 0; k < count; ++k) {
      const Tensor img = rescale(split.samples[start + k].image, scale);
      if (img.size() != stride) throw ShapeError("sample " + split.samples[start + k].source + " has wrong size");
      std::copy_n(img.data(), stride, batch.data() + k * stride);
    }
    const Tensor probs = softmax(model.forward(batch).logits);
    const std::size_t classes = model.num_classes();
    for (std::size_t k = 0; k < count; ++k) {
      preds.scores.push_back(probs[k * classes + split.positive_class]);
      preds.labels.push_back(split.samples[start + k].label == static_cast<int>(split.positive_class) ? 1 : 0);
    }
  }
  return preds;
}

MetricsReport evaluate(const Model& model, const Dataset& split, double threshold) {
  MetricsReport report = compute_report(score_dataset(model, split), threshold);
  report.model = model.architecture;
  return report;
}

}  // namespace xmed

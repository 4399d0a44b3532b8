#pragma once

// Binary classification metrics: confusion matrix, accuracy, F1, ROC/AUC and
// step-wise average precision, plus model evaluation on a dataset split.

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xmed/dataset.hpp"
#include "xmed/model.hpp"

namespace xmed {

struct ScoredPredictions {
  std::vector<double> scores;  // positive-class score, higher means more positive
  std::vector<int> labels;     // 1 = positive, 0 = negative

  std::size_t size() const { return scores.size(); }
  /// Throws InputError on length mismatch or non-binary labels.
  void validate() const;
};

struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

using CurvePoint = std::pair<double, double>;

/// Predicted positive iff score >= threshold.
ConfusionMatrix confusion(const ScoredPredictions& preds, double threshold);

/// Percentage of correct predictions. Throws UndefinedMetricError when empty.
double accuracy(const ConfusionMatrix& cm);

/// Positive-class F1; 0 when precision or recall is undefined or both are 0.
double f1(const ConfusionMatrix& cm);

struct RocResult {
  double auc = 0;
  std::vector<CurvePoint> points;  // (fpr, tpr) from (0,0) to (1,1)
};

/// One ROC point per distinct score, swept in descending order; AUC by the
/// trapezoid rule. Throws UndefinedMetricError unless both classes occur.
RocResult roc_auc(const ScoredPredictions& preds);

struct PrResult {
  double ap = 0;
  std::vector<CurvePoint> points;  // (recall, precision), starting at (0,1)
};

/// Non-interpolated AP = sum_k (R_k - R_{k-1}) P_k over distinct descending
/// thresholds. Throws UndefinedMetricError without positives.
PrResult average_precision(const ScoredPredictions& preds);

struct MetricsReport {
  std::string dataset;
  std::string model;
  double threshold = 0.5;
  double accuracy_pct = 0;
  std::optional<double> auc;
  double f1 = 0;
  std::optional<double> avg_precision;
  ConfusionMatrix confusion;
  std::vector<CurvePoint> roc;
  std::vector<CurvePoint> pr;

  bool operator==(const MetricsReport&) const = default;
};

/// All metrics at one threshold. Undefined AUC / AP are left empty.
MetricsReport compute_report(const ScoredPredictions& preds, double threshold);

/// Softmax probability of the dataset's positive class for every sample.
ScoredPredictions score_dataset(const Model& model, const Dataset& split, std::size_t batch_size = 32);

/// Inference on `split` (raw pixels rescaled by 1/255) and compute_report.
MetricsReport evaluate(const Model& model, const Dataset& split, double threshold = 0.5);

}  // namespace xmed

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "metric_oracles.hpp"
#include "xmed/metrics.hpp"

using namespace xmed;

namespace {

ScoredPredictions preds(std::vector<double> s, std::vector<int> l) { return {std::move(s), std::move(l)}; }

}  // namespace

TEST(Confusion, Examples) {
  EXPECT_EQ(confusion(preds({0.9, 0.1}, {1, 0}), 0.5), (ConfusionMatrix{1, 0, 1, 0}));
  EXPECT_EQ(confusion(preds({0.9, 0.4, 0.2}, {1, 0, 1}), 0.95), (ConfusionMatrix{0, 0, 1, 2}));
  EXPECT_EQ(confusion(preds({0.8, 0.6, 0.4}, {1, 0, 1}), 0.5), (ConfusionMatrix{1, 1, 0, 1}));
  // score == threshold counts as positive
  EXPECT_EQ(confusion(preds({0.5}, {1}), 0.5), (ConfusionMatrix{1, 0, 0, 0}));
  EXPECT_THROW(confusion(preds({0.5, 0.2}, {1}), 0.5), InputError);
  EXPECT_THROW(confusion(preds({0.5}, {2}), 0.5), InputError);
}

TEST(Accuracy, Examples) {
  EXPECT_EQ(accuracy({3, 0, 4, 0}), 100.0);
  EXPECT_EQ(accuracy({1, 1, 1, 1}), 50.0);
  EXPECT_THROW(accuracy({}), UndefinedMetricError);
}

TEST(F1, Examples) {
  EXPECT_EQ(f1({5, 0, 3, 0}), 1.0);
  EXPECT_NEAR(f1({2, 1, 0, 1}), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(f1({0, 3, 2, 1}), 0.0);
  EXPECT_EQ(f1({0, 0, 4, 0}), 0.0);
}

TEST(RocAuc, Examples) {
  EXPECT_EQ(roc_auc(preds({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})).auc, 1.0);
  EXPECT_EQ(roc_auc(preds({0.3, 0.3, 0.3, 0.3}, {1, 0, 1, 0})).auc, 0.5);
  EXPECT_EQ(roc_auc(preds({0.8, 0.4, 0.6, 0.2}, {1, 1, 0, 0})).auc, 0.75);
  EXPECT_THROW(roc_auc(preds({0.1, 0.2}, {1, 1})), UndefinedMetricError);
  EXPECT_THROW(roc_auc(preds({}, {})), UndefinedMetricError);
}

TEST(RocAuc, TiesCollapseToOnePoint) {
  const auto r = roc_auc(preds({0.9, 0.5, 0.5, 0.1}, {1, 1, 0, 0}));
  const std::vector<CurvePoint> want{{0, 0}, {0, 0.5}, {0.5, 1}, {1, 1}};
  EXPECT_EQ(r.points, want);
}

TEST(AveragePrecision, Examples) {
  EXPECT_EQ(average_precision(preds({0.9, 0.8, 0.3}, {1, 1, 0})).ap, 1.0);
  EXPECT_NEAR(average_precision(preds({0.9, 0.8, 0.7}, {1, 0, 1})).ap, 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(average_precision(preds({0.9, 0.8, 0.7, 0.1}, {0, 0, 0, 1})).ap, 0.25, 1e-15);
  EXPECT_THROW(average_precision(preds({0.9, 0.1}, {0, 0})), UndefinedMetricError);
  const auto pr = average_precision(preds({0.9, 0.8, 0.7}, {1, 0, 1}));
  EXPECT_EQ(pr.points.front(), (CurvePoint{0, 1}));
  EXPECT_EQ(pr.points.back().first, 1.0);
}

TEST(Oracles, ThousandRandomInstances) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto p = xmed::testing::random_instance(rng, true);
    EXPECT_NEAR(roc_auc(p).auc, xmed::testing::auc_pair_count(p), 1e-12);
    EXPECT_NEAR(average_precision(p).ap, xmed::testing::ap_prefix_enumeration(p), 1e-12);
  }
  for (int i = 0; i < 200; ++i) {
    const auto p = xmed::testing::random_instance(rng, false);
    EXPECT_NEAR(average_precision(p).ap, xmed::testing::ap_prefix_enumeration(p), 1e-12);
  }
}

TEST(Oracles, ApWithoutTiesIsMeanPrecisionAtHits) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0, 1);
  for (int i = 0; i < 200; ++i) {
    auto p = xmed::testing::random_instance(rng, false);
    for (auto& s : p.scores) s = unit(rng);
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return p.scores[a] > p.scores[b]; });
    double hits = 0, sum = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (p.labels[order[k]] == 1) sum += ++hits / static_cast<double>(k + 1);
    }
    EXPECT_NEAR(average_precision(p).ap, sum / hits, 1e-12);
  }
}

TEST(RocAuc, AntisymmetricUnderNegation) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 300; ++i) {
    auto p = xmed::testing::random_instance(rng, true);
    auto neg = p;
    for (auto& s : neg.scores) s = -s;
    EXPECT_NEAR(roc_auc(p).auc, 1.0 - roc_auc(neg).auc, 1e-12);
  }
}

TEST(RocAuc, InvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 300; ++i) {
    const auto p = xmed::testing::random_instance(rng, true);
    auto q = p;
    for (auto& s : q.scores) s = std::exp(3.0 * s) - 7.0;
    EXPECT_EQ(roc_auc(p).auc, roc_auc(q).auc);
  }
}

TEST(RocAuc, PointsAreMonotoneFromOriginToOne) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 300; ++i) {
    const auto pts = roc_auc(xmed::testing::random_instance(rng, true)).points;
    ASSERT_GE(pts.size(), 2u);
    EXPECT_EQ(pts.front(), (CurvePoint{0, 0}));
    EXPECT_EQ(pts.back(), (CurvePoint{1, 1}));
    for (std::size_t k = 1; k < pts.size(); ++k) {
      EXPECT_GE(pts[k].first, pts[k - 1].first);
      EXPECT_GE(pts[k].second, pts[k - 1].second);
    }
  }
}

TEST(Report, ComputeReportMarksUndefinedMetrics) {
  const auto r = compute_report(preds({0.7, 0.2}, {0, 0}), 0.5);
  EXPECT_EQ(r.accuracy_pct, 50.0);
  EXPECT_FALSE(r.auc.has_value());
  EXPECT_FALSE(r.avg_precision.has_value());
  EXPECT_EQ(r.f1, 0.0);
}

namespace {

// gap -> dense whose positive logit grows with mean brightness.
Model brightness_model() {
  Model m({1, 2, 2}, 2);
  m.architecture = "toy";
  m.append({"gap", GapSpec{}});
  m.append({"flatten", FlattenSpec{}});
  m.append({"fc", make_dense(m, "fc", 1, 2)});
  m.param("fc.weight").value = Tensor({1, 2, 1, 1}, std::vector<float>{-10, 10});
  m.param("fc.bias").value = Tensor({1, 2, 1, 1}, std::vector<float>{5, -5});
  return m;
}

Dataset bright_dark(std::size_t n) {
  Dataset ds;
  ds.class_names = {"dark", "bright"};
  ds.positive_class = 1;
  ds.image_shape = {1, 2, 2};
  for (std::size_t i = 0; i < n; ++i) {
    const bool bright = i % 3 == 0;
    ds.samples.push_back({"s" + std::to_string(i), Tensor({1, 1, 2, 2}, bright ? 200.0f + i : 40.0f - i), bright ? 1 : 0, {}});
  }
  return ds;
}

}  // namespace

TEST(Evaluate, SeparableToyModel) {
  const Model m = brightness_model();
  const Dataset ds = bright_dark(37);
  const MetricsReport r = evaluate(m, ds);
  EXPECT_EQ(r.accuracy_pct, 100.0);
  EXPECT_EQ(r.auc, 1.0);
  EXPECT_EQ(r.f1, 1.0);
  EXPECT_EQ(r.avg_precision, 1.0);
  EXPECT_EQ(r.confusion.total(), 37u);
  EXPECT_EQ(r.model, "toy");
  EXPECT_EQ(evaluate(m, ds), r);
  EXPECT_EQ(score_dataset(m, ds, 5).scores, score_dataset(m, ds, 32).scores);
}

TEST(Evaluate, EmptySplitIsConfigError) { EXPECT_THROW(evaluate(brightness_model(), Dataset{}), ConfigError); }

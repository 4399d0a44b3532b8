#pragma once

// Brute-force references for ranking metrics, written without sorting or
// curve construction so they share no logic with the library.

#include <random>
#include <set>

#include "xmed/metrics.hpp"

namespace xmed::testing {

/// Mann-Whitney U over every (positive, negative) pair, ties counted 1/2.
inline double auc_pair_count(const ScoredPredictions& p) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.labels[i] != 1) continue;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p.labels[j] != 0) continue;
      pairs += 1;
      wins += p.scores[i] > p.scores[j] ? 1.0 : p.scores[i] == p.scores[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

/// Step-wise AP by enumerating every score level as a threshold and
/// recounting the prefix "score >= t" from scratch.
inline double ap_prefix_enumeration(const ScoredPredictions& p) {
  const std::set<double, std::greater<>> levels(p.scores.begin(), p.scores.end());
  double positives = 0;
  for (int l : p.labels) positives += l;
  double ap = 0, prev_recall = 0;
  for (double t : levels) {
    double tp = 0, taken = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p.scores[i] >= t) {
        taken += 1;
        tp += p.labels[i];
      }
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / taken);
    prev_recall = recall;
  }
  return ap;
}

/// Random instance with n <= 12; coarse score grids produce ties.
inline ScoredPredictions random_instance(std::mt19937_64& rng, bool need_both_classes) {
  std::uniform_int_distribution<std::size_t> size(need_both_classes ? 2 : 1, 12);
  ScoredPredictions p;
  const std::size_t n = size(rng);
  const int levels = std::uniform_int_distribution<int>(0, 3)(rng) == 0 ? 0 : std::uniform_int_distribution<int>(2, 6)(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    p.scores.push_back(levels == 0 ? unit(rng) : std::floor(unit(rng) * levels) / levels);
    p.labels.push_back(unit(rng) < 0.5 ? 1 : 0);
  }
  if (need_both_classes) {
    p.labels[0] = 1;
    p.labels[1] = 0;
    std::shuffle(p.labels.begin(), p.labels.end(), rng);
  } else {
    p.labels[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)] = 1;
  }
  return p;
}

}  // namespace xmed::testing

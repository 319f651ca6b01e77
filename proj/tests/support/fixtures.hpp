// SPDX-License-Identifier: Apache-2.0
//
// Prediction fixtures and a brute-force recall-at-precision oracle that scans
// every candidate threshold independently.
#pragma once

#include <set>
#include <vector>

#include "modfuse/metrics.hpp"
#include "modfuse/random.hpp"

namespace modfuse::testing {

inline PredictionSet make_predictions(const std::vector<std::vector<double>>& scores,
                                      const std::vector<std::vector<double>>& targets) {
  const std::size_t n = scores.size(), l = scores.at(0).size();
  PredictionSet p;
  p.scores = Tensor({n, l});
  p.targets = Tensor({targets.size(), targets.at(0).size()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < l; ++j) p.scores.at(i, j) = scores[i][j];
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = 0; j < targets[i].size(); ++j) p.targets.at(i, j) = targets[i][j];
  return p;
}

/// Random scores in [0, 1] (quantized to `grid` levels when grid > 0) and
/// Bernoulli(prevalence) targets.
inline PredictionSet random_predictions(Rng& rng, std::size_t n, std::size_t labels, double prevalence,
                                        std::size_t grid) {
  PredictionSet p;
  p.scores = Tensor({n, labels});
  p.targets = Tensor({n, labels});
  for (std::size_t i = 0; i < n * labels; ++i) {
    p.scores[i] = grid ? static_cast<double>(rng.below(grid + 1)) / static_cast<double>(grid) : rng.uniform();
    p.targets[i] = rng.bernoulli(prevalence) ? 1.0 : 0.0;
  }
  return p;
}

inline RecallAtPrecision brute_force_recall_at_precision(const PredictionSet& p, double target) {
  std::set<double> candidates(p.scores.data().begin(), p.scores.data().end());
  std::size_t positives = 0;
  for (double t : p.targets.data()) positives += t == 1.0;
  RecallAtPrecision best;
  bool found = false;
  for (double t : candidates) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < p.scores.numel(); ++i) {
      if (p.scores[i] < t) continue;
      (p.targets[i] == 1.0 ? tp : fp) += 1;
    }
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    if (precision < target) continue;
    if (!found || recall > best.recall || (recall == best.recall && t > best.threshold)) {
      best = {recall, t};
      found = true;
    }
  }
  return best;
}

}  // namespace modfuse::testing

// SPDX-License-Identifier: Apache-2.0
//
// Lambda sweep: one model per grid value, all from the same initialization
// seed, selected by validation recall at the precision target.
#pragma once

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "modfuse/config.hpp"
#include "modfuse/metrics.hpp"
#include "modfuse/optim.hpp"

namespace modfuse {

struct TrainedModel {
  FusionModel model;
  TrainLog log;
};

/// Builds and trains a model from `cfg` with the given lambda. `validation`
/// replaces the internal carve when non-empty.
inline TrainedModel train_model(const ExperimentConfig& cfg, std::span<const Record> train_set, double lambda,
                                std::span<const Record> validation = {}) {
  ExperimentConfig c = cfg;
  c.train.lambda = lambda;
  TrainedModel out{FusionModel(model_config(c, train_set), init_seed(c)), {}};
  out.log = train(out.model, train_set, c.train, c.schedule, validation);
  return out;
}

/// Mean over samples of KL(p || uniform) for two-way gate weights.
inline double mean_gate_kl(const PredictionSet& p) {
  if (!p.attention || p.attention->empty()) throw ValidationError("mean_gate_kl: no attention weights");
  double total = 0;
  for (double a : *p.attention) {
    for (double q : {a, 1.0 - a})
      if (q > 0) total += q * std::log(2.0 * q);
  }
  return total / static_cast<double>(p.attention->size());
}

struct SweepRow {
  double lambda = 0;
  bool ok = false;
  std::string error;  // set when training aborted
  double val_r_at_p95 = 0;
  F1Suite test_f1;
  double test_r_at_p95 = 0;
  std::optional<double> collapse_fraction;
  std::optional<double> mean_kl;
  std::optional<double> mean_gate_deviation;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::optional<std::size_t> selected;

  /// Tab-separated table, one row per grid value in grid order; the selected
  /// row is marked with '*' in the last column.
  std::string table() const {
    std::ostringstream os;
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("-"); };
    os << "lambda\tstatus\tval_r_at_p95\ttest_micro_f1\ttest_macro_f1\ttest_weighted_f1\ttest_r_at_p95\t"
          "collapse_fraction\tmean_kl\tselected\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      os << format_double(r.lambda) << '\t';
      if (!r.ok) {
        os << "failed\t-\t-\t-\t-\t-\t-\t-\t\n";
        continue;
      }
      os << "ok\t" << format_double(r.val_r_at_p95) << '\t' << format_double(r.test_f1.micro) << '\t'
         << format_double(r.test_f1.macro) << '\t' << format_double(r.test_f1.weighted) << '\t'
         << format_double(r.test_r_at_p95) << '\t' << opt(r.collapse_fraction) << '\t' << opt(r.mean_kl) << '\t'
         << (selected && *selected == i ? "*" : "") << '\n';
    }
    return os.str();
  }
};

/// Trains one model per lambda in `grid` on `train_set`, scores it on
/// `val_set` and `test_set`, and selects the lambda with the highest
/// validation recall at the precision target (smaller lambda on ties). A
/// training abort marks that row failed and the sweep continues.
inline SweepResult lambda_sweep(const ExperimentConfig& cfg, std::span<const Record> train_set,
                                std::span<const Record> val_set, std::span<const Record> test_set,
                                const std::vector<double>& grid) {
  if (grid.empty()) throw ValidationError("sweep: empty lambda grid");
  if (val_set.empty() || test_set.empty()) throw ValidationError("sweep: validation and test sets must be non-empty");
  SweepResult res;
  for (double lambda : grid) {
    SweepRow row;
    row.lambda = lambda;
    try {
      const TrainedModel tm = train_model(cfg, train_set, lambda, val_set);
      const PredictionSet pv = predict(tm.model, val_set), pt = predict(tm.model, test_set);
      row.val_r_at_p95 = recall_at_precision(pv, cfg.eval.precision_target).recall;
      const EvalReport rep = evaluate(pt, cfg.eval);
      row.test_f1 = rep.f1;
      row.test_r_at_p95 = rep.r_at_p95.recall;
      if (rep.attention) {
        row.collapse_fraction = rep.attention->collapse_fraction;
        row.mean_kl = mean_gate_kl(pt);
        row.mean_gate_deviation = mean_gate_deviation(pt);
      }
      row.ok = true;
    } catch (const NumericError& e) {
      row.error = e.what();
    }
    res.rows.push_back(row);
  }
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    const auto& r = res.rows[i];
    if (!r.ok) continue;
    if (!res.selected) {
      res.selected = i;
      continue;
    }
    const auto& b = res.rows[*res.selected];
    if (r.val_r_at_p95 > b.val_r_at_p95 || (r.val_r_at_p95 == b.val_r_at_p95 && r.lambda < b.lambda)) res.selected = i;
  }
  return res;
}

}  // namespace modfuse

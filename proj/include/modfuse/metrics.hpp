// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics over a fixed set of model outputs: the F1 family,
// recall at a precision floor with one global threshold, accuracy, per-sample
// modality wins and gate-weight distribution statistics.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "modfuse/datagen.hpp"
#include "modfuse/error.hpp"
#include "modfuse/tensor.hpp"

namespace modfuse {

struct PredictionSet {
  std::vector<std::string> ids;  // may be empty; otherwise one per row
  Tensor scores;                 // [n x L], finite, in [0, 1]
  Tensor targets;                // [n x L], 0/1
  std::optional<std::vector<double>> attention;  // p_txt per sample

  std::size_t size() const { return scores.rows(); }
  std::size_t num_labels() const { return scores.cols(); }
};

inline void validate(const PredictionSet& p) {
  if (p.scores.shape() != p.targets.shape()) {
    throw DimensionError("predictions: scores " + shape_str(p.scores.shape()) + " vs targets " +
                         shape_str(p.targets.shape()));
  }
  if (!p.ids.empty() && p.ids.size() != p.size()) throw DimensionError("predictions: id count != rows");
  for (double s : p.scores.data())
    if (!(s >= 0.0 && s <= 1.0)) throw ValidationError("predictions: scores must be finite and in [0, 1]");
  for (double t : p.targets.data())
    if (t != 0.0 && t != 1.0) throw ValidationError("predictions: targets must be 0 or 1");
  if (p.attention) {
    if (p.attention->size() != p.size()) throw DimensionError("predictions: attention length != rows");
    for (double a : *p.attention)
      if (!(a >= 0.0 && a <= 1.0)) throw ValidationError("predictions: attention must lie in [0, 1]");
  }
}

// ---------------------------------------------------------------------------
// F1 family
// ---------------------------------------------------------------------------

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::size_t support() const { return tp + fn; }
};

/// F1 from counts; 0 when there is nothing to score.
inline double f1_score(const Confusion& c) {
  const std::size_t den = 2 * c.tp + c.fp + c.fn;
  return den == 0 ? 0.0 : static_cast<double>(2 * c.tp) / static_cast<double>(den);
}

/// Per-label confusion counts, predicting positive when score >= threshold.
inline std::vector<Confusion> confusion(const PredictionSet& p, double threshold) {
  validate(p);
  std::vector<Confusion> out(p.num_labels());
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t l = 0; l < p.num_labels(); ++l) {
      const bool pred = p.scores.at(i, l) >= threshold;
      const bool truth = p.targets.at(i, l) == 1.0;
      auto& c = out[l];
      (pred ? (truth ? c.tp : c.fp) : (truth ? c.fn : c.tn)) += 1;
    }
  }
  return out;
}

struct F1Suite {
  double micro = 0, macro = 0, weighted = 0;
};

inline F1Suite f1_suite(const PredictionSet& p, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("f1_suite: threshold must lie in (0, 1)");
  const auto per_label = confusion(p, threshold);
  Confusion total;
  std::size_t support = 0;
  for (const auto& c : per_label) {
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
    support += c.support();
  }
  F1Suite r;
  r.micro = f1_score(total);
  // Weighted F1 divides supports by their gcd first, so with equal supports
  // it performs exactly the operations of the macro average and the two
  // agree bit for bit.
  std::size_t g = 0;
  for (const auto& c : per_label) g = std::gcd(g, c.support());
  double macro_sum = 0, weighted_sum = 0;
  for (const auto& c : per_label) {
    const double f = f1_score(c);
    macro_sum += f;
    if (g > 0) weighted_sum += f * static_cast<double>(c.support() / g);
  }
  r.macro = macro_sum / static_cast<double>(per_label.size());
  r.weighted = g > 0 ? weighted_sum / static_cast<double>(support / g) : 0.0;
  return r;
}

/// Multiclass accuracy: argmax of scores equals argmax of targets. Ties in
/// scores resolve to the lowest label index.
inline double accuracy(const PredictionSet& p) {
  validate(p);
  if (p.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::size_t best = 0, truth = 0;
    for (std::size_t l = 1; l < p.num_labels(); ++l) {
      if (p.scores.at(i, l) > p.scores.at(i, best)) best = l;
      if (p.targets.at(i, l) > p.targets.at(i, truth)) truth = l;
    }
    hits += best == truth;
  }
  return static_cast<double>(hits) / static_cast<double>(p.size());
}

// ---------------------------------------------------------------------------
// Recall at fixed precision
// ---------------------------------------------------------------------------

struct RecallAtPrecision {
  double recall = 0.0;
  double threshold = 1.0;
};

/// One global threshold over all (sample, label) scores. Candidates are the
/// distinct scores; a candidate t predicts positive for score >= t. Returns the
/// largest micro recall among candidates whose micro precision reaches
/// `target`, preferring the highest threshold on ties; (0, 1.0) if none does.
inline RecallAtPrecision recall_at_precision(const PredictionSet& p, double target = 0.95) {
  validate(p);
  const std::size_t n = p.scores.numel();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p.scores[a] > p.scores[b]; });
  std::size_t positives = 0;
  for (double t : p.targets.data()) positives += t == 1.0;
  if (positives == 0) throw ValidationError("recall_at_precision: no positive targets");

  RecallAtPrecision best;
  bool found = false;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < n;) {
    const double t = p.scores[order[k]];
    for (; k < n && p.scores[order[k]] == t; ++k) (p.targets[order[k]] == 1.0 ? tp : fp) += 1;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    if (precision >= target && (!found || recall > best.recall)) {
      best = {recall, t};
      found = true;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Per-sample modality comparison
// ---------------------------------------------------------------------------

enum class WinRule {
  exact_match,  // a sample is correct when every label is right
  per_label,    // the model with more correct labels wins
};

struct ModalityWins {
  std::size_t text = 0, image = 0, ties = 0;
};

inline ModalityWins best_modality_counts(const PredictionSet& text, const PredictionSet& image, double threshold = 0.5,
                                         WinRule rule = WinRule::exact_match) {
  validate(text);
  validate(image);
  if (text.scores.shape() != image.scores.shape()) {
    throw ValidationError("best_modality_counts: prediction sets are not aligned (" + shape_str(text.scores.shape()) +
                          " vs " + shape_str(image.scores.shape()) + ")");
  }
  if (!text.ids.empty() && !image.ids.empty() && text.ids != image.ids) {
    throw ValidationError("best_modality_counts: sample ids differ between prediction sets");
  }
  if (text.targets != image.targets) throw ValidationError("best_modality_counts: targets differ between prediction sets");
  auto correct = [&](const PredictionSet& p, std::size_t i) {
    std::size_t ok = 0;
    for (std::size_t l = 0; l < p.num_labels(); ++l) ok += (p.scores.at(i, l) >= threshold) == (p.targets.at(i, l) == 1.0);
    return rule == WinRule::exact_match ? static_cast<std::size_t>(ok == p.num_labels()) : ok;
  };
  ModalityWins w;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const std::size_t a = correct(text, i), b = correct(image, i);
    (a > b ? w.text : (b > a ? w.image : w.ties)) += 1;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Gate-weight distribution
// ---------------------------------------------------------------------------

/// Linear interpolation between order statistics at position q * (n - 1).
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("quantile: empty input");
  if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("quantile: q must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

struct AttentionStats {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0;
};

struct AttentionReport {
  AttentionStats p_txt;
  /// Share of samples whose smaller modality weight is below the cutoff.
  double collapse_fraction = 0;
  double cutoff = 0.1;
  /// Histogram of p_txt over equal-width bins on [0, 1].
  std::vector<std::size_t> histogram;
};

inline AttentionStats describe(const std::vector<double>& v) {
  AttentionStats s;
  s.min = quantile(v, 0.0);
  s.q1 = quantile(v, 0.25);
  s.median = quantile(v, 0.5);
  s.q3 = quantile(v, 0.75);
  s.max = quantile(v, 1.0);
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  return s;
}

inline AttentionReport attention_report(const PredictionSet& p, double cutoff = 0.1, std::size_t bins = 10) {
  validate(p);
  if (!p.attention) throw ValidationError("attention_report: predictions carry no attention weights");
  if (p.attention->empty()) throw ValidationError("attention_report: no samples");
  if (bins == 0) throw ValidationError("attention_report: bins must be positive");
  AttentionReport r;
  r.cutoff = cutoff;
  r.p_txt = describe(*p.attention);
  r.histogram.assign(bins, 0);
  std::size_t collapsed = 0;
  for (double a : *p.attention) {
    collapsed += std::min(a, 1.0 - a) < cutoff;
    r.histogram[std::min(bins - 1, static_cast<std::size_t>(a * static_cast<double>(bins)))] += 1;
  }
  r.collapse_fraction = static_cast<double>(collapsed) / static_cast<double>(p.attention->size());
  return r;
}

/// Mean |p_txt - 0.5| over samples.
inline double mean_gate_deviation(const PredictionSet& p) {
  if (!p.attention || p.attention->empty()) throw ValidationError("mean_gate_deviation: no attention weights");
  double s = 0;
  for (double a : *p.attention) s += std::abs(a - 0.5);
  return s / static_cast<double>(p.attention->size());
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalReport {
  std::size_t samples = 0;
  F1Suite f1;
  std::optional<double> accuracy;  // multiclass only
  RecallAtPrecision r_at_p95;
  double threshold_used = 0.5;
  std::optional<AttentionReport> attention;

  /// Single line of space-separated key=value fields; see the README for the
  /// field list. Attention fields appear only for gated models.
  std::string machine_line() const {
    std::ostringstream os;
    auto num = [&](const char* key, double v) { os << ' ' << key << '=' << format_double(v); };
    os << "EVAL samples=" << samples;
    num("micro_f1", f1.micro);
    num("macro_f1", f1.macro);
    num("weighted_f1", f1.weighted);
    if (accuracy) num("accuracy", *accuracy);
    num("r_at_p95", r_at_p95.recall);
    num("r_at_p95_threshold", r_at_p95.threshold);
    num("threshold_used", threshold_used);
    if (attention) {
      num("p_txt_min", attention->p_txt.min);
      num("p_txt_q1", attention->p_txt.q1);
      num("p_txt_median", attention->p_txt.median);
      num("p_txt_q3", attention->p_txt.q3);
      num("p_txt_max", attention->p_txt.max);
      num("p_txt_mean", attention->p_txt.mean);
      num("collapse_fraction", attention->collapse_fraction);
    }
    return os.str();
  }

  std::string table() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "samples            " << samples << '\n'
       << "micro_f1           " << f1.micro << '\n'
       << "macro_f1           " << f1.macro << '\n'
       << "weighted_f1        " << f1.weighted << '\n';
    if (accuracy) os << "accuracy           " << *accuracy << '\n';
    os << "r_at_p95           " << r_at_p95.recall << " (threshold " << r_at_p95.threshold << ")\n"
       << "threshold_used     " << threshold_used << '\n';
    if (attention) {
      const auto& s = attention->p_txt;
      os << "p_txt min/q1/med/q3/max  " << s.min << ' ' << s.q1 << ' ' << s.median << ' ' << s.q3 << ' ' << s.max
         << '\n'
         << "p_txt mean         " << s.mean << '\n'
         << "collapse_fraction  " << attention->collapse_fraction << " (min weight < " << attention->cutoff << ")\n";
    }
    return os.str();
  }
};

struct EvalOptions {
  double threshold = 0.5;
  double precision_target = 0.95;
  double collapse_cutoff = 0.1;
  bool multiclass = false;
};

inline EvalReport evaluate(const PredictionSet& p, const EvalOptions& opt = {}) {
  EvalReport r;
  r.samples = p.size();
  r.threshold_used = opt.threshold;
  r.f1 = f1_suite(p, opt.threshold);
  if (opt.multiclass) r.accuracy = accuracy(p);
  r.r_at_p95 = recall_at_precision(p, opt.precision_target);
  if (p.attention) r.attention = attention_report(p, opt.collapse_cutoff);
  return r;
}

}  // namespace modfuse

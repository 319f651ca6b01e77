// SPDX-License-Identifier: Apache-2.0
//
// Adam, a linear-warmup + cosine-annealing schedule, and the training loop.
#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "modfuse/datagen.hpp"
#include "modfuse/fusion.hpp"
#include "modfuse/metrics.hpp"

namespace modfuse {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates, one pair per parameter in list order. Sized lazily on
/// the first step. Bias correction uses each parameter's own update count, so
/// a parameter that starts updating late is corrected as if fresh.
struct AdamState {
  AdamConfig cfg;
  std::vector<Tensor> m, v;
  std::vector<long> updates;
  long t = 0;  // adam_step calls
};

/// One bias-corrected Adam update over every parameter with `update` set
/// (all trainable parameters when the mask is empty). `lr_scale`, when given,
/// multiplies the step size per parameter.
inline void adam_step(ParameterList& params, AdamState& state, double lr, const std::vector<char>& update = {},
                      const std::vector<double>& lr_scale = {}) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.var.shape());
      state.v.emplace_back(p.var.shape());
    }
    state.updates.assign(params.size(), 0);
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state was built for a different parameter list");
  ++state.t;
  const auto& c = state.cfg;
  std::size_t k = 0;
  for (auto& p : params) {
    const std::size_t idx = k++;
    if (!(update.empty() ? p.trainable : update[idx])) continue;
    const double t = static_cast<double>(++state.updates[idx]);
    const double bc1 = 1.0 - std::pow(c.beta1, t), bc2 = 1.0 - std::pow(c.beta2, t);
    const double step = lr * (lr_scale.empty() ? 1.0 : lr_scale[idx]);
    auto w = p.var.mutable_value().data();
    const auto g = p.var.grad().data();
    auto m = state.m[idx].data();
    auto v = state.v[idx].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      w[i] -= step * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  double max_lr = 1e-2;
  long warmup_steps = 0;
  /// 0 lets train() fill in the run length, with warmup_fraction of it spent
  /// warming up.
  long total_steps = 0;
  double min_lr = 0.0;
  double warmup_fraction = 0.1;
};

inline void validate(const ScheduleConfig& s) {
  if (!(s.max_lr > 0.0)) throw ValidationError("schedule: max_lr must be positive");
  if (!(s.min_lr >= 0.0)) throw ValidationError("schedule: min_lr must be >= 0");
  if (s.total_steps <= 0) throw ValidationError("schedule: total_steps must be positive");
  if (s.warmup_steps < 0 || s.warmup_steps > s.total_steps) {
    throw ValidationError("schedule: warmup_steps must lie in [0, total_steps]");
  }
}

/// Linear ramp to max_lr over the warmup, then cosine decay to min_lr at
/// total_steps. Defined on the real interval [0, total_steps]; when
/// warmup == total the schedule ends at max_lr.
inline double lr_at_position(double t, const ScheduleConfig& s) {
  validate(s);
  const double total = static_cast<double>(s.total_steps), warmup = static_cast<double>(s.warmup_steps);
  if (!(t >= 0.0 && t <= total)) {
    throw ValidationError("lr_at: step " + format_double(t) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  if (t < warmup) return s.max_lr * t / warmup;
  if (s.total_steps == s.warmup_steps) return s.max_lr;
  const double progress = (t - warmup) / (total - warmup);
  return s.min_lr + 0.5 * (s.max_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double lr_at(long step, const ScheduleConfig& s) { return lr_at_position(static_cast<double>(step), s); }

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  bool freeze_encoders = false;
  /// Share of the input carved off (stratified) for per-epoch validation.
  double val_fraction = 0.1;
  double threshold = 0.5;
  /// Per-group step-size multipliers keyed by parameter-name prefix; the
  /// first matching prefix wins.
  std::vector<std::pair<std::string, double>> lr_multipliers;
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw ValidationError("train: batch_size must be >= 1");
  if (c.epochs == 0) throw ValidationError("train: epochs must be positive");
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw ValidationError("train: lambda must be finite and >= 0");
  if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0)) throw ValidationError("train: val_fraction must lie in [0, 1)");
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ValidationError("train: threshold must lie in (0, 1)");
}

struct ValidationMetrics {
  double micro_f1 = 0, macro_f1 = 0, r_at_p95 = 0;
  std::optional<double> collapse_fraction;
};

struct EpochLog {
  std::size_t epoch = 0;
  long step = 0;      // optimizer steps completed
  double lr = 0;      // rate used by the last step of the epoch
  double loss_ce = 0;  // mean batch cross-entropy
  std::optional<double> loss_kl;  // mean per-sample KL to uniform, unweighted
  std::optional<ValidationMetrics> val;
};

/// Tab-separated, one line per epoch after a '#' header naming the columns:
/// epoch step lr loss_ce loss_kl val_micro_f1 val_macro_f1 val_r_at_p95
/// val_collapse_fraction. Absent values are written as '-'.
struct TrainLog {
  std::vector<EpochLog> epochs;
  std::vector<std::string> warnings;

  static constexpr const char* kHeader =
      "# epoch\tstep\tlr\tloss_ce\tloss_kl\tval_micro_f1\tval_macro_f1\tval_r_at_p95\tval_collapse_fraction";

  std::string to_text() const {
    std::ostringstream os;
    os << kHeader << '\n';
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("-"); };
    for (const auto& e : epochs) {
      os << e.epoch << '\t' << e.step << '\t' << format_double(e.lr) << '\t' << format_double(e.loss_ce) << '\t'
         << opt(e.loss_kl);
      if (e.val) {
        os << '\t' << format_double(e.val->micro_f1) << '\t' << format_double(e.val->macro_f1) << '\t'
           << format_double(e.val->r_at_p95) << '\t' << opt(e.val->collapse_fraction);
      } else {
        os << "\t-\t-\t-\t-";
      }
      os << '\n';
    }
    return os.str();
  }
};

/// Checks that records fit the model's input and label dimensions.
inline void check_compatible(const FusionModel& model, std::span<const Record> records) {
  const auto& c = model.config();
  for (const auto& r : records) {
    if (r.labels.size() != c.num_labels) {
      throw DimensionError("record " + r.id + " has " + std::to_string(r.labels.size()) + " labels, model expects " +
                           std::to_string(c.num_labels));
    }
    if (uses_image(c) && r.image_features.size() != c.image.input_dim) {
      throw DimensionError("record " + r.id + " has " + std::to_string(r.image_features.size()) +
                           " image features, model expects " + std::to_string(c.image.input_dim));
    }
    if (uses_text(c)) {
      for (int t : r.tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= c.text.vocab_size) {
          throw DimensionError("record " + r.id + " has token " + std::to_string(t) + " outside vocabulary of " +
                               std::to_string(c.text.vocab_size));
        }
      }
    }
  }
}

/// Model outputs on `records`, in input order.
inline PredictionSet predict(const FusionModel& model, std::span<const Record> records, std::size_t batch_size = 256) {
  if (records.empty()) throw ValidationError("predict: no records");
  check_compatible(model, records);
  const std::size_t n = records.size(), labels = model.config().num_labels;
  PredictionSet out;
  out.scores = Tensor({n, labels});
  out.targets = Tensor({n, labels});
  if (has_gate(model.config())) out.attention.emplace();
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(records, idx);
    const auto fwd = model.forward(b.tokens, b.images);
    const Tensor& probs = fwd.probs.value();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t l = 0; l < labels; ++l) {
        out.scores.at(idx[r], l) = probs.at(r, l);
        out.targets.at(idx[r], l) = b.targets.at(r, l);
      }
      if (out.attention) out.attention->push_back(fwd.attention->weights.value().at(r, 0));
    }
  }
  out.ids.reserve(n);
  for (const auto& r : records) out.ids.push_back(r.id);
  return out;
}

inline bool is_encoder_parameter(const std::string& name) {
  return name.starts_with("text_encoder.") || name.starts_with("image_encoder.");
}

/// Minibatch Adam on the regularized objective. Shuffling, the validation
/// carve and everything else random derive from `tcfg.seed`. A non-finite
/// loss aborts with a NumericError naming the step and the offending term.
/// A non-empty `validation` set replaces the carve from `records`.
inline TrainLog train(FusionModel& model, std::span<const Record> records, const TrainConfig& tcfg,
                      ScheduleConfig scfg = {}, std::span<const Record> validation = {}) {
  validate(tcfg);
  if (records.empty()) throw ValidationError("train: dataset is empty");
  check_compatible(model, records);

  TrainLog log;
  std::vector<Record> train_set, val_set;
  if (!validation.empty()) {
    check_compatible(model, validation);
    train_set.assign(records.begin(), records.end());
    val_set.assign(validation.begin(), validation.end());
  } else if (tcfg.val_fraction > 0.0 && records.size() >= 2) {
    const std::vector<double> fractions{1.0 - tcfg.val_fraction, tcfg.val_fraction};
    auto split = stratified_split(records, fractions, mix_seed(tcfg.seed, 11));
    train_set = std::move(split.parts[0]);
    val_set = std::move(split.parts[1]);
    log.warnings = std::move(split.warnings);
  } else {
    train_set.assign(records.begin(), records.end());
  }
  if (train_set.empty()) throw ValidationError("train: no records left for training after the validation carve");

  const std::size_t n = train_set.size();
  const long steps_per_epoch = static_cast<long>((n + tcfg.batch_size - 1) / tcfg.batch_size);
  const long total = steps_per_epoch * static_cast<long>(tcfg.epochs);
  if (scfg.total_steps == 0) {
    scfg.total_steps = total;
    scfg.warmup_steps = std::lround(scfg.warmup_fraction * static_cast<double>(total));
  } else if (scfg.total_steps != total) {
    throw ValidationError("train: schedule total_steps " + std::to_string(scfg.total_steps) + " != planned " +
                          std::to_string(total) + " steps");
  }
  validate(scfg);

  auto& params = model.parameters();
  std::vector<char> update;
  std::vector<double> lr_scale;
  for (const auto& p : params) {
    update.push_back(p.trainable && !(tcfg.freeze_encoders && is_encoder_parameter(p.name)));
    double s = 1.0;
    for (const auto& [prefix, mult] : tcfg.lr_multipliers) {
      if (p.name.starts_with(prefix)) {
        s = mult;
        break;
      }
    }
    lr_scale.push_back(s);
  }

  AdamState adam;
  Rng rng(mix_seed(tcfg.seed, 12));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  long step = 0;
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    EpochLog e;
    e.epoch = epoch;
    double ce_sum = 0, kl_sum = 0;
    for (std::size_t start = 0; start < n; start += tcfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(tcfg.batch_size, n - start));
      const Batch b = make_batch(train_set, idx);
      const auto out = model.forward(b.tokens, b.images);
      const LossTerms terms = model.loss_terms(out, b.targets, tcfg.lambda);
      const double ce = terms.ce.item();
      const double kl = terms.kl.defined() ? terms.kl.item() : 0.0;
      if (!std::isfinite(ce) || !std::isfinite(kl) || !std::isfinite(terms.total.item())) {
        const std::string term = !std::isfinite(ce) ? (!std::isfinite(kl) ? "CE and KL" : "CE")
                                                    : (!std::isfinite(kl) ? "KL" : "total");
        throw NumericError("non-finite training loss at step " + std::to_string(step) + " (term: " + term + ")", step,
                           term);
      }
      params.zero_grad();
      backward(terms.total);
      e.lr = lr_at(step, scfg);
      adam_step(params, adam, e.lr, update, lr_scale);
      ++step;
      ce_sum += ce * static_cast<double>(idx.size());
      kl_sum += kl;
    }
    e.step = step;
    e.loss_ce = ce_sum / static_cast<double>(n);
    if (has_gate(model.config())) e.loss_kl = kl_sum / static_cast<double>(n);
    if (!val_set.empty()) {
      const PredictionSet p = predict(model, val_set);
      ValidationMetrics v;
      const auto f = f1_suite(p, tcfg.threshold);
      v.micro_f1 = f.micro;
      v.macro_f1 = f.macro;
      std::size_t positives = 0;
      for (double t : p.targets.data()) positives += t == 1.0;
      v.r_at_p95 = positives ? recall_at_precision(p, 0.95).recall : 0.0;
      if (p.attention) v.collapse_fraction = attention_report(p).collapse_fraction;
      e.val = v;
    }
    log.epochs.push_back(e);
  }
  return log;
}

}  // namespace modfuse

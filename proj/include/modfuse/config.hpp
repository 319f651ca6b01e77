// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration shared by every subcommand: generator, model,
// training and evaluation settings, read from `key = value` files and
// overridable key by key.
#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "modfuse/datagen.hpp"
#include "modfuse/fusion.hpp"
#include "modfuse/metrics.hpp"
#include "modfuse/optim.hpp"

namespace modfuse {

// ---------------------------------------------------------------------------
// Enum names
// ---------------------------------------------------------------------------

namespace detail {

template <class E>
struct EnumName {
  E value;
  const char* name;
};

template <class E, std::size_t N>
std::string enum_to_string(E v, const EnumName<E> (&table)[N]) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <class E, std::size_t N>
E enum_from_string(const std::string& s, const EnumName<E> (&table)[N], const char* what) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  std::string allowed;
  for (const auto& e : table) allowed += (allowed.empty() ? "" : ", ") + std::string(e.name);
  throw ValidationError(std::string("unknown ") + what + " '" + s + "' (expected one of: " + allowed + ")");
}

inline constexpr EnumName<Pooling> kPooling[] = {{Pooling::sum, "sum"}, {Pooling::mean, "mean"}, {Pooling::cls, "cls"}};
inline constexpr EnumName<Activation> kActivation[] = {{Activation::relu, "relu"}, {Activation::tanh, "tanh"}};
inline constexpr EnumName<MergerKind> kMerger[] = {{MergerKind::concat, "concat"},
                                                   {MergerKind::modality_attention, "attention"}};
inline constexpr EnumName<GateKind> kGate[] = {{GateKind::sigmoid, "sigmoid"}, {GateKind::softmax, "softmax"}};
inline constexpr EnumName<Objective> kObjective[] = {{Objective::multilabel_sigmoid, "multilabel"},
                                                     {Objective::multiclass_softmax, "multiclass"}};
inline constexpr EnumName<Modalities> kModalities[] = {
    {Modalities::text, "text"}, {Modalities::image, "image"}, {Modalities::both, "both"}};
inline constexpr EnumName<WinRule> kWinRule[] = {{WinRule::exact_match, "exact"}, {WinRule::per_label, "per_label"}};

}  // namespace detail

inline std::string to_string(Pooling v) { return detail::enum_to_string(v, detail::kPooling); }
inline std::string to_string(Activation v) { return detail::enum_to_string(v, detail::kActivation); }
inline std::string to_string(MergerKind v) { return detail::enum_to_string(v, detail::kMerger); }
inline std::string to_string(GateKind v) { return detail::enum_to_string(v, detail::kGate); }
inline std::string to_string(Objective v) { return detail::enum_to_string(v, detail::kObjective); }
inline std::string to_string(Modalities v) { return detail::enum_to_string(v, detail::kModalities); }
inline std::string to_string(WinRule v) { return detail::enum_to_string(v, detail::kWinRule); }

// ---------------------------------------------------------------------------
// Value parsing
// ---------------------------------------------------------------------------

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& s, const std::string& key) {
  double v = 0;
  if (!detail::parse_number(std::string_view(s), v) || !std::isfinite(v)) {
    throw ValidationError("'" + key + "': expected a number, got '" + s + "'");
  }
  return v;
}

inline std::uint64_t parse_uint(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  if (!detail::parse_number(std::string_view(s), v)) {
    throw ValidationError("'" + key + "': expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw ValidationError("'" + key + "': expected a boolean, got '" + s + "'");
}

/// Comma-separated numbers. "none" or an empty string is the empty list.
inline std::vector<double> parse_double_list(const std::string& s, const std::string& key) {
  std::vector<double> out;
  if (s.empty() || s == "none") return out;
  for (auto part : detail::split_view(s, ',')) out.push_back(parse_double(trim(part), key));
  return out;
}

inline std::string join(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out.empty() ? "none" : out;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  GenConfig gen;
  // Model shape; input sizes come from the data.
  Modalities modalities = Modalities::both;
  std::size_t embed_dim = 16;
  Pooling pooling = Pooling::sum;
  std::vector<double> image_hidden{32};
  std::size_t image_output_dim = 16;
  Activation activation = Activation::relu;
  MergerKind merger = MergerKind::modality_attention;
  GateKind gate = GateKind::sigmoid;
  bool normalize = true;
  bool norm_affine = true;
  TrainConfig train = [] {
    TrainConfig t;
    t.seed = 1;  // equals `seed` below until overridden
    return t;
  }();
  ScheduleConfig schedule;
  std::vector<double> split_fractions{0.8, 0.1, 0.1};
  EvalOptions eval;
  WinRule win_rule = WinRule::exact_match;
  std::vector<double> grid{0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1};
  /// Seeds data generation, splitting, model initialization and training.
  std::uint64_t seed = 1;
};

/// Every recognised key with a one-line description, in documentation order.
inline const std::vector<std::pair<std::string, std::string>>& config_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"seed", "seed for generation, splitting, initialization and training"},
      {"n_samples", "records to generate"},
      {"num_labels", "number of labels"},
      {"label_prevalence", "per-label positive rate (one value or one per label)"},
      {"rho_txt", "probability that a record's text carries label tokens"},
      {"rho_img", "probability that a record's image carries label prototypes"},
      {"vocab_size", "token vocabulary size (id 0 reserved)"},
      {"tokens_per_label", "indicative tokens owned by each label"},
      {"noise_tokens", "mean noise tokens per record"},
      {"image_dim", "image feature dimension"},
      {"prototype_scale", "norm scale of label prototypes"},
      {"noise_sigma", "std of Gaussian image noise"},
      {"multiclass", "exactly one label per record, softmax objective"},
      {"modalities", "text, image or both"},
      {"embed_dim", "text embedding width"},
      {"pooling", "text pooling: sum, mean or cls"},
      {"image_hidden", "image encoder hidden widths, comma separated or none"},
      {"image_output_dim", "image encoder output width"},
      {"activation", "image encoder activation: relu or tanh"},
      {"merger", "attention or concat"},
      {"gate", "sigmoid or softmax"},
      {"normalize", "per-modality LayerNorm before merging"},
      {"norm_affine", "learnable LayerNorm gain and bias"},
      {"lambda", "weight of the KL-to-uniform gate penalty"},
      {"batch_size", "minibatch size"},
      {"epochs", "training epochs"},
      {"max_lr", "peak learning rate"},
      {"min_lr", "final learning rate"},
      {"warmup_fraction", "share of steps spent in linear warmup"},
      {"freeze_encoders", "keep encoder parameters fixed"},
      {"val_fraction", "share of training data held out for per-epoch validation"},
      {"split_fractions", "train,val,test fractions for split and sweep"},
      {"threshold", "decision threshold for F1"},
      {"precision_target", "precision floor for recall-at-precision"},
      {"collapse_cutoff", "minimum gate weight below which a sample counts as collapsed"},
      {"win_rule", "per-sample modality comparison: exact or per_label"},
      {"grid", "lambda values for sweep, comma separated"},
  };
  return keys;
}

inline bool is_config_key(const std::string& key) {
  for (const auto& [k, _] : config_keys())
    if (k == key) return true;
  return false;
}

/// Applies one setting. Throws ValidationError for unknown keys or bad values.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  auto u = [&] { return parse_uint(value, key); };
  auto d = [&] { return parse_double(value, key); };
  auto b = [&] { return parse_bool(value, key); };
  if (key == "seed") {
    c.seed = u();
    c.gen.seed = c.seed;
    c.train.seed = c.seed;
  } else if (key == "n_samples") c.gen.n_samples = u();
  else if (key == "num_labels") c.gen.num_labels = u();
  else if (key == "label_prevalence") c.gen.label_prevalence = parse_double_list(value, key);
  else if (key == "rho_txt") c.gen.rho_txt = d();
  else if (key == "rho_img") c.gen.rho_img = d();
  else if (key == "vocab_size") c.gen.vocab_size = u();
  else if (key == "tokens_per_label") c.gen.tokens_per_label = u();
  else if (key == "noise_tokens") c.gen.noise_tokens = u();
  else if (key == "image_dim") c.gen.image_dim = u();
  else if (key == "prototype_scale") c.gen.prototype_scale = d();
  else if (key == "noise_sigma") c.gen.noise_sigma = d();
  else if (key == "multiclass") c.gen.multiclass = c.eval.multiclass = b();
  else if (key == "modalities") c.modalities = detail::enum_from_string(value, detail::kModalities, "modalities");
  else if (key == "embed_dim") c.embed_dim = u();
  else if (key == "pooling") c.pooling = detail::enum_from_string(value, detail::kPooling, "pooling");
  else if (key == "image_hidden") c.image_hidden = parse_double_list(value, key);
  else if (key == "image_output_dim") c.image_output_dim = u();
  else if (key == "activation") c.activation = detail::enum_from_string(value, detail::kActivation, "activation");
  else if (key == "merger") c.merger = detail::enum_from_string(value, detail::kMerger, "merger");
  else if (key == "gate") c.gate = detail::enum_from_string(value, detail::kGate, "gate");
  else if (key == "normalize") c.normalize = b();
  else if (key == "norm_affine") c.norm_affine = b();
  else if (key == "lambda") c.train.lambda = d();
  else if (key == "batch_size") c.train.batch_size = u();
  else if (key == "epochs") c.train.epochs = u();
  else if (key == "max_lr") c.schedule.max_lr = d();
  else if (key == "min_lr") c.schedule.min_lr = d();
  else if (key == "warmup_fraction") c.schedule.warmup_fraction = d();
  else if (key == "freeze_encoders") c.train.freeze_encoders = b();
  else if (key == "val_fraction") c.train.val_fraction = d();
  else if (key == "split_fractions") c.split_fractions = parse_double_list(value, key);
  else if (key == "threshold") c.train.threshold = c.eval.threshold = d();
  else if (key == "precision_target") c.eval.precision_target = d();
  else if (key == "collapse_cutoff") c.eval.collapse_cutoff = d();
  else if (key == "win_rule") c.win_rule = detail::enum_from_string(value, detail::kWinRule, "win_rule");
  else if (key == "grid") c.grid = parse_double_list(value, key);
  else throw ValidationError("unknown setting '" + key + "'");
}

/// Reads `key = value` lines. Blank lines and lines starting with '#' are
/// skipped; errors carry the source and line number.
inline void apply_config_stream(ExperimentConfig& c, std::istream& is, const std::string& source) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(source, line_no, t, "expected 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    try {
      apply_setting(c, key, value);
    } catch (const ValidationError& e) {
      throw ParseError(source, line_no, key, e.what());
    }
  }
}

inline void apply_config_file(ExperimentConfig& c, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config '" + path + "'");
  apply_config_stream(c, is, path);
}

/// Model configuration for data with the given dimensions.
inline ModelConfig model_config(const ExperimentConfig& c, std::size_t vocab_size, std::size_t image_dim,
                                std::size_t num_labels) {
  ModelConfig m;
  m.modalities = c.modalities;
  m.text = {vocab_size, c.embed_dim, c.pooling};
  m.image.input_dim = image_dim;
  m.image.hidden_dims.clear();
  for (double h : c.image_hidden) {
    if (!(h >= 1.0) || h != std::floor(h)) throw ValidationError("image_hidden: widths must be positive integers");
    m.image.hidden_dims.push_back(static_cast<std::size_t>(h));
  }
  m.image.output_dim = c.image_output_dim;
  m.image.activation = c.activation;
  m.merger.kind = c.merger;
  m.merger.gate = c.gate;
  m.merger.normalize = c.normalize;
  m.merger.norm_affine = c.norm_affine;
  m.merger.lambda = c.train.lambda;
  m.num_labels = num_labels;
  m.objective = c.gen.multiclass ? Objective::multiclass_softmax : Objective::multilabel_sigmoid;
  return m;
}

/// Model configuration sized for `records`. The vocabulary is the configured
/// one, widened if the data holds larger token ids.
inline ModelConfig model_config(const ExperimentConfig& c, std::span<const Record> records) {
  if (records.empty()) throw ValidationError("no records to size the model from");
  std::size_t vocab = c.gen.vocab_size;
  for (const auto& r : records)
    for (int t : r.tokens) vocab = std::max(vocab, static_cast<std::size_t>(t) + 1);
  return model_config(c, vocab, records[0].image_features.size(), records[0].labels.size());
}

/// Seed stream for model initialization, distinct from data and training.
inline std::uint64_t init_seed(const ExperimentConfig& c) { return mix_seed(c.seed, 101); }

}  // namespace modfuse

// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multimodal records with per-sample modality informativeness,
// first-order iterative stratification for multilabel splits, and the
// line-delimited dataset file format.
//
// Token id layout: 0 is reserved ([CLS] slot), [1, 1 + L*tokens_per_label)
// holds the label-indicative tokens (label l owns a contiguous block of
// tokens_per_label ids) and the remainder of the vocabulary is noise.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "modfuse/error.hpp"
#include "modfuse/random.hpp"
#include "modfuse/tensor.hpp"

namespace modfuse {

struct Record {
  std::string id;
  std::vector<int> tokens;
  std::vector<double> image_features;
  std::vector<int> labels;  // 0/1 per label
  bool txt_informative = false;
  bool img_informative = false;

  bool operator==(const Record&) const = default;
};

struct GenConfig {
  std::size_t n_samples = 10000;
  std::size_t num_labels = 19;
  /// One entry per label, or a single entry applied to every label.
  std::vector<double> label_prevalence{0.15};
  double rho_txt = 0.8;
  double rho_img = 0.8;
  std::size_t vocab_size = 256;
  std::size_t tokens_per_label = 2;
  /// Mean noise-token count; each record draws uniformly from
  /// [noise_tokens/2, noise_tokens/2 + noise_tokens].
  std::size_t noise_tokens = 8;
  std::size_t image_dim = 32;
  double prototype_scale = 3.0;
  double noise_sigma = 1.0;
  /// Exactly one label per record, drawn proportionally to prevalence.
  bool multiclass = false;
  std::uint64_t seed = 1;

  double prevalence(std::size_t label) const {
    return label_prevalence.size() == 1 ? label_prevalence[0] : label_prevalence.at(label);
  }
  std::size_t first_noise_token() const { return 1 + num_labels * tokens_per_label; }
};

inline void validate(const GenConfig& c) {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string("generate: ") + name + " must lie in [0, 1]");
  };
  if (c.num_labels == 0) throw ValidationError("generate: num_labels must be positive");
  if (c.image_dim == 0) throw ValidationError("generate: image_dim must be positive");
  if (c.label_prevalence.size() != 1 && c.label_prevalence.size() != c.num_labels) {
    throw ValidationError("generate: label_prevalence needs 1 or " + std::to_string(c.num_labels) + " entries");
  }
  for (double p : c.label_prevalence) prob(p, "label_prevalence");
  prob(c.rho_txt, "rho_txt");
  prob(c.rho_img, "rho_img");
  if (c.vocab_size <= c.first_noise_token()) {
    throw ValidationError("generate: vocab_size " + std::to_string(c.vocab_size) + " leaves no noise tokens after " +
                          std::to_string(c.first_noise_token()) + " reserved and label-indicative ids");
  }
  if (!(c.noise_sigma >= 0.0) || !(c.prototype_scale >= 0.0)) {
    throw ValidationError("generate: noise_sigma and prototype_scale must be >= 0");
  }
}

/// Label prototypes in image-feature space, [L x image_dim]. Entries are
/// N(0, prototype_scale^2 / image_dim) so each prototype has norm close to
/// prototype_scale.
inline Tensor label_prototypes(const GenConfig& c) {
  Rng rng(mix_seed(c.seed, 0));
  Tensor protos({c.num_labels, c.image_dim});
  const double s = c.prototype_scale / std::sqrt(static_cast<double>(c.image_dim));
  for (auto& v : protos.storage()) v = s * rng.normal();
  return protos;
}

inline std::string record_id(std::size_t index) {
  std::string digits = std::to_string(index);
  return "s" + std::string(digits.size() < 7 ? 7 - digits.size() : 0, '0') + digits;
}

/// Record `index` of the dataset described by `c`. Each record has its own
/// stream derived from (seed, index), so records can be produced in any order.
inline Record generate_record(const GenConfig& c, const Tensor& prototypes, std::size_t index) {
  Rng rng(mix_seed(c.seed, index + 1));
  Record r;
  r.id = record_id(index);
  r.labels.assign(c.num_labels, 0);
  if (c.multiclass) {
    double total = 0;
    for (std::size_t l = 0; l < c.num_labels; ++l) total += c.prevalence(l);
    double u = rng.uniform() * total;
    std::size_t pick = c.num_labels - 1;
    for (std::size_t l = 0; l < c.num_labels; ++l) {
      if (u < c.prevalence(l)) {
        pick = l;
        break;
      }
      u -= c.prevalence(l);
    }
    r.labels[pick] = 1;
  } else {
    for (std::size_t l = 0; l < c.num_labels; ++l) r.labels[l] = rng.bernoulli(c.prevalence(l)) ? 1 : 0;
  }
  r.txt_informative = rng.bernoulli(c.rho_txt);
  r.img_informative = rng.bernoulli(c.rho_img);

  const std::size_t noise_lo = c.first_noise_token();
  const std::size_t noise_range = c.vocab_size - noise_lo;
  std::size_t n_noise = c.noise_tokens / 2 + rng.below(c.noise_tokens + 1);
  if (r.txt_informative) {
    for (std::size_t l = 0; l < c.num_labels; ++l) {
      if (!r.labels[l]) continue;
      for (std::size_t k = 0; k < c.tokens_per_label; ++k)
        r.tokens.push_back(static_cast<int>(1 + l * c.tokens_per_label + k));
    }
  }
  if (r.tokens.empty() && n_noise == 0) n_noise = 1;
  for (std::size_t k = 0; k < n_noise; ++k) r.tokens.push_back(static_cast<int>(noise_lo + rng.below(noise_range)));
  rng.shuffle(r.tokens.begin(), r.tokens.end());

  r.image_features.assign(c.image_dim, 0.0);
  for (std::size_t j = 0; j < c.image_dim; ++j) r.image_features[j] = c.noise_sigma * rng.normal();
  if (r.img_informative) {
    for (std::size_t l = 0; l < c.num_labels; ++l) {
      if (!r.labels[l]) continue;
      for (std::size_t j = 0; j < c.image_dim; ++j) r.image_features[j] += prototypes.at(l, j);
    }
  }
  return r;
}

inline std::vector<Record> generate(const GenConfig& c) {
  validate(c);
  const Tensor protos = label_prototypes(c);
  std::vector<Record> out;
  out.reserve(c.n_samples);
  for (std::size_t i = 0; i < c.n_samples; ++i) out.push_back(generate_record(c, protos, i));
  return out;
}

// ---------------------------------------------------------------------------
// Iterative stratification
// ---------------------------------------------------------------------------

struct SplitResult {
  std::vector<std::vector<Record>> parts;
  std::vector<std::string> warnings;
};

/// First-order iterative stratification for multilabel data. Repeatedly picks
/// the label with the fewest remaining positives and hands each of its
/// records to the split that still wants the most of that label; ties go to
/// the split with the most remaining capacity, then to a seeded draw.
/// Records without labels fill the remaining capacity last.
inline SplitResult stratified_split(std::span<const Record> records, std::span<const double> fractions,
                                    std::uint64_t seed) {
  if (fractions.empty()) throw ValidationError("stratified_split: no fractions given");
  double total = 0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ValidationError("stratified_split: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("stratified_split: fractions must sum to 1");

  const std::size_t k = fractions.size();
  const std::size_t n = records.size();
  const std::size_t n_labels = n ? records[0].labels.size() : 0;
  Rng rng(mix_seed(seed, 0x5157));
  SplitResult result;
  result.parts.resize(k);

  std::vector<double> want(k);
  for (std::size_t j = 0; j < k; ++j) want[j] = fractions[j] * static_cast<double>(n);
  std::vector<std::size_t> label_total(n_labels, 0);
  for (const auto& r : records) {
    if (r.labels.size() != n_labels) throw DimensionError("stratified_split: records disagree on label count");
    for (std::size_t l = 0; l < n_labels; ++l) label_total[l] += r.labels[l] ? 1 : 0;
  }
  std::vector<std::vector<double>> want_label(n_labels, std::vector<double>(k));
  for (std::size_t l = 0; l < n_labels; ++l) {
    for (std::size_t j = 0; j < k; ++j) want_label[l][j] = fractions[j] * static_cast<double>(label_total[l]);
    if (label_total[l] > 0 && label_total[l] < k) {
      result.warnings.push_back("label " + std::to_string(l) + " has " + std::to_string(label_total[l]) +
                                " positive(s) for " + std::to_string(k) + " splits; placement is best-effort");
    }
  }

  // Seeded visiting order makes the per-label record order the tie breaker of
  // last resort as well.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());

  std::vector<char> assigned(n, 0);
  std::vector<std::size_t> remaining(label_total);
  auto pick_split = [&](const std::vector<double>* label_want) {
    std::vector<std::size_t> best;
    for (std::size_t j = 0; j < k; ++j) {
      if (best.empty()) {
        best.push_back(j);
        continue;
      }
      const std::size_t b = best.front();
      const double lw = label_want ? (*label_want)[j] : 0.0;
      const double lb = label_want ? (*label_want)[b] : 0.0;
      if (lw > lb || (lw == lb && want[j] > want[b])) {
        best.assign(1, j);
      } else if (lw == lb && want[j] == want[b]) {
        best.push_back(j);
      }
    }
    return best.size() == 1 ? best[0] : best[rng.below(best.size())];
  };
  auto assign = [&](std::size_t idx, std::size_t split) {
    assigned[idx] = 1;
    want[split] -= 1.0;
    const auto& labels = records[idx].labels;
    for (std::size_t l = 0; l < n_labels; ++l) {
      if (!labels[l]) continue;
      want_label[l][split] -= 1.0;
      --remaining[l];
    }
    result.parts[split].push_back(records[idx]);
  };

  while (true) {
    std::optional<std::size_t> rarest;
    for (std::size_t l = 0; l < n_labels; ++l) {
      if (remaining[l] == 0) continue;
      if (!rarest || remaining[l] < remaining[*rarest]) rarest = l;
    }
    if (!rarest) break;
    const std::size_t l = *rarest;
    for (std::size_t idx : order) {
      if (assigned[idx] || !records[idx].labels[l]) continue;
      assign(idx, pick_split(&want_label[l]));
    }
  }
  for (std::size_t idx : order)
    if (!assigned[idx]) assign(idx, pick_split(nullptr));
  return result;
}

// ---------------------------------------------------------------------------
// Dataset file format
// ---------------------------------------------------------------------------
//
//   # modfuse-dataset v1 labels=<L> image_dim=<D>
//   <id> TAB <tokens> TAB <image_features> TAB <labels> TAB <txt_inf> TAB <img_inf> LF
//
// tokens and image_features are space separated; features use the shortest
// decimal form that round-trips exactly. labels is a string of L '0'/'1'
// characters; the informativeness flags are '0' or '1'. Every line, the last
// included, ends with LF.

inline constexpr std::string_view kDatasetMagic = "# modfuse-dataset v1";

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_dataset(std::ostream& os, std::span<const Record> records) {
  const std::size_t labels = records.empty() ? 0 : records[0].labels.size();
  const std::size_t dim = records.empty() ? 0 : records[0].image_features.size();
  os << kDatasetMagic << " labels=" << labels << " image_dim=" << dim << '\n';
  std::string line;
  for (const auto& r : records) {
    if (r.labels.size() != labels || r.image_features.size() != dim) {
      throw DimensionError("write_dataset: record " + r.id + " has inconsistent dimensions");
    }
    if (r.id.empty() || r.id.find_first_of("\t\n ") != std::string::npos) {
      throw ValidationError("write_dataset: record id '" + r.id + "' must be non-empty without whitespace");
    }
    line = r.id;
    line += '\t';
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      if (i) line += ' ';
      line += std::to_string(r.tokens[i]);
    }
    line += '\t';
    for (std::size_t i = 0; i < r.image_features.size(); ++i) {
      if (i) line += ' ';
      line += format_double(r.image_features[i]);
    }
    line += '\t';
    for (int b : r.labels) line += b ? '1' : '0';
    line += '\t';
    line += r.txt_informative ? '1' : '0';
    line += '\t';
    line += r.img_informative ? '1' : '0';
    line += '\n';
    os << line;
  }
}

inline void write_dataset(const std::string& path, std::span<const Record> records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_dataset(os, records);
  if (!os) throw Error("write to '" + path + "' failed");
}

namespace detail {

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

}  // namespace detail

inline std::vector<Record> read_dataset(std::istream& is, const std::string& source = "<dataset>") {
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::vector<Record> out;
  std::size_t line_no = 0;
  std::size_t labels = 0, dim = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    ++line_no;
    const auto nl = content.find('\n', pos);
    if (nl == std::string::npos) {
      throw ParseError(source, line_no, line_no == 1 ? "header" : "record", "truncated line (no terminating newline)");
    }
    const std::string_view line(content.data() + pos, nl - pos);
    pos = nl + 1;
    if (line_no == 1) {
      if (!line.starts_with(kDatasetMagic)) throw ParseError(source, 1, "header", "missing '" + std::string(kDatasetMagic) + "'");
      for (auto tok : detail::split_view(line.substr(kDatasetMagic.size()), ' ')) {
        if (tok.starts_with("labels=")) {
          if (!detail::parse_number(tok.substr(7), labels)) throw ParseError(source, 1, "header", "bad labels=");
        } else if (tok.starts_with("image_dim=")) {
          if (!detail::parse_number(tok.substr(10), dim)) throw ParseError(source, 1, "header", "bad image_dim=");
        }
      }
      continue;
    }
    static constexpr const char* kFields[] = {"id", "tokens", "image_features", "labels", "txt_informative",
                                              "img_informative"};
    const auto fields = detail::split_view(line, '\t');
    if (fields.size() < 6) throw ParseError(source, line_no, kFields[fields.size()], "missing field");
    if (fields.size() > 6) throw ParseError(source, line_no, "img_informative", "unexpected trailing fields");
    Record r;
    if (fields[0].empty()) throw ParseError(source, line_no, "id", "empty id");
    r.id = std::string(fields[0]);
    for (auto t : detail::split_view(fields[1], ' ')) {
      int v = 0;
      if (!detail::parse_number(t, v) || v < 0) throw ParseError(source, line_no, "tokens", "bad token '" + std::string(t) + "'");
      r.tokens.push_back(v);
    }
    if (dim > 0) {
      for (auto t : detail::split_view(fields[2], ' ')) {
        double v = 0;
        if (!detail::parse_number(t, v)) throw ParseError(source, line_no, "image_features", "bad value '" + std::string(t) + "'");
        r.image_features.push_back(v);
      }
    }
    if (r.image_features.size() != dim) {
      throw ParseError(source, line_no, "image_features",
                       "expected " + std::to_string(dim) + " values, got " + std::to_string(r.image_features.size()));
    }
    if (fields[3].size() != labels) {
      throw ParseError(source, line_no, "labels",
                       "expected " + std::to_string(labels) + " flags, got " + std::to_string(fields[3].size()));
    }
    for (char ch : fields[3]) {
      if (ch != '0' && ch != '1') throw ParseError(source, line_no, "labels", "flags must be 0 or 1");
      r.labels.push_back(ch == '1');
    }
    auto flag = [&](std::string_view f, const char* name) {
      if (f != "0" && f != "1") throw ParseError(source, line_no, name, "expected 0 or 1");
      return f == "1";
    };
    r.txt_informative = flag(fields[4], "txt_informative");
    r.img_informative = flag(fields[5], "img_informative");
    out.push_back(std::move(r));
  }
  if (line_no == 0) throw ParseError(source, 1, "header", "empty file");
  return out;
}

inline std::vector<Record> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "' for reading");
  return read_dataset(is, path);
}

// ---------------------------------------------------------------------------
// Batching helpers
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<std::vector<int>> tokens;
  Tensor images;   // [batch x image_dim]
  Tensor targets;  // [batch x L]
};

inline Batch make_batch(std::span<const Record> records, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ValidationError("make_batch: empty batch");
  const auto& first = records[indices[0]];
  const std::size_t dim = first.image_features.size(), labels = first.labels.size();
  if (dim == 0 || labels == 0) throw DimensionError("make_batch: records need image features and labels");
  Batch b{{}, Tensor({indices.size(), dim}), Tensor({indices.size(), labels})};
  b.tokens.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& r = records[indices[i]];
    if (r.image_features.size() != dim || r.labels.size() != labels) {
      throw DimensionError("make_batch: record " + r.id + " has inconsistent dimensions");
    }
    b.tokens.push_back(r.tokens);
    std::copy(r.image_features.begin(), r.image_features.end(), &b.images.at(i, 0));
    for (std::size_t l = 0; l < labels; ++l) b.targets.at(i, l) = r.labels[l];
  }
  return b;
}

}  // namespace modfuse

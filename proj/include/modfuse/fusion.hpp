// SPDX-License-Identifier: Apache-2.0
//
// Late fusion of text and image representations.
//
// The modality-attention merger scores each sample's modalities with a
// shallow linear gate over the concatenated features,
//
//   z     = [x_txt, x_img] * W_g + b_g
//   p_txt = sigmoid(z),  p_img = 1 - p_txt        (two modalities)
//   p     = softmax(z)                            (softmax gate, any count)
//
// and feeds [p_txt * x_txt, p_img * x_img] to a linear classifier. The
// training objective adds lambda * sum_j KL(p_j || uniform) to the
// cross-entropy, which penalises gates that put all their mass on one
// modality.
#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modfuse/autodiff.hpp"
#include "modfuse/encoders.hpp"
#include "modfuse/random.hpp"

namespace modfuse {

enum class MergerKind { concat, modality_attention };
enum class GateKind { sigmoid, softmax };
enum class Objective { multilabel_sigmoid, multiclass_softmax };
enum class Modalities { text, image, both };

struct MergerConfig {
  MergerKind kind = MergerKind::modality_attention;
  GateKind gate = GateKind::sigmoid;
  bool normalize = true;     // LayerNorm on each modality before gating/merging
  bool norm_affine = true;   // learnable gamma/beta in those LayerNorms
  double lambda = 0.0;       // KL-to-uniform weight
};

inline void validate(const MergerConfig& c) {
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw ValidationError("merger: lambda must be a finite value >= 0");
}

/// Per-sample encoded modalities, [batch x H] and [batch x D].
struct ModalityFeatures {
  Var text;
  Var image;
};

/// Gate output, [batch x M] with column 0 = text and column 1 = image. Rows lie
/// on the probability simplex.
struct AttentionWeights {
  Var weights;

  Var p_txt() const { return column(weights, 0); }
  Var p_img() const { return column(weights, 1); }
  std::size_t batch() const { return weights.value().rows(); }
};

inline std::size_t gate_outputs(GateKind g) { return g == GateKind::sigmoid ? 1 : 2; }

/// Modality importance weights from a linear gate. `w_gate` is
/// [(H+D) x 1] for the sigmoid gate or [(H+D) x 2] for the softmax gate; the
/// bias has one entry per gate output.
inline AttentionWeights gate(const ModalityFeatures& feats, const Var& w_gate, const Var& b_gate, GateKind kind) {
  const Var joint = concat(feats.text, feats.image);
  const std::size_t in = joint.value().cols();
  const std::size_t outs = gate_outputs(kind);
  if (w_gate.value().rank() != 2 || w_gate.value().rows() != in || w_gate.value().cols() != outs ||
      b_gate.value().numel() != outs) {
    throw DimensionError("gate: expected weight [" + std::to_string(in) + "x" + std::to_string(outs) + "] and bias [" +
                         std::to_string(outs) + "], got " + shape_str(w_gate.shape()) + " and " +
                         shape_str(b_gate.shape()));
  }
  const Var rows = joint.value().rank() == 2 ? joint : reshape(joint, {1, in});
  const Var logits = add(matmul(rows, w_gate), b_gate);
  if (kind == GateKind::softmax) return {softmax(logits)};
  const Var p_txt = sigmoid(logits);
  return {concat(p_txt, one_minus(p_txt))};
}

/// Classifier input. Concat ignores `p`; modality attention scales each
/// modality block by its weight.
inline Var merge(const ModalityFeatures& feats, const AttentionWeights* p, MergerKind kind) {
  if (kind == MergerKind::concat) return concat(feats.text, feats.image);
  if (p == nullptr || !p->weights.defined()) throw ContractError("merge: modality attention requires gate weights");
  if (p->batch() != feats.text.value().rows()) {
    throw DimensionError("merge: gate batch " + std::to_string(p->batch()) + " != feature batch " +
                         std::to_string(feats.text.value().rows()));
  }
  return concat(scale(feats.text, p->p_txt()), scale(feats.image, p->p_img()));
}

/// Linear classifier without hidden layers: o = act(x W + b).
struct ClassifierHead {
  Var weight;  // [F x L]
  Var bias;    // [L]
  Objective objective = Objective::multilabel_sigmoid;
};

inline Var classify(const Var& fused, const ClassifierHead& head) {
  if (fused.value().cols() != head.weight.value().rows()) {
    throw DimensionError("classify: input width " + std::to_string(fused.value().cols()) + " != head input " +
                         std::to_string(head.weight.value().rows()));
  }
  const Var logits = add(matmul(fused, head.weight), head.bias);
  return head.objective == Objective::multilabel_sigmoid ? sigmoid(logits) : softmax(logits);
}

inline Var kl_to_uniform(const AttentionWeights& p) { return kl_to_uniform(p.weights); }

inline Var cross_entropy(const Var& probs, const Tensor& targets, Objective objective) {
  return objective == Objective::multilabel_sigmoid ? bce_loss(probs, targets) : ce_loss(probs, targets);
}

struct LossTerms {
  Var total;
  Var ce;
  Var kl;  // undefined without a gate
};

/// L_CE + lambda * sum_j KL(p_j || uniform). The KL term is summed, not
/// averaged, over the batch. It is evaluated whenever a gate is present so it
/// can be logged, but with lambda == 0 the total is the CE node itself.
inline LossTerms regularized_loss_terms(const Var& probs, const Tensor& targets, const AttentionWeights* p,
                                        double lambda, Objective objective = Objective::multilabel_sigmoid) {
  if (!(lambda >= 0.0)) throw ValidationError("regularized_loss: lambda must be >= 0");
  LossTerms t;
  t.ce = cross_entropy(probs, targets, objective);
  t.total = t.ce;
  if (p == nullptr || !p->weights.defined()) return t;
  if (p->batch() != probs.value().rows()) {
    throw DimensionError("regularized_loss: " + std::to_string(p->batch()) + " attention rows for a batch of " +
                         std::to_string(probs.value().rows()));
  }
  t.kl = kl_to_uniform(*p);
  if (lambda != 0.0) t.total = add(t.ce, scale(t.kl, lambda));
  return t;
}

inline Var regularized_loss(const Var& probs, const Tensor& targets, const AttentionWeights* p, double lambda,
                            Objective objective = Objective::multilabel_sigmoid) {
  return regularized_loss_terms(probs, targets, p, lambda, objective).total;
}

/// |KL(p || uniform) - (ln M - H(p))| for a point on the simplex. Both sides
/// are computed independently; the result is pure rounding error.
inline double entropy_identity_check(std::span<const double> p) {
  const double m = static_cast<double>(p.size());
  const double log_q = std::log(1.0 / m);
  double kl = 0.0, entropy = 0.0;
  for (double v : p) {
    if (v <= 0.0) continue;
    kl += v * (std::log(v) - log_q);
    entropy -= v * std::log(v);
  }
  return std::abs(kl - (std::log(m) - entropy));
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

struct ModelConfig {
  Modalities modalities = Modalities::both;
  TextEncoderConfig text;
  ImageEncoderConfig image;
  MergerConfig merger;
  std::size_t num_labels = 8;
  Objective objective = Objective::multilabel_sigmoid;
};

inline bool uses_text(const ModelConfig& c) { return c.modalities != Modalities::image; }
inline bool uses_image(const ModelConfig& c) { return c.modalities != Modalities::text; }
/// The gate takes part in the forward pass.
inline bool has_gate(const ModelConfig& c) {
  return c.modalities == Modalities::both && c.merger.kind == MergerKind::modality_attention;
}
/// Gate parameters exist. Concat models allocate them too but never read
/// them, so both merger kinds share one parameter layout.
inline bool has_gate_params(const ModelConfig& c) { return c.modalities == Modalities::both; }

/// Encoders, optional per-modality LayerNorm, merger and classifier head.
/// Unimodal configurations skip the merger and classify the single
/// (optionally normalized) representation directly.
class FusionModel {
 public:
  struct Output {
    Var probs;
    std::optional<AttentionWeights> attention;
  };

  FusionModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    validate(cfg_.merger);
    if (cfg_.num_labels == 0) throw ValidationError("model: num_labels must be positive");
    Rng rng(seed);
    std::size_t fused = 0;
    if (uses_text(cfg_)) {
      text_ = TextEncoder(cfg_.text, params_, rng);
      fused += cfg_.text.embed_dim;
    }
    if (uses_image(cfg_)) {
      image_ = ImageEncoder(cfg_.image, params_, rng);
      fused += cfg_.image.output_dim;
    }
    if (cfg_.merger.normalize && cfg_.merger.norm_affine) {
      if (uses_text(cfg_)) {
        txt_gamma_ = params_.add("norm_txt.gamma", Tensor({cfg_.text.embed_dim}, 1.0));
        txt_beta_ = params_.add("norm_txt.beta", Tensor({cfg_.text.embed_dim}));
      }
      if (uses_image(cfg_)) {
        img_gamma_ = params_.add("norm_img.gamma", Tensor({cfg_.image.output_dim}, 1.0));
        img_beta_ = params_.add("norm_img.beta", Tensor({cfg_.image.output_dim}));
      }
    }
    if (has_gate_params(cfg_)) {
      const std::size_t outs = gate_outputs(cfg_.merger.gate);
      gate_w_ = params_.add("merger.W", glorot_uniform(fused, outs, rng));
      gate_b_ = params_.add("merger.b", Tensor({outs}));
    }
    head_.weight = params_.add("head.W", glorot_uniform(fused, cfg_.num_labels, rng));
    head_.bias = params_.add("head.b", Tensor({cfg_.num_labels}));
    head_.objective = cfg_.objective;
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }
  const ClassifierHead& head() const { return head_; }
  const Var& gate_weight() const { return gate_w_; }
  const Var& gate_bias() const { return gate_b_; }

  /// Encoded (and normalized, if configured) modality features. Absent
  /// modalities are left undefined.
  ModalityFeatures features(std::span<const std::vector<int>> tokens, const Tensor& images) const {
    ModalityFeatures f;
    if (uses_text(cfg_)) {
      f.text = text_.encode(tokens);
      if (cfg_.merger.normalize) f.text = layernorm(f.text, txt_gamma_, txt_beta_);
    }
    if (uses_image(cfg_)) {
      f.image = image_.encode(images);
      if (cfg_.merger.normalize) f.image = layernorm(f.image, img_gamma_, img_beta_);
    }
    return f;
  }

  Output forward(std::span<const std::vector<int>> tokens, const Tensor& images) const {
    const ModalityFeatures f = features(tokens, images);
    Output out;
    Var fused;
    switch (cfg_.modalities) {
      case Modalities::text: fused = f.text; break;
      case Modalities::image: fused = f.image; break;
      case Modalities::both:
        if (has_gate(cfg_)) {
          out.attention = gate(f, gate_w_, gate_b_, cfg_.merger.gate);
          fused = merge(f, &*out.attention, MergerKind::modality_attention);
        } else {
          fused = merge(f, nullptr, MergerKind::concat);
        }
        break;
    }
    out.probs = classify(fused, head_);
    return out;
  }

  Var loss(const Output& out, const Tensor& targets, double lambda) const { return loss_terms(out, targets, lambda).total; }

  LossTerms loss_terms(const Output& out, const Tensor& targets, double lambda) const {
    return regularized_loss_terms(out.probs, targets, out.attention ? &*out.attention : nullptr, lambda,
                                  cfg_.objective);
  }

 private:
  ModelConfig cfg_;
  ParameterList params_;
  TextEncoder text_;
  ImageEncoder image_;
  Var txt_gamma_, txt_beta_, img_gamma_, img_beta_;
  Var gate_w_, gate_b_;
  ClassifierHead head_;
};

}  // namespace modfuse

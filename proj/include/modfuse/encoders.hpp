// SPDX-License-Identifier: Apache-2.0
//
// Toy modality encoders: a pooled token-embedding text encoder and an MLP over
// precomputed image feature vectors. Both register their weights in a shared
// ParameterList under a name prefix.
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "modfuse/autodiff.hpp"
#include "modfuse/random.hpp"

namespace modfuse {

enum class Activation { relu, tanh };

struct TextEncoderConfig {
  std::size_t vocab_size = 256;
  std::size_t embed_dim = 16;  // H
  Pooling pooling = Pooling::sum;
};

struct ImageEncoderConfig {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden_dims{32};
  std::size_t output_dim = 16;  // D
  Activation activation = Activation::relu;
};

inline void validate(const TextEncoderConfig& c) {
  if (c.vocab_size == 0 || c.embed_dim == 0) throw ValidationError("text encoder: vocab_size and embed_dim must be positive");
}

inline void validate(const ImageEncoderConfig& c) {
  if (c.input_dim == 0 || c.output_dim == 0) throw ValidationError("image encoder: input_dim and output_dim must be positive");
  for (auto h : c.hidden_dims)
    if (h == 0) throw ValidationError("image encoder: hidden dims must be positive");
}

/// Glorot-uniform matrix [fan_in x fan_out].
inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (auto& v : t.storage()) v = rng.uniform(-limit, limit);
  return t;
}

class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const TextEncoderConfig& cfg, ParameterList& params, Rng& rng, const std::string& prefix = "text_encoder")
      : cfg_(cfg) {
    validate(cfg);
    Tensor table({cfg.vocab_size, cfg.embed_dim});
    for (auto& v : table.storage()) v = rng.uniform(-0.1, 0.1);
    embedding_ = params.add(prefix + ".embedding", std::move(table));
  }

  const TextEncoderConfig& config() const { return cfg_; }
  const Var& embedding() const { return embedding_; }

  /// [batch x H] pooled representations.
  Var encode(std::span<const std::vector<int>> sequences) const {
    return embedding_bag(embedding_, sequences, cfg_.pooling);
  }

  /// Single sequence, returned as [1 x H].
  Var encode(const std::vector<int>& tokens) const { return encode(std::span<const std::vector<int>>(&tokens, 1)); }

 private:
  TextEncoderConfig cfg_;
  Var embedding_;
};

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ImageEncoderConfig& cfg, ParameterList& params, Rng& rng,
               const std::string& prefix = "image_encoder")
      : cfg_(cfg) {
    validate(cfg);
    std::size_t in = cfg.input_dim;
    std::vector<std::size_t> dims = cfg.hidden_dims;
    dims.push_back(cfg.output_dim);
    for (std::size_t l = 0; l < dims.size(); ++l) {
      const std::string base = prefix + ".layer" + std::to_string(l);
      weights_.push_back(params.add(base + ".W", glorot_uniform(in, dims[l], rng)));
      biases_.push_back(params.add(base + ".b", Tensor({dims[l]})));
      in = dims[l];
    }
  }

  const ImageEncoderConfig& config() const { return cfg_; }
  const std::vector<Var>& weights() const { return weights_; }
  const std::vector<Var>& biases() const { return biases_; }

  /// Features [batch x input_dim] (or [input_dim]) to [batch x D]. The last
  /// layer is linear.
  Var encode(const Tensor& features) const {
    if (features.cols() != cfg_.input_dim) {
      throw DimensionError("encode_image: feature length " + std::to_string(features.cols()) + " != input_dim " +
                           std::to_string(cfg_.input_dim));
    }
    for (double v : features.data())
      if (!std::isfinite(v)) throw ValidationError("encode_image: non-finite feature value");
    Tensor x = features;
    if (x.rank() == 1) x = Tensor({1, x.numel()}, x.storage());
    Var h(std::move(x));
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = add(matmul(h, weights_[l]), biases_[l]);
      if (l + 1 < weights_.size()) h = cfg_.activation == Activation::relu ? relu(h) : modfuse::tanh(h);
    }
    return h;
  }

 private:
  ImageEncoderConfig cfg_;
  std::vector<Var> weights_;
  std::vector<Var> biases_;
};

}  // namespace modfuse

// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode autodiff over dense Tensors. Every forward op
// allocates a Node holding its value, its gradient slot and a local backward
// rule; backward() walks the graph in reverse topological order.
//
// Conventions: activations are batch-major ([batch x features]) and linear
// maps are x * W with W shaped [in x out].
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "modfuse/error.hpp"
#include "modfuse/tensor.hpp"

namespace modfuse {

/// Producing operation of a node. Losses use it to reach the logits behind
/// sigmoid/softmax outputs.
enum class Op {
  leaf, reshape, matmul, add, mul, affine, scale, concat, column, sigmoid, softmax, relu, tanh,
  layernorm, sum, mean, bce, ce, kl_uniform, embedding_bag
};

/// Lower clamp for probabilities inside logarithms.
inline constexpr double kProbClamp = 1e-12;

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  Op op = Op::leaf;
};

}  // namespace detail

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->grad = Tensor(node_->value.shape());
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  Op op() const { return node_->op; }
  Var parent(std::size_t i) const { return Var(node_->parents.at(i)); }
  std::size_t num_parents() const { return node_->parents.size(); }
  double item() const { return node_->value.item(); }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.fill(0.0);
  }

  detail::Node* raw() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& ptr() const noexcept { return node_; }

  static Var from_result(Tensor value, Op op, std::vector<Var> parents,
                         std::function<void(detail::Node&)> backward) {
    Var out(std::make_shared<detail::Node>());
    auto& n = *out.node_;
    n.value = std::move(value);
    n.op = op;
    for (auto& p : parents) {
      n.requires_grad = n.requires_grad || p.requires_grad();
      n.parents.push_back(p.node_);
    }
    if (n.requires_grad) {
      n.grad = Tensor(n.value.shape());
      n.backward = std::move(backward);
    }
    return out;
  }

 private:
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// Same data, new shape (element count must match).
inline Var reshape(const Var& a, Shape shape) {
  Tensor out(std::move(shape), a.value().storage());
  return Var::from_result(std::move(out), Op::reshape, {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.numel(); ++i) pa.grad[i] += self.grad[i];
  });
}

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " +
                         shape_str(B.shape()));
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return Var::from_result(std::move(out), Op::matmul, {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const Tensor& g = self.grad;
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb.value[p * n + j];
          pa.grad[i * k + p] += acc;
        }
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa.value[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) pb.grad[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

/// Elementwise sum. `b` may also be a bias of shape [n] or [1 x n] broadcast
/// over the rows of an [m x n] `a`.
inline Var add(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const bool same = A.shape() == B.shape();
  const bool bias = !same && A.rank() == 2 && B.numel() == A.cols() &&
                    (B.rank() == 1 || (B.rank() == 2 && B.rows() == 1));
  if (!same && !bias) {
    throw DimensionError("add: incompatible shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  }
  Tensor out = A;
  const std::size_t n = B.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i % n];
  return Var::from_result(std::move(out), Op::add, {a, b}, [n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.numel(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.numel(); ++i) pb.grad[i % n] += self.grad[i];
  });
}

/// Elementwise product of equal shapes.
inline Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return Var::from_result(std::move(out), Op::mul, {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

/// alpha * a + beta with constant alpha, beta.
inline Var affine(const Var& a, double alpha, double beta) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = alpha * v + beta;
  return Var::from_result(std::move(out), Op::affine, {a}, [alpha](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.numel(); ++i) pa.grad[i] += alpha * self.grad[i];
  });
}

inline Var scale(const Var& a, double s) { return affine(a, s, 0.0); }

/// 1 - a, computed exactly as (1.0 - a[i]).
inline Var one_minus(const Var& a) { return affine(a, -1.0, 1.0); }

/// Multiplies `a` by a scalar node, or row-wise by a per-row factor of shape
/// [m] or [m x 1] when `a` is [m x n].
inline Var scale(const Var& a, const Var& s) {
  const Tensor& A = a.value();
  const Tensor& S = s.value();
  const std::size_t m = A.rows(), n = A.cols();
  const bool per_row = !S.is_scalar() && A.rank() == 2 && S.numel() == m &&
                       (S.rank() == 1 || (S.rank() == 2 && S.cols() == 1));
  if (!S.is_scalar() && !per_row) {
    throw DimensionError("scale: factor " + shape_str(S.shape()) + " incompatible with " + shape_str(A.shape()));
  }
  Tensor out = A;
  for (std::size_t i = 0; i < m; ++i) {
    const double f = per_row ? S[i] : S[0];
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= f;
  }
  return Var::from_result(std::move(out), Op::scale, {a, s}, [m, n, per_row](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i) {
      const double f = per_row ? ps.value[i] : ps.value[0];
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = i * n + j;
        if (pa.requires_grad) pa.grad[idx] += f * self.grad[idx];
        acc += self.grad[idx] * pa.value[idx];
      }
      if (ps.requires_grad) ps.grad[per_row ? i : 0] += acc;
    }
  });
}

/// Concatenation along the last (feature) axis. Inputs must agree on rank and
/// row count.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const std::size_t rank = parts[0].value().rank();
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != rank || p.value().rows() != m) {
      throw DimensionError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                           shape_str(p.shape()));
    }
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out(rank == 2 ? Shape{m, total} : Shape{total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& t = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&t[i * widths[k]], widths[k], &out[i * total + offset]);
    offset += widths[k];
  }
  return Var::from_result(std::move(out), Op::concat, {parts.begin(), parts.end()},
                          [m, total, widths](detail::Node& self) {
                            std::size_t off = 0;
                            for (std::size_t k = 0; k < widths.size(); ++k) {
                              auto& p = *self.parents[k];
                              if (p.requires_grad) {
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t j = 0; j < widths[k]; ++j)
                                    p.grad[i * widths[k] + j] += self.grad[i * total + off + j];
                              }
                              off += widths[k];
                            }
                          });
}

inline Var concat(const Var& a, const Var& b) {
  const Var parts[] = {a, b};
  return concat(std::span<const Var>(parts));
}

/// Column j of an [m x n] matrix as [m x 1] (or element j of a vector as [1]).
inline Var column(const Var& a, std::size_t j) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  if (j >= n) throw DimensionError("column: index " + std::to_string(j) + " out of range for " + shape_str(A.shape()));
  Tensor out(A.rank() == 2 ? Shape{m, 1} : Shape{1});
  for (std::size_t i = 0; i < m; ++i) out[i] = A[i * n + j];
  return Var::from_result(std::move(out), Op::column, {a}, [m, n, j](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i) pa.grad[i * n + j] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = detail::stable_sigmoid(v);
  return Var::from_result(std::move(out), Op::sigmoid, {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const double y = self.value[i];
      pa.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

/// Softmax over the last axis, max-subtracted.
inline Var softmax(const Var& a) {
  Tensor out = a.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out[i * n];
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= z;
  }
  return Var::from_result(std::move(out), Op::softmax, {a}, [m, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = i * n + j;
        pa.grad[idx] += self.value[idx] * (self.grad[idx] - dot);
      }
    }
  });
}

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return Var::from_result(std::move(out), Op::relu, {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      if (pa.value[i] > 0.0) pa.grad[i] += self.grad[i];
  });
}

inline Var tanh(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = std::tanh(v);
  return Var::from_result(std::move(out), Op::tanh, {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const double y = self.value[i];
      pa.grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer normalization with population variance. `gamma` and `beta`
/// ([f]) are optional; pass default-constructed Vars to skip the affine step.
inline Var layernorm(const Var& a, const Var& gamma, const Var& beta, double eps = kLayerNormEps) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), f = A.cols();
  const bool has_gamma = gamma.defined(), has_beta = beta.defined();
  if ((has_gamma && gamma.value().numel() != f) || (has_beta && beta.value().numel() != f)) {
    throw DimensionError("layernorm: affine parameters do not match feature size " + std::to_string(f));
  }
  Tensor xhat(A.shape());
  std::vector<double> inv_std(m);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &A[i * f];
    double mu = 0.0;
    for (std::size_t j = 0; j < f; ++j) mu += row[j];
    mu /= static_cast<double>(f);
    double var = 0.0;
    for (std::size_t j = 0; j < f; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(f);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < f; ++j) {
      const std::size_t idx = i * f + j;
      xhat[idx] = (row[j] - mu) * inv_std[i];
      out[idx] = xhat[idx] * (has_gamma ? gamma.value()[j] : 1.0) + (has_beta ? beta.value()[j] : 0.0);
    }
  }
  std::vector<Var> parents{a};
  if (has_gamma) parents.push_back(gamma);
  if (has_beta) parents.push_back(beta);
  return Var::from_result(
      std::move(out), Op::layernorm, std::move(parents),
      [m, f, has_gamma, has_beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::Node* pg = has_gamma ? self.parents[1].get() : nullptr;
        detail::Node* pb = has_beta ? self.parents[has_gamma ? 2 : 1].get() : nullptr;
        std::vector<double> dxhat(f);
        for (std::size_t i = 0; i < m; ++i) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t j = 0; j < f; ++j) {
            const std::size_t idx = i * f + j;
            const double g = self.grad[idx];
            if (pg && pg->requires_grad) pg->grad[j] += g * xhat[idx];
            if (pb && pb->requires_grad) pb->grad[j] += g;
            dxhat[j] = g * (pg ? pg->value[j] : 1.0);
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xhat[idx];
          }
          if (!pa.requires_grad) continue;
          const double inv_f = 1.0 / static_cast<double>(f);
          for (std::size_t j = 0; j < f; ++j) {
            const std::size_t idx = i * f + j;
            pa.grad[idx] += inv_std[i] * (dxhat[j] - inv_f * sum_d - xhat[idx] * inv_f * sum_dx);
          }
        }
      });
}

inline Var layernorm(const Var& a, double eps = kLayerNormEps) { return layernorm(a, Var{}, Var{}, eps); }

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return Var::from_result(Tensor::scalar(s), Op::sum, {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (auto& g : pa.grad.storage()) g += self.grad[0];
  });
}

inline Var mean(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const double n = static_cast<double>(a.value().numel());
  return Var::from_result(Tensor::scalar(s / n), Op::mean, {a}, [n](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (auto& g : pa.grad.storage()) g += self.grad[0] / n;
  });
}

namespace detail {

inline void check_binary_targets(const Tensor& targets, const Tensor& probs, const char* who) {
  if (targets.numel() != probs.numel() || targets.rows() != probs.rows()) {
    throw DimensionError(std::string(who) + ": targets " + shape_str(targets.shape()) + " do not match " +
                         shape_str(probs.shape()));
  }
  for (double t : targets.data()) {
    if (t != 0.0 && t != 1.0) throw ValidationError(std::string(who) + ": target values must be 0 or 1");
  }
}

inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

}  // namespace detail

/// Binary cross-entropy summed over labels and averaged over the batch.
/// When `probs` is a sigmoid output the loss is evaluated from the logits in
/// softplus form and the gradient bypasses the sigmoid.
inline Var bce_loss(const Var& probs, const Tensor& targets) {
  detail::check_binary_targets(targets, probs.value(), "bce_loss");
  const double batch = static_cast<double>(probs.value().rows());
  if (probs.op() == Op::sigmoid) {
    const Var logits = probs.parent(0);
    const Tensor& z = logits.value();
    double loss = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) loss += detail::softplus(z[i]) - targets[i] * z[i];
    return Var::from_result(Tensor::scalar(loss / batch), Op::bce, {logits},
                            [targets, batch](detail::Node& self) {
                              auto& pz = *self.parents[0];
                              const double g = self.grad[0] / batch;
                              for (std::size_t i = 0; i < pz.value.numel(); ++i)
                                pz.grad[i] += g * (detail::stable_sigmoid(pz.value[i]) - targets[i]);
                            });
  }
  const Tensor& p = probs.value();
  double loss = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double c = detail::clamp_prob(p[i]);
    loss -= targets[i] * std::log(c) + (1.0 - targets[i]) * std::log1p(-c);
  }
  return Var::from_result(Tensor::scalar(loss / batch), Op::bce, {probs}, [targets, batch](detail::Node& self) {
    auto& pp = *self.parents[0];
    const double g = self.grad[0] / batch;
    for (std::size_t i = 0; i < pp.value.numel(); ++i) {
      const double v = pp.value[i];
      if (v < kProbClamp || v > 1.0 - kProbClamp) continue;
      pp.grad[i] += g * (-targets[i] / v + (1.0 - targets[i]) / (1.0 - v));
    }
  });
}

/// Categorical cross-entropy against one-hot rows, averaged over the batch.
/// Softmax outputs are differentiated through their logits (log-sum-exp form).
inline Var ce_loss(const Var& probs, const Tensor& targets) {
  detail::check_binary_targets(targets, probs.value(), "ce_loss");
  const std::size_t m = probs.value().rows(), n = probs.value().cols();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += targets[i * n + j];
    if (s != 1.0) throw ValidationError("ce_loss: each target row must be one-hot");
  }
  const double batch = static_cast<double>(m);
  if (probs.op() == Op::softmax) {
    const Var logits = probs.parent(0);
    const Tensor& z = logits.value();
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = &z[i * n];
      const double mx = *std::max_element(row, row + n);
      double se = 0.0;
      for (std::size_t j = 0; j < n; ++j) se += std::exp(row[j] - mx);
      const double lse = mx + std::log(se);
      for (std::size_t j = 0; j < n; ++j) loss += targets[i * n + j] * (lse - row[j]);
    }
    return Var::from_result(Tensor::scalar(loss / batch), Op::ce, {logits},
                            [targets, batch, n, y = probs.value()](detail::Node& self) {
                              auto& pz = *self.parents[0];
                              const double g = self.grad[0] / batch;
                              for (std::size_t i = 0; i < pz.value.numel(); ++i) pz.grad[i] += g * (y[i] - targets[i]);
                            });
  }
  const Tensor& p = probs.value();
  double loss = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i)
    if (targets[i] != 0.0) loss -= std::log(detail::clamp_prob(p[i]));
  return Var::from_result(Tensor::scalar(loss / batch), Op::ce, {probs}, [targets, batch](detail::Node& self) {
    auto& pp = *self.parents[0];
    const double g = self.grad[0] / batch;
    for (std::size_t i = 0; i < pp.value.numel(); ++i) {
      const double v = pp.value[i];
      if (targets[i] == 0.0 || v < kProbClamp || v > 1.0 - kProbClamp) continue;
      pp.grad[i] -= g / v;
    }
  });
}

/// Sum over rows of KL(p_row || uniform) in nats, for p of shape [m x M] or
/// [M]. Log arguments are clamped to [1e-12, 1 - 1e-12].
inline Var kl_to_uniform(const Var& p) {
  const Tensor& P = p.value();
  const double modalities = static_cast<double>(P.cols());
  double kl = 0.0;
  for (double v : P.data()) kl += v * std::log(detail::clamp_prob(v) * modalities);
  return Var::from_result(Tensor::scalar(kl), Op::kl_uniform, {p}, [modalities](detail::Node& self) {
    auto& pp = *self.parents[0];
    for (std::size_t i = 0; i < pp.value.numel(); ++i) {
      const double v = pp.value[i];
      const double c = detail::clamp_prob(v);
      const double d = std::log(c * modalities) + (c == v ? 1.0 : 0.0);
      pp.grad[i] += self.grad[0] * d;
    }
  });
}

enum class Pooling { sum, mean, cls };

/// Pools rows of an embedding table [V x H] per token sequence, giving
/// [batch x H]. Sequences must be non-empty and in-vocabulary.
inline Var embedding_bag(const Var& table, std::span<const std::vector<int>> sequences, Pooling pooling) {
  const std::size_t vocab = table.value().rows(), h = table.value().cols();
  if (table.value().rank() != 2) throw DimensionError("embedding_bag: table must be a matrix");
  if (sequences.empty()) throw ValidationError("embedding_bag: empty batch");
  const std::size_t batch = sequences.size();
  for (const auto& seq : sequences) {
    if (seq.empty()) throw ValidationError("encode_text: empty token sequence");
    for (int t : seq) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
        throw ValidationError("encode_text: token id " + std::to_string(t) + " outside vocabulary of size " +
                              std::to_string(vocab));
      }
    }
  }
  // Pooling weights per (row, token) so the backward pass mirrors forward.
  std::vector<std::vector<std::pair<std::size_t, double>>> bags(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& seq = sequences[b];
    switch (pooling) {
      case Pooling::sum:
        for (int t : seq) bags[b].emplace_back(static_cast<std::size_t>(t), 1.0);
        break;
      case Pooling::mean:
        for (int t : seq) bags[b].emplace_back(static_cast<std::size_t>(t), 1.0 / static_cast<double>(seq.size()));
        break;
      case Pooling::cls:
        bags[b].emplace_back(0, 1.0);
        break;
    }
    // Accumulate in token-id order: pooling is then exactly order-invariant.
    std::sort(bags[b].begin(), bags[b].end());
  }
  Tensor out({batch, h});
  const Tensor& E = table.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (auto [t, w] : bags[b])
      for (std::size_t j = 0; j < h; ++j) out[b * h + j] += w * E[t * h + j];
  return Var::from_result(std::move(out), Op::embedding_bag, {table}, [h, bags = std::move(bags)](detail::Node& self) {
    auto& pt = *self.parents[0];
    for (std::size_t b = 0; b < bags.size(); ++b)
      for (auto [t, w] : bags[b])
        for (std::size_t j = 0; j < h; ++j) pt.grad[t * h + j] += w * self.grad[b * h + j];
  });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires
/// gradients. Interior gradients are reset first, so calling twice on one
/// graph adds the leaf gradients twice.
inline void backward(const Var& loss) {
  if (!loss.defined() || !loss.value().is_scalar()) {
    throw ContractError("backward: loss must be a scalar node, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.raw(), 0}};
  seen.insert(loss.raw());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order)
    if (n->op != Op::leaf) n->grad.fill(0.0);
  loss.raw()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Var var;
  bool trainable = true;
};

/// Ordered, uniquely named collection of learnable leaves.
class ParameterList {
 public:
  Var add(std::string name, Tensor init) {
    if (find(name)) throw ValidationError("duplicate parameter name '" + name + "'");
    params_.push_back(Parameter{std::move(name), Var(std::move(init), true), true});
    return params_.back().var;
  }

  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw ValidationError("no parameter named '" + name + "'");
  }
  const Parameter& at(const std::string& name) const {
    if (auto* p = find(name)) return *p;
    throw ValidationError("no parameter named '" + name + "'");
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  /// Marks every parameter whose name starts with `prefix` as (un)trainable.
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& p : params_)
      if (p.name.starts_with(prefix)) p.trainable = trainable;
  }

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

}  // namespace modfuse

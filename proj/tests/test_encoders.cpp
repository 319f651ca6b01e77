// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "modfuse/encoders.hpp"
#include "support/gradcheck.hpp"

namespace modfuse {
namespace {

double row_norm(const Tensor& t) {
  double s = 0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

Tensor embedding_row(const TextEncoder& enc, int id) {
  const auto& e = enc.embedding().value();
  const std::size_t h = e.cols();
  return Tensor({1, h}, std::vector<double>(&e[id * h], &e[id * h] + h));
}

TEST(TextEncoder, SingletonSumEqualsMean) {
  ParameterList params;
  Rng rng(1);
  TextEncoder sum_enc({20, 5, Pooling::sum}, params, rng);
  const Tensor out = sum_enc.encode(std::vector<int>{7}).value();
  EXPECT_EQ(out, embedding_row(sum_enc, 7));

  ParameterList params2;
  Rng rng2(1);
  TextEncoder mean_enc({20, 5, Pooling::mean}, params2, rng2);
  EXPECT_EQ(mean_enc.encode(std::vector<int>{7}).value(), out);
}

TEST(TextEncoder, DuplicateTokensAndMeanPooling) {
  ParameterList params;
  Rng rng(2);
  TextEncoder enc({20, 4, Pooling::sum}, params, rng);
  const Tensor twice = enc.encode(std::vector<int>{3, 3}).value();
  const Tensor one = embedding_row(enc, 3);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(twice[j], 2.0 * one[j]);

  ParameterList p2;
  Rng r2(2);
  TextEncoder mean_enc({20, 4, Pooling::mean}, p2, r2);
  const Tensor avg = mean_enc.encode(std::vector<int>{3, 9}).value();
  const Tensor a = embedding_row(mean_enc, 3), b = embedding_row(mean_enc, 9);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(avg[j], (a[j] + b[j]) / 2.0, 1e-15);
}

TEST(TextEncoder, ClsPoolingReturnsReservedSlot) {
  ParameterList params;
  Rng rng(3);
  TextEncoder enc({20, 4, Pooling::cls}, params, rng);
  EXPECT_EQ(enc.encode(std::vector<int>{5, 6, 7}).value(), embedding_row(enc, 0));
}

TEST(TextEncoder, RejectsEmptyAndOutOfVocabulary) {
  ParameterList params;
  Rng rng(4);
  TextEncoder enc({10, 4, Pooling::sum}, params, rng);
  EXPECT_THROW(enc.encode(std::vector<int>{}), ValidationError);
  EXPECT_THROW(enc.encode(std::vector<int>{10}), ValidationError);
  EXPECT_THROW(enc.encode(std::vector<int>{-1}), ValidationError);
}

TEST(TextEncoder, EmbeddingInitWithinRange) {
  ParameterList params;
  Rng rng(5);
  TextEncoder enc({100, 8, Pooling::sum}, params, rng);
  for (double v : enc.embedding().value().data()) {
    EXPECT_GE(v, -0.1);
    EXPECT_LE(v, 0.1);
  }
}

TEST(TextEncoder, SumPoolingIsPermutationInvariant) {
  ParameterList params;
  Rng rng(6);
  TextEncoder enc({50, 6, Pooling::sum}, params, rng);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> tokens(1 + rng.below(12));
    for (auto& t : tokens) t = static_cast<int>(rng.below(50));
    std::vector<int> perm = tokens;
    rng.shuffle(perm.begin(), perm.end());
    EXPECT_EQ(enc.encode(tokens).value(), enc.encode(perm).value());
  }
}

TEST(TextEncoder, SumPoolingPermutationExactOnDyadicTable) {
  ParameterList params;
  Rng rng(7);
  TextEncoder enc({16, 3, Pooling::sum}, params, rng);
  auto& table = params.at("text_encoder.embedding").var.mutable_value();
  for (std::size_t i = 0; i < table.numel(); ++i) table[i] = static_cast<double>(i % 7) * 0.125 - 0.25;
  const std::vector<int> a{1, 5, 9, 9, 15, 2};
  const std::vector<int> b{9, 2, 15, 1, 9, 5};
  EXPECT_EQ(enc.encode(a).value(), enc.encode(b).value());
}

TEST(TextEncoder, SumPoolingMagnitudeGrowsLinearlyWithLength) {
  ParameterList params;
  Rng rng(8);
  TextEncoder enc({16, 4, Pooling::sum}, params, rng);
  auto& table = params.at("text_encoder.embedding").var.mutable_value();
  for (std::size_t j = 0; j < 4; ++j) table.at(4, j) = (j % 2 ? -0.5 : 0.25);
  const double unit = row_norm(embedding_row(enc, 4));
  for (int n : {1, 2, 4, 8, 16}) {
    const std::vector<int> copies(static_cast<std::size_t>(n), 4);
    EXPECT_EQ(row_norm(enc.encode(copies).value()), n * unit) << n;
  }
}

TEST(ImageEncoder, IdentityAndZeroWeights) {
  ParameterList params;
  Rng rng(9);
  ImageEncoder enc({3, {}, 3, Activation::relu}, params, rng);
  auto& w = params.at("image_encoder.layer0.W").var.mutable_value();
  w.fill(0.0);
  for (std::size_t i = 0; i < 3; ++i) w.at(i, i) = 1.0;
  const Tensor x = Tensor::vector({0.5, -2.0, 3.25});
  EXPECT_EQ(enc.encode(x).value(), Tensor({1, 3}, x.storage()));

  w.fill(0.0);
  EXPECT_EQ(enc.encode(x).value(), Tensor({1, 3}));
}

TEST(ImageEncoder, ClosedReluGateOutputsFinalBias) {
  ParameterList params;
  Rng rng(10);
  ImageEncoder enc({2, {4}, 3, Activation::relu}, params, rng);
  auto& w0 = params.at("image_encoder.layer0.W").var.mutable_value();
  auto& b0 = params.at("image_encoder.layer0.b").var.mutable_value();
  auto& b1 = params.at("image_encoder.layer1.b").var.mutable_value();
  w0.fill(1.0);
  b0.fill(-10.0);
  b1 = Tensor::vector({0.1, -0.2, 0.3});
  const Tensor x = Tensor::vector({1.0, 2.0});  // pre-activations all -7
  EXPECT_EQ(enc.encode(x).value(), Tensor({1, 3}, b1.storage()));
}

TEST(ImageEncoder, WrongLengthIsDimensionError) {
  ParameterList params;
  Rng rng(11);
  ImageEncoder enc({4, {3}, 2, Activation::tanh}, params, rng);
  EXPECT_THROW(enc.encode(Tensor::vector({1, 2, 3})), DimensionError);
}

TEST(ImageEncoder, GlorotInitBounds) {
  ParameterList params;
  Rng rng(12);
  ImageEncoder enc({30, {20}, 10, Activation::relu}, params, rng);
  const double l0 = std::sqrt(6.0 / 50.0), l1 = std::sqrt(6.0 / 30.0);
  for (double v : params.at("image_encoder.layer0.W").var.value().data()) EXPECT_LE(std::abs(v), l0);
  for (double v : params.at("image_encoder.layer1.W").var.value().data()) EXPECT_LE(std::abs(v), l1);
}

TEST(Encoders, EndToEndGradientCheck) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (Activation act : {Activation::relu, Activation::tanh}) {
      ParameterList params;
      Rng rng(seed);
      TextEncoder text({12, 4, seed % 2 ? Pooling::mean : Pooling::sum}, params, rng);
      ImageEncoder image({5, {6, 4}, 3, act}, params, rng);
      const std::vector<std::vector<int>> tokens{{1, 4, 4, 11}, {7}};
      Tensor feats({2, 5});
      for (auto& v : feats.storage()) v = rng.uniform(-1, 1);
      auto loss_fn = [&] {
        const Var joint = concat(text.encode(tokens), image.encode(feats));
        return sum(mul(joint, joint));
      };
      const auto r = testing::check_gradients(params, loss_fn);
      EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
    }
  }
}

}  // namespace
}  // namespace modfuse

// Copyright 2026 The vflbd Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "vflbd/gradcheck.hpp"
#include "vflbd/nn.hpp"
#include "vflbd/tensor.hpp"

namespace vflbd {
namespace {

DenseLayer identity_layer(std::size_t n, Activation act) {
  DenseLayer l{Matrix(n, n), std::vector<double>(n, 0.0), act};
  for (std::size_t i = 0; i < n; ++i) l.weights(i, i) = 1.0;
  return l;
}

TEST(DenseForwardTest, IdentityLayerPassesInputThrough) {
  auto out = dense_forward(identity_layer(2, Activation::kIdentity), Matrix{{1, 2}});
  EXPECT_EQ(out, (Matrix{{1, 2}}));
}

TEST(DenseForwardTest, ReluClipsNegatives) {
  auto out = dense_forward(identity_layer(2, Activation::kRelu), Matrix{{-1, 2}});
  EXPECT_EQ(out, (Matrix{{0, 2}}));
}

TEST(DenseForwardTest, MatchesTripleLoop) {
  Rng rng(11);
  DenseLayer layer = DenseLayer::glorot(3, 4, Activation::kIdentity, rng);
  layer.bias = {0.1, -0.2, 0.3, -0.4};
  Matrix x = random_matrix(2, 3, rng);
  Matrix out = dense_forward(layer, x);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double acc = layer.bias[j];
      for (std::size_t k = 0; k < 3; ++k) acc += x(i, k) * layer.weights(k, j);
      EXPECT_NEAR(out(i, j), acc, 1e-14);
    }
  }
}

TEST(DenseForwardTest, DimensionMismatchIsConfigError) {
  Rng rng(1);
  auto layer = DenseLayer::glorot(3, 2, Activation::kRelu, rng);
  EXPECT_THROW(dense_forward(layer, Matrix(1, 4)), ConfigError);
}

TEST(DenseForwardTest, Deterministic) {
  Rng rng(5);
  auto layer = DenseLayer::glorot(6, 5, Activation::kRelu, rng);
  Matrix x = random_matrix(4, 6, rng);
  EXPECT_EQ(dense_forward(layer, x), dense_forward(layer, x));
}

TEST(DenseBackwardTest, IdentityPassesUpstreamGradient) {
  auto g = dense_backward(identity_layer(2, Activation::kIdentity), Matrix{{3, 4}}, Matrix{{1, 0}});
  EXPECT_EQ(g.input_grad, (Matrix{{1, 0}}));
  EXPECT_EQ(g.params.weights, (Matrix{{3, 0}, {4, 0}}));
  EXPECT_EQ(g.params.bias, (std::vector<double>{1, 0}));
}

TEST(DenseBackwardTest, DeadReluUnitGetsNoGradient) {
  auto g = dense_backward(identity_layer(2, Activation::kRelu), Matrix{{-1, 2}}, Matrix{{5, 7}});
  EXPECT_EQ(g.input_grad(0, 0), 0.0);
  EXPECT_EQ(g.input_grad(0, 1), 7.0);
  EXPECT_EQ(g.params.bias[0], 0.0);
}

TEST(DenseBackwardTest, ShapeMismatchIsConfigError) {
  Rng rng(1);
  auto layer = DenseLayer::glorot(3, 2, Activation::kRelu, rng);
  EXPECT_THROW(dense_backward(layer, Matrix(2, 3), Matrix(2, 3)), ConfigError);
}

TEST(DenseBackwardTest, FiniteDifferencesAgreeOnRandomLayers) {
  Rng rng(2024);
  for (auto act : {Activation::kRelu, Activation::kIdentity}) {
    for (int rep = 0; rep < 5; ++rep) {
      auto report = check_dense_layer(2 + rep, 3 + rep % 2, act, 4, rng);
      EXPECT_TRUE(report.passed) << report.name << " max rel err " << report.max_rel_error;
      EXPECT_GT(report.checked, 0u);
    }
  }
}

TEST(SoftmaxCeTest, UniformLogitsGiveTextbookGradient) {
  Matrix logits(1, 5, 0.3);
  std::vector<Label> y{0};
  auto ce = softmax_ce_grad(logits, y);
  EXPECT_NEAR(ce.grad(0, 0), -0.8, 1e-15);
  for (std::size_t j = 1; j < 5; ++j) EXPECT_NEAR(ce.grad(0, j), 0.2, 1e-15);
  EXPECT_NEAR(ce.loss, std::log(5.0), 1e-15);
}

TEST(SoftmaxCeTest, OutOfRangeLabelIsDataError) {
  std::vector<Label> y{5};
  EXPECT_THROW(softmax_ce_grad(Matrix(1, 5), y), DataError);
}

TEST(SoftmaxCeTest, ExactlyOneNegativeEntryPerRowAtTheLabel) {
  Rng rng(3);
  std::uniform_int_distribution<std::size_t> pick(0, 6);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix logits = random_matrix(8, 7, rng, 1.0 + trial % 20);
    std::vector<Label> y(8);
    for (auto& v : y) v = pick(rng);
    auto ce = softmax_ce_grad(logits, y);
    for (std::size_t r = 0; r < 8; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        sum += ce.grad(r, j);
        if (j == y[r]) {
          EXPECT_LT(ce.grad(r, j), 0.0);
        } else {
          EXPECT_GE(ce.grad(r, j), 0.0);
        }
      }
      EXPECT_NEAR(sum, 0.0, 1e-14);
    }
  }
}

TEST(SoftmaxCeTest, TrueLabelEntryStaysNegativeWhenSaturated) {
  Matrix logits{{40.0, 0.0, 0.0}};
  std::vector<Label> y{0};
  auto ce = softmax_ce_grad(logits, y);
  EXPECT_LT(ce.grad(0, 0), 0.0);
}

// Each gradient row is the derivative of that sample's own loss, i.e. of
// n * (mean loss).
TEST(SoftmaxCeTest, FiniteDifferencesAgree) {
  Rng rng(8);
  Matrix logits = random_matrix(4, 5, rng, 2.0);
  std::vector<Label> y{0, 3, 4, 1};
  auto ce = softmax_ce_grad(logits, y);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double& p = logits.values()[i];
    const double num = central_difference(p, 1e-5, [&] { return 4.0 * softmax_ce_grad(logits, y).loss; });
    EXPECT_LE(relative_error(ce.grad.values()[i], num), 1e-4);
  }
}

TEST(SgdTest, ZeroGradientLeavesParameters) {
  Rng rng(1);
  auto layer = DenseLayer::glorot(3, 2, Activation::kRelu, rng);
  auto before = layer.weights;
  sgd_step(layer, {Matrix(3, 2), {0, 0}}, {0.01, 0.0});
  EXPECT_EQ(layer.weights, before);
}

TEST(SgdTest, OneStepArithmetic) {
  DenseLayer layer{Matrix{{1.0}}, {0.0}, Activation::kIdentity};
  sgd_step(layer, {Matrix{{1.0}}, {0.0}}, {0.01, 0.0});
  EXPECT_DOUBLE_EQ(layer.weights(0, 0), 0.99);
}

TEST(SgdTest, WeightDecayShrinksByOneMinusLrLambda) {
  DenseLayer layer{Matrix{{2.0}}, {0.0}, Activation::kIdentity};
  sgd_step(layer, {Matrix{{0.0}}, {0.0}}, {0.1, 0.5});
  EXPECT_DOUBLE_EQ(layer.weights(0, 0), 2.0 * (1.0 - 0.1 * 0.5));
}

TEST(SgdTest, RejectsBadState) {
  DenseLayer layer{Matrix{{2.0}}, {0.0}, Activation::kIdentity};
  EXPECT_THROW(sgd_step(layer, {Matrix{{0.0}}, {0.0}}, {0.0, 0.0}), ConfigError);
  EXPECT_THROW(sgd_step(layer, {Matrix{{0.0}}, {0.0}}, {0.1, -1.0}), ConfigError);
  EXPECT_THROW(sgd_step(layer, {Matrix(2, 1), {0.0}}, {0.1, 0.0}), ConfigError);
}

TEST(GlorotTest, WeightsWithinLimitAndFinite) {
  Rng rng(9);
  auto layer = DenseLayer::glorot(30, 10, Activation::kRelu, rng);
  const double limit = std::sqrt(6.0 / 40.0);
  EXPECT_LE(max_abs(layer.weights), limit);
  EXPECT_TRUE(all_finite(layer.weights));
  Rng again(9);
  EXPECT_EQ(DenseLayer::glorot(30, 10, Activation::kRelu, again).weights, layer.weights);
}

TEST(MatrixTest, HelpersKeepShapes) {
  Matrix a{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(column_slice(a, 1, 3), (Matrix{{2, 3}, {5, 6}}));
  std::vector<Matrix> parts{column_slice(a, 0, 1), column_slice(a, 1, 3)};
  EXPECT_EQ(hconcat(parts), a);
  std::vector<SampleId> ids{1, 0, 1};
  EXPECT_EQ(gather_rows(a, ids), (Matrix{{4, 5, 6}, {1, 2, 3}, {4, 5, 6}}));
  EXPECT_EQ(matmul_at_b(a, a), matmul(Matrix{{1, 4}, {2, 5}, {3, 6}}, a));
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ConfigError);
  EXPECT_THROW(column_slice(a, 2, 4), ConfigError);
}

TEST(GradcheckSuiteTest, AllTwelveChecksPass) {
  auto reports = run_gradcheck_suite(42);
  ASSERT_EQ(reports.size(), 12u);
  for (const auto& r : reports) EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
}

}  // namespace
}  // namespace vflbd

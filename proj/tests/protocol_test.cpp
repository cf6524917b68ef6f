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

#include <memory>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "oracle/monolithic.hpp"
#include "vflbd/dataset.hpp"
#include "vflbd/experiment.hpp"
#include "vflbd/gradcheck.hpp"
#include "vflbd/protocol.hpp"

namespace vflbd {
namespace {

TrainTest small_synth(std::uint64_t seed = 3) {
  SynthSpec spec;
  spec.n_train = 240;
  spec.n_test = 60;
  spec.d_per_party = 6;
  spec.num_classes = 4;
  spec.class_separation = 1.5;
  return build_synth(spec, seed);
}

Federation make_fed(const PartitionedDataset& train, HeadKind head, std::size_t passive_hidden = 8,
                    std::uint64_t seed = 17) {
  Architecture arch;
  arch.head = head;
  for (const auto& b : train.blocks) arch.party_inputs.push_back(b.cols());
  arch.num_classes = train.num_classes;
  arch.passive_hidden = passive_hidden;
  arch.representation_width = 7;
  arch.head_hidden = 9;
  Rng rng = make_rng(seed, Stream::kInit);
  return build_federation(arch, train.labels, SgdState{0.05, 0.0}, rng);
}

class IdentityInterceptor final : public Interceptor {
 public:
  std::string name() const override { return "identity"; }
  Matrix intercept(Matrix m, const InterceptContext&) override {
    ++calls;
    return m;
  }
  int calls = 0;
};

class DropColumn final : public Interceptor {
 public:
  std::string name() const override { return "drop-column"; }
  Matrix intercept(Matrix m, const InterceptContext&) override { return column_slice(m, 0, m.cols() - 1); }
};

class AddOne final : public Interceptor {
 public:
  explicit AddOne(bool train_only) : train_only_(train_only) {}
  std::string name() const override { return "add-one"; }
  bool train_only() const override { return train_only_; }
  Matrix intercept(Matrix m, const InterceptContext&) override {
    for (double& v : m.values()) v += 1.0;
    return m;
  }

 private:
  bool train_only_;
};

struct EquivalenceCase {
  HeadKind head;
  std::size_t passive_hidden;
};

class MonolithicEquivalenceTest : public ::testing::TestWithParam<EquivalenceCase> {};

TEST_P(MonolithicEquivalenceTest, OneRoundMatchesBackprop) {
  auto data = small_synth();
  Federation fed = make_fed(data.train, GetParam().head, GetParam().passive_hidden);
  oracle::MonolithicNet mono(fed);
  ASSERT_EQ(mono.max_param_diff(fed), 0.0);
  std::vector<SampleId> batch{5, 17, 3, 99, 100, 42, 7, 8};
  run_round(fed, data.train.blocks, batch, InterceptorStack{});
  std::vector<Label> y;
  for (auto id : batch) y.push_back(data.train.labels[id]);
  mono.train_step(oracle::concat_rows(data.train.blocks, batch), y, 0.05);
  EXPECT_LE(mono.max_param_diff(fed), 1e-10);
}

TEST_P(MonolithicEquivalenceTest, ThreeEpochsMatchBackprop) {
  auto data = small_synth();
  Federation fed = make_fed(data.train, GetParam().head, GetParam().passive_hidden);
  oracle::MonolithicNet mono(fed);
  Rng shuffle(99);
  for (int epoch = 0; epoch < 3; ++epoch) {
    for (const auto& batch : epoch_batches(data.train.size(), 16, shuffle)) {
      run_round(fed, data.train.blocks, batch, InterceptorStack{});
      std::vector<Label> y;
      for (auto id : batch) y.push_back(data.train.labels[id]);
      mono.train_step(oracle::concat_rows(data.train.blocks, batch), y, 0.05);
    }
  }
  EXPECT_LE(mono.max_param_diff(fed), 1e-10);

  std::vector<SampleId> all(data.test.size());
  std::iota(all.begin(), all.end(), SampleId{0});
  auto mono_logits = mono.logits(oracle::concat_rows(data.test.blocks, all));
  auto pred = predict(fed, data.test.blocks);
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(pred[i], argmax(mono_logits[i]));
}

INSTANTIATE_TEST_SUITE_P(Heads, MonolithicEquivalenceTest,
                         ::testing::Values(EquivalenceCase{HeadKind::kSum, 8},
                                           EquivalenceCase{HeadKind::kSum, 0},
                                           EquivalenceCase{HeadKind::kTrainable, 0}));

TEST(RunRoundTest, IdentityInterceptorsEverywhereChangeNothing) {
  auto data = small_synth();
  for (auto head : {HeadKind::kSum, HeadKind::kTrainable}) {
    Federation plain = make_fed(data.train, head);
    Federation hooked = plain;
    InterceptorStack stack;
    auto id = std::make_shared<IdentityInterceptor>();
    for (auto site : {Site::kPassiveUp, Site::kActiveDown, Site::kPassiveApply}) {
      stack.add(site, std::nullopt, id);
    }
    std::vector<SampleId> batch{1, 2, 3, 4, 5};
    auto a = run_round(plain, data.train.blocks, batch, InterceptorStack{});
    auto b = run_round(hooked, data.train.blocks, batch, stack);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(id->calls, 6);
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t l = 0; l < plain.parties[k].model.layers.size(); ++l) {
        EXPECT_EQ(plain.parties[k].model.layers[l].weights, hooked.parties[k].model.layers[l].weights);
      }
    }
  }
}

TEST(RunRoundTest, SinglePartyIsSoftmaxRegression) {
  PartitionedDataset ds;
  Rng rng(4);
  ds.blocks = {random_matrix(10, 3, rng)};
  ds.labels = {0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  ds.num_classes = 3;
  Architecture arch;
  arch.party_inputs = {3};
  arch.num_classes = 3;
  arch.passive_hidden = 0;
  Federation fed = build_federation(arch, ds.labels, SgdState{0.1, 0.0}, rng);
  DenseLayer ref = fed.parties[0].model.layers[0];
  std::vector<SampleId> batch{0, 3, 4, 9};

  // Hand-rolled softmax regression step.
  Matrix x = gather_rows(ds.blocks[0], batch);
  Matrix logits = matmul(x, ref.weights);
  Matrix delta(4, 3);
  for (std::size_t r = 0; r < 4; ++r) {
    auto s = softmax(logits.row(r));
    for (std::size_t j = 0; j < 3; ++j) delta(r, j) = (s[j] - (ds.labels[batch[r]] == j)) / 4.0;
  }
  Matrix gw = matmul_at_b(x, delta);
  for (std::size_t i = 0; i < gw.size(); ++i) ref.weights.values()[i] -= 0.1 * gw.values()[i];

  run_round(fed, ds.blocks, batch, InterceptorStack{});
  EXPECT_LE(max_abs_diff(fed.parties[0].model.layers[0].weights, ref.weights), 1e-14);
}

TEST(RunRoundTest, SumHeadSendsEveryPartyTheSameGradient) {
  auto data = small_synth();
  Federation fed = make_fed(data.train, HeadKind::kSum);
  Rng shuffle(1);
  for (const auto& batch : epoch_batches(data.train.size(), 32, shuffle)) {
    auto r = run_round(fed, data.train.blocks, batch, InterceptorStack{});
    ASSERT_EQ(r.messages.down.size(), 2u);
    EXPECT_EQ(r.messages.down[0], r.messages.down[1]);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_TRUE(r.messages.down[k].same_shape(r.messages.up[k]));
  }
}

TEST(RunRoundTest, DownMessagesMirrorUpShapesUnderTrainableHead) {
  auto data = small_synth();
  Federation fed = make_fed(data.train, HeadKind::kTrainable);
  Rng shuffle(1);
  for (const auto& batch : epoch_batches(data.train.size(), 50, shuffle)) {
    auto r = run_round(fed, data.train.blocks, batch, InterceptorStack{});
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_TRUE(r.messages.down[k].same_shape(r.messages.up[k]));
      EXPECT_EQ(r.messages.up[k].rows(), batch.size());
    }
  }
}

TEST(RunRoundTest, ShapeChangingInterceptorNamesItsSite) {
  auto data = small_synth();
  Federation fed = make_fed(data.train, HeadKind::kSum);
  InterceptorStack stack;
  stack.add(Site::kPassiveUp, 1, std::make_shared<DropColumn>());
  std::vector<SampleId> batch{0, 1};
  try {
    run_round(fed, data.train.blocks, batch, stack);
    FAIL() << "expected ProtocolError";
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("PassiveUp(1)"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("drop-column"), std::string::npos);
  }
}

TEST(RunRoundTest, RejectsBadBatches) {
  auto data = small_synth();
  Federation fed = make_fed(data.train, HeadKind::kSum);
  std::vector<SampleId> bad{0, 100000};
  EXPECT_THROW(run_round(fed, data.train.blocks, bad, InterceptorStack{}), DataError);
  EXPECT_THROW(run_round(fed, std::span<const Matrix>(data.train.blocks).first(1),
                         std::vector<SampleId>{0}, InterceptorStack{}),
               ConfigError);
}

TEST(MergeTest, ZeroSecondPartyEqualsSingleParty) {
  Rng rng(6);
  Matrix h = random_matrix(5, 4, rng);
  std::vector<Label> y{0, 1, 2, 3, 0};
  std::vector<Matrix> two{h, Matrix(5, 4)};
  std::vector<Matrix> one{h};
  auto a = merge_untrainable(two, y);
  auto b = merge_untrainable(one, y);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.party_grads[0], b.party_grads[0]);
  EXPECT_EQ(a.party_grads[0], a.party_grads[1]);
}

TEST(MergeTest, UntrainableLossMatchesMonolithicLogits) {
  auto data = small_synth();
  Federation fed = make_fed(data.train, HeadKind::kSum);
  oracle::MonolithicNet mono(fed);
  std::vector<SampleId> ids{0, 1, 2, 3, 4, 5};
  std::vector<Matrix> reps;
  for (std::size_t k = 0; k < 2; ++k) reps.push_back(forward(fed.parties[k].model, gather_rows(data.train.blocks[k], ids)));
  std::vector<Label> y;
  for (auto id : ids) y.push_back(data.train.labels[id]);
  auto merged = merge_untrainable(reps, y);
  auto logits = mono.logits(oracle::concat_rows(data.train.blocks, ids));
  double loss = 0.0;
  for (std::size_t r = 0; r < ids.size(); ++r) loss -= std::log(softmax(logits[r])[y[r]]);
  EXPECT_NEAR(merged.loss, loss / 6.0, 1e-12);
}

TEST(MergeTest, WidthMismatchIsConfigError) {
  std::vector<Matrix> reps{Matrix(2, 3), Matrix(2, 4)};
  std::vector<Label> y{0, 1};
  EXPECT_THROW(merge_untrainable(reps, y), ConfigError);
  Rng rng(1);
  Sequential head{{DenseLayer::glorot(6, 3, Activation::kIdentity, rng)}};
  EXPECT_THROW(merge_trainable(reps, y, head), ConfigError);
}

TEST(MergeTest, TrainableSlicesPartitionTheInputGradient) {
  Rng rng(12);
  Sequential head{{DenseLayer::glorot(6, 6, Activation::kRelu, rng), DenseLayer::glorot(6, 3, Activation::kIdentity, rng)}};
  head.layers[0].weights = Matrix(6, 6);
  for (std::size_t i = 0; i < 6; ++i) head.layers[0].weights(i, i) = 1.0;
  std::vector<Matrix> reps{random_matrix(4, 3, rng, 1.0), Matrix(4, 3)};
  for (double& v : reps[0].values()) v = std::abs(v) + 0.1;
  std::vector<Label> y{0, 1, 2, 1};
  auto merged = merge_trainable(reps, y, head);
  auto trace = forward_trace(head, hconcat(reps));
  auto ce = softmax_ce_grad(trace.output(), y);
  auto full = backward(head, trace, ce.grad, true).input_grad;
  EXPECT_EQ(hconcat(merged.party_grads), full);
}

TEST(MergeTest, TrainableHeadGradientsPassFiniteDifferences) {
  Rng rng(13);
  Sequential head{{DenseLayer::glorot(5, 4, Activation::kRelu, rng), DenseLayer::glorot(4, 3, Activation::kIdentity, rng)}};
  std::vector<Matrix> reps{random_matrix(6, 2, rng), random_matrix(6, 3, rng)};
  while (!clear_of_kinks(head, hconcat(reps), 1e-3)) reps = {random_matrix(6, 2, rng), random_matrix(6, 3, rng)};
  std::vector<Label> y{0, 1, 2, 0, 1, 2};
  auto merged = merge_trainable(reps, y, head);
  auto loss = [&] { return merge_trainable(reps, y, head).loss; };
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t i = 0; i < head.layers[l].weights.size(); ++i) {
      double num = central_difference(head.layers[l].weights.values()[i], 1e-5, loss);
      EXPECT_LE(relative_error(merged.head_grads.layers[l].weights.values()[i], num), 1e-4);
    }
    for (std::size_t j = 0; j < head.layers[l].bias.size(); ++j) {
      double num = central_difference(head.layers[l].bias[j], 1e-5, loss);
      EXPECT_LE(relative_error(merged.head_grads.layers[l].bias[j], num), 1e-4);
    }
  }
}

TEST(MergeTest, SwappingPartiesWithPermutedHeadKeepsLoss) {
  Rng rng(14);
  Sequential head{{DenseLayer::glorot(5, 4, Activation::kRelu, rng), DenseLayer::glorot(4, 3, Activation::kIdentity, rng)}};
  std::vector<Matrix> reps{random_matrix(6, 2, rng), random_matrix(6, 3, rng)};
  std::vector<Label> y{0, 1, 2, 0, 1, 2};
  Sequential swapped = head;
  // New input order is party 1 (3 cols) then party 0 (2 cols).
  std::vector<std::size_t> perm{2, 3, 4, 0, 1};
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 4; ++j) swapped.layers[0].weights(i, j) = head.layers[0].weights(perm[i], j);
  }
  std::vector<Matrix> reversed{reps[1], reps[0]};
  EXPECT_NEAR(merge_trainable(reps, y, head).loss, merge_trainable(reversed, y, swapped).loss, 1e-12);
}

Federation logit_passthrough(std::size_t classes) {
  Federation fed;
  DenseLayer id{Matrix(classes, classes), std::vector<double>(classes, 0.0), Activation::kIdentity};
  for (std::size_t i = 0; i < classes; ++i) id.weights(i, i) = 1.0;
  fed.parties.push_back({0, Sequential{{id}}, {}});
  fed.active.head_kind = HeadKind::kSum;
  fed.active.num_classes = classes;
  return fed;
}

TEST(PredictTest, ArgmaxOfMergedLogits) {
  auto fed = logit_passthrough(4);
  std::vector<Matrix> f{Matrix{{0.1, 0.9, 0.3, 0.2}}};
  EXPECT_EQ(predict(fed, f), (std::vector<Label>{1}));
}

TEST(PredictTest, TiesGoToLowestClass) {
  auto fed = logit_passthrough(3);
  std::vector<Matrix> f{Matrix{{0.5, 0.1, 0.5}}};
  EXPECT_EQ(predict(fed, f), (std::vector<Label>{0}));
}

TEST(PredictTest, TrainOnlyInterceptorsAreSkipped) {
  auto fed = logit_passthrough(3);
  std::vector<Matrix> f{Matrix{{0.1, 0.2, 0.3}}};
  std::vector<SampleId> ids{0};
  InterceptorStack train_only;
  train_only.add(Site::kPassiveUp, 0, std::make_shared<AddOne>(true));
  EXPECT_EQ(predict_logits(fed, f, &train_only, ids), f[0]);
  InterceptorStack always;
  always.add(Site::kPassiveUp, 0, std::make_shared<AddOne>(false));
  EXPECT_EQ(predict_logits(fed, f, &always, ids), (Matrix{{1.1, 1.2, 1.3}}));
}

TEST(FederationTest, SumHeadRepresentationWidthIsClassCount) {
  auto data = small_synth();
  auto fed = make_fed(data.train, HeadKind::kSum);
  for (const auto& p : fed.parties) EXPECT_EQ(p.width(), data.train.num_classes);
  auto tr = make_fed(data.train, HeadKind::kTrainable);
  for (const auto& p : tr.parties) EXPECT_EQ(p.width(), 7u);
  EXPECT_EQ(tr.active.head.in_dim(), 14u);
}

}  // namespace
}  // namespace vflbd

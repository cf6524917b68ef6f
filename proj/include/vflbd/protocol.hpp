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

#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vflbd/errors.hpp"
#include "vflbd/nn.hpp"
#include "vflbd/rng.hpp"
#include "vflbd/tensor.hpp"

namespace vflbd {

// ---------------------------------------------------------------------------
// Parties

enum class HeadKind {
  kSum,        // softmax over the sum of party representations; no parameters
  kTrainable,  // concat -> dense(hidden, ReLU) -> dense(num_classes)
};

inline const char* to_string(HeadKind h) { return h == HeadKind::kSum ? "sum" : "trainable"; }

struct PassiveParty {
  std::size_t id = 0;
  Sequential model;
  SgdState optimizer;

  std::size_t width() const { return model.out_dim(); }
};

struct ActiveParty {
  HeadKind head_kind = HeadKind::kSum;
  Sequential head;  // empty for HeadKind::kSum
  std::size_t num_classes = 0;
  std::vector<Label> labels;
  SgdState optimizer;
};

struct Federation {
  std::vector<PassiveParty> parties;
  ActiveParty active;
};

struct Architecture {
  HeadKind head = HeadKind::kSum;
  std::vector<std::size_t> party_inputs;  // feature width of each passive party
  std::size_t num_classes = 10;
  // Hidden ReLU layer inside each passive model for the sum head. Zero makes
  // every passive party a single linear map onto the logits.
  std::size_t passive_hidden = 32;
  // Representation width sent up under the trainable head.
  std::size_t representation_width = 32;
  std::size_t head_hidden = 32;
};

// Passive models are built in party order, then the head, all from `init`.
inline Federation build_federation(const Architecture& arch, std::vector<Label> labels,
                                   const SgdState& sgd, Rng& init) {
  sgd.validate();
  if (arch.party_inputs.empty()) throw ConfigError("build_federation: no passive parties");
  if (arch.num_classes < 2) throw ConfigError("build_federation: need at least two classes");
  Federation fed;
  for (std::size_t k = 0; k < arch.party_inputs.size(); ++k) {
    PassiveParty p{k, {}, sgd};
    const std::size_t in = arch.party_inputs[k];
    if (arch.head == HeadKind::kSum) {
      if (arch.passive_hidden > 0) {
        p.model.layers.push_back(DenseLayer::glorot(in, arch.passive_hidden, Activation::kRelu, init));
        p.model.layers.push_back(
            DenseLayer::glorot(arch.passive_hidden, arch.num_classes, Activation::kIdentity, init));
      } else {
        p.model.layers.push_back(DenseLayer::glorot(in, arch.num_classes, Activation::kIdentity, init));
      }
    } else {
      p.model.layers.push_back(
          DenseLayer::glorot(in, arch.representation_width, Activation::kRelu, init));
    }
    fed.parties.push_back(std::move(p));
  }
  fed.active.head_kind = arch.head;
  fed.active.num_classes = arch.num_classes;
  fed.active.labels = std::move(labels);
  fed.active.optimizer = sgd;
  if (arch.head == HeadKind::kTrainable) {
    const std::size_t concat = arch.representation_width * arch.party_inputs.size();
    fed.active.head.layers.push_back(
        DenseLayer::glorot(concat, arch.head_hidden, Activation::kRelu, init));
    fed.active.head.layers.push_back(
        DenseLayer::glorot(arch.head_hidden, arch.num_classes, Activation::kIdentity, init));
  }
  return fed;
}

// ---------------------------------------------------------------------------
// Interceptors

enum class Site {
  kPassiveUp,     // representation leaving passive party k
  kActiveDown,    // gradient leaving the active party towards party k
  kPassiveApply,  // gradient party k is about to use for its own update
};

enum class Phase { kTrain, kPredict };

inline std::string site_name(Site site, std::size_t party) {
  switch (site) {
    case Site::kPassiveUp:
      return "PassiveUp(" + std::to_string(party) + ")";
    case Site::kActiveDown:
      return "ActiveDown(" + std::to_string(party) + ")";
    case Site::kPassiveApply:
      return "PassiveApply(" + std::to_string(party) + ")";
  }
  return "?";
}

struct InterceptContext {
  Site site = Site::kPassiveUp;
  std::size_t party = 0;
  std::span<const SampleId> sample_ids;
  std::size_t round = 0;
  Phase phase = Phase::kTrain;
};

// A transform over one protocol message. Implementations may keep state
// (recorded gradients, residuals, RNG streams) but must preserve the shape.
class Interceptor {
 public:
  virtual ~Interceptor() = default;
  virtual std::string name() const = 0;
  virtual Matrix intercept(Matrix message, const InterceptContext& ctx) = 0;
  // Train-only interceptors are skipped on the prediction path.
  virtual bool train_only() const { return true; }
};

class InterceptorStack {
 public:
  // `party` unset binds to every party at that site.
  void add(Site site, std::optional<std::size_t> party, std::shared_ptr<Interceptor> interceptor) {
    if (!interceptor) throw ConfigError("InterceptorStack: null interceptor");
    bindings_.push_back({site, party, std::move(interceptor)});
  }

  bool empty() const noexcept { return bindings_.empty(); }
  std::size_t size() const noexcept { return bindings_.size(); }

  Matrix apply(Matrix message, const InterceptContext& ctx) const {
    for (const auto& b : bindings_) {
      if (b.site != ctx.site || (b.party && *b.party != ctx.party)) continue;
      if (ctx.phase == Phase::kPredict && b.interceptor->train_only()) continue;
      const std::size_t rows = message.rows();
      const std::size_t cols = message.cols();
      message = b.interceptor->intercept(std::move(message), ctx);
      if (message.rows() != rows || message.cols() != cols) {
        throw ProtocolError("interceptor '" + b.interceptor->name() + "' at " +
                            site_name(ctx.site, ctx.party) + " changed message shape " +
                            Matrix::shape_string(rows, cols) + " -> " + message.shape());
      }
    }
    return message;
  }

 private:
  struct Binding {
    Site site;
    std::optional<std::size_t> party;
    std::shared_ptr<Interceptor> interceptor;
  };
  std::vector<Binding> bindings_;
};

// ---------------------------------------------------------------------------
// Active-party merge

struct MergeResult {
  double loss = 0.0;
  std::vector<Matrix> party_grads;  // per-sample dl_i/dH_i^k, one per party
  Matrix output;                    // merged logits
  SequentialGrads head_grads;       // batch-mean head gradients; trainable head only
};

// Softmax cross-entropy over the element-wise sum of party representations.
// Every party receives the same gradient since dH/dH^k is the identity.
inline MergeResult merge_untrainable(std::span<const Matrix> reps, std::span<const Label> labels) {
  if (reps.empty()) throw ConfigError("merge_untrainable: no representations");
  Matrix sum = reps.front();
  for (std::size_t k = 1; k < reps.size(); ++k) {
    if (!reps[k].same_shape(sum)) {
      throw ConfigError("merge_untrainable: party " + std::to_string(k) + " sent " +
                        reps[k].shape() + ", expected " + sum.shape());
    }
    sum = std::move(sum) + reps[k];
  }
  auto ce = softmax_ce_grad(sum, labels);
  MergeResult out;
  out.loss = ce.loss;
  out.party_grads.assign(reps.size(), ce.grad);
  out.output = std::move(sum);
  return out;
}

// Concatenates party outputs and runs them through the head. Each party's
// gradient is its column slice of the gradient w.r.t. the concatenation.
inline MergeResult merge_trainable(std::span<const Matrix> reps, std::span<const Label> labels,
                                   const Sequential& head) {
  if (reps.empty()) throw ConfigError("merge_trainable: no representations");
  if (head.empty()) throw ConfigError("merge_trainable: empty head");
  std::size_t total = 0;
  for (const auto& r : reps) total += r.cols();
  if (total != head.in_dim()) {
    throw ConfigError("merge_trainable: representation widths sum to " + std::to_string(total) +
                      ", head expects " + std::to_string(head.in_dim()));
  }
  auto trace = forward_trace(head, hconcat(reps));
  auto ce = softmax_ce_grad(trace.output(), labels);
  MergeResult out;
  out.loss = ce.loss;
  out.head_grads = backward(head, trace, ce.grad, true);
  std::size_t begin = 0;
  for (const auto& r : reps) {
    out.party_grads.push_back(column_slice(out.head_grads.input_grad, begin, begin + r.cols()));
    begin += r.cols();
  }
  out.head_grads.input_grad = {};
  if (!labels.empty()) out.head_grads *= 1.0 / static_cast<double>(labels.size());
  out.output = trace.output();
  return out;
}

inline MergeResult merge(const ActiveParty& active, std::span<const Matrix> reps,
                         std::span<const Label> labels) {
  if (active.head_kind == HeadKind::kSum) {
    for (const auto& r : reps) {
      if (r.cols() != active.num_classes) {
        throw ConfigError("sum head: representation width " + std::to_string(r.cols()) +
                          " must equal num_classes " + std::to_string(active.num_classes));
      }
    }
    return merge_untrainable(reps, labels);
  }
  return merge_trainable(reps, labels, active.head);
}

// ---------------------------------------------------------------------------
// One round

struct RoundMessages {
  std::vector<SampleId> batch_indices;
  std::vector<Matrix> up;    // as received by the active party
  std::vector<Matrix> down;  // as sent by the active party
};

struct RoundResult {
  double loss = 0.0;
  RoundMessages messages;
};

inline void check_blocks(const Federation& fed, std::span<const Matrix> blocks) {
  if (blocks.size() != fed.parties.size()) {
    throw ConfigError("federation has " + std::to_string(fed.parties.size()) +
                      " passive parties but " + std::to_string(blocks.size()) +
                      " feature blocks were supplied");
  }
}

// Runs one training round over `batch` (ids into every feature block and
// into the active party's labels):
//   passive forward -> PassiveUp -> merge and head update -> ActiveDown ->
//   PassiveApply -> passive update.
// Down messages carry per-sample gradients; each party averages over the
// batch when forming its parameter gradient.
inline RoundResult run_round(Federation& fed, std::span<const Matrix> blocks,
                             std::span<const SampleId> batch, const InterceptorStack& stack,
                             std::size_t round = 0) {
  check_blocks(fed, blocks);
  if (batch.empty()) throw ConfigError("run_round: empty batch");
  const std::size_t n = batch.size();
  const std::size_t parties = fed.parties.size();

  std::vector<ForwardTrace> traces;
  traces.reserve(parties);
  RoundResult result;
  result.messages.batch_indices.assign(batch.begin(), batch.end());
  result.messages.up.reserve(parties);
  for (std::size_t k = 0; k < parties; ++k) {
    traces.push_back(forward_trace(fed.parties[k].model, gather_rows(blocks[k], batch)));
    InterceptContext ctx{Site::kPassiveUp, k, batch, round, Phase::kTrain};
    result.messages.up.push_back(stack.apply(traces.back().output(), ctx));
  }

  std::vector<Label> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (batch[i] >= fed.active.labels.size()) {
      throw DataError("run_round: sample id " + std::to_string(batch[i]) + " has no label");
    }
    labels[i] = fed.active.labels[batch[i]];
  }
  auto merged = merge(fed.active, result.messages.up, labels);
  result.loss = merged.loss;
  if (fed.active.head_kind == HeadKind::kTrainable) {
    sgd_step(fed.active.head, merged.head_grads, fed.active.optimizer);
  }

  result.messages.down.reserve(parties);
  for (std::size_t k = 0; k < parties; ++k) {
    InterceptContext ctx{Site::kActiveDown, k, batch, round, Phase::kTrain};
    Matrix down = stack.apply(std::move(merged.party_grads[k]), ctx);
    if (!down.same_shape(result.messages.up[k])) {
      throw ProtocolError("down message for party " + std::to_string(k) + " is " + down.shape() +
                          " but the up message was " + result.messages.up[k].shape());
    }
    result.messages.down.push_back(std::move(down));
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t k = 0; k < parties; ++k) {
    InterceptContext ctx{Site::kPassiveApply, k, batch, round, Phase::kTrain};
    Matrix applied = stack.apply(result.messages.down[k], ctx);
    auto grads = backward(fed.parties[k].model, traces[k], applied, false);
    grads *= inv_n;
    sgd_step(fed.parties[k].model, grads, fed.parties[k].optimizer);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Prediction

// Merged output (logits) for per-party feature rows. Only interceptors not
// flagged train-only run here.
inline Matrix predict_logits(const Federation& fed, std::span<const Matrix> features,
                             const InterceptorStack* stack = nullptr,
                             std::span<const SampleId> ids = {}) {
  check_blocks(fed, features);
  std::vector<Matrix> reps;
  reps.reserve(features.size());
  for (std::size_t k = 0; k < features.size(); ++k) {
    Matrix h = forward(fed.parties[k].model, features[k]);
    if (stack) h = stack->apply(std::move(h), {Site::kPassiveUp, k, ids, 0, Phase::kPredict});
    reps.push_back(std::move(h));
  }
  if (fed.active.head_kind == HeadKind::kSum) {
    Matrix sum = reps.front();
    for (std::size_t k = 1; k < reps.size(); ++k) sum = std::move(sum) + reps[k];
    return sum;
  }
  return forward(fed.active.head, hconcat(reps));
}

inline std::vector<Label> predict(const Federation& fed, std::span<const Matrix> features,
                                  const InterceptorStack* stack = nullptr,
                                  std::span<const SampleId> ids = {}) {
  Matrix logits = predict_logits(fed, features, stack, ids);
  std::vector<Label> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = argmax(logits.row(r));
  return out;
}

}  // namespace vflbd

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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vflbd/nn.hpp"
#include "vflbd/protocol.hpp"
#include "vflbd/rng.hpp"
#include "vflbd/tensor.hpp"

namespace vflbd {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Inputs whose ReLU pre-activations come closer than this to zero are
  // resampled, since the central difference straddles the kink there.
  double kink_margin = 1e-3;
  int max_resamples = 200;
};

struct GradcheckReport {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

// Central difference of `loss` w.r.t. `param`, restoring it afterwards.
inline double central_difference(double& param, double step, const std::function<double()>& loss) {
  const double saved = param;
  param = saved + step;
  const double up = loss();
  param = saved - step;
  const double down = loss();
  param = saved;
  return (up - down) / (2.0 * step);
}

inline void record(GradcheckReport& rep, double analytic, double numeric, double tol) {
  const double err = relative_error(analytic, numeric);
  rep.max_rel_error = std::max(rep.max_rel_error, err);
  ++rep.checked;
  if (!(err <= tol)) rep.passed = false;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = d(rng);
  return m;
}

inline Matrix pre_activation(const DenseLayer& layer, const Matrix& input) {
  DenseLayer linear{layer.weights, layer.bias, Activation::kIdentity};
  return dense_forward(linear, input);
}

inline bool clear_of_kinks(const Sequential& net, const Matrix& input, double margin) {
  Matrix x = input;
  for (const auto& layer : net.layers) {
    if (layer.activation == Activation::kRelu) {
      const Matrix z = pre_activation(layer, x);
      for (double v : z.values()) {
        if (std::abs(v) < margin) return false;
      }
    }
    x = dense_forward(layer, x);
  }
  return true;
}

// Random dense layer against L = sum(R .* forward(x)) for a random R.
inline GradcheckReport check_dense_layer(std::size_t in, std::size_t out, Activation act,
                                         std::size_t batch, Rng& rng,
                                         const GradcheckOptions& opt = {}) {
  GradcheckReport rep;
  rep.name = "dense " + std::to_string(in) + "x" + std::to_string(out) + " " + to_string(act);
  DenseLayer layer = DenseLayer::glorot(in, out, act, rng);
  std::normal_distribution<double> bias(0.0, 0.1);
  for (double& b : layer.bias) b = bias(rng);
  Sequential wrap{{layer}};
  Matrix input = random_matrix(batch, in, rng);
  for (int i = 0; i < opt.max_resamples && !clear_of_kinks(wrap, input, opt.kink_margin); ++i) {
    input = random_matrix(batch, in, rng);
  }
  const Matrix upstream = random_matrix(batch, out, rng);
  auto loss = [&] {
    Matrix y = dense_forward(layer, input);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y.values()[i] * upstream.values()[i];
    return acc;
  };
  auto grads = dense_backward(layer, input, upstream);
  for (std::size_t i = 0; i < layer.weights.size(); ++i) {
    record(rep, grads.params.weights.values()[i],
           central_difference(layer.weights.values()[i], opt.step, loss), opt.tolerance);
  }
  for (std::size_t j = 0; j < layer.bias.size(); ++j) {
    record(rep, grads.params.bias[j], central_difference(layer.bias[j], opt.step, loss),
           opt.tolerance);
  }
  for (std::size_t i = 0; i < input.size(); ++i) {
    record(rep, grads.input_grad.values()[i],
           central_difference(input.values()[i], opt.step, loss), opt.tolerance);
  }
  return rep;
}

struct NetworkGradients {
  double loss = 0.0;
  std::vector<SequentialGrads> parties;
  SequentialGrads head;
};

// Batch-mean cross-entropy of the whole federated network and its exact
// gradient w.r.t. every parameter, with no interceptors in the way.
inline NetworkGradients network_gradients(const Federation& fed, std::span<const Matrix> features,
                                          std::span<const Label> labels) {
  std::vector<ForwardTrace> traces;
  std::vector<Matrix> reps;
  for (std::size_t k = 0; k < fed.parties.size(); ++k) {
    traces.push_back(forward_trace(fed.parties[k].model, features[k]));
    reps.push_back(traces.back().output());
  }
  auto merged = merge(fed.active, reps, labels);
  NetworkGradients out;
  out.loss = merged.loss;
  const double inv_n = 1.0 / static_cast<double>(labels.size());
  for (std::size_t k = 0; k < fed.parties.size(); ++k) {
    out.parties.push_back(backward(fed.parties[k].model, traces[k], merged.party_grads[k], false));
    out.parties.back() *= inv_n;
  }
  out.head = std::move(merged.head_grads);
  return out;
}

inline double network_loss(const Federation& fed, std::span<const Matrix> features,
                           std::span<const Label> labels) {
  return softmax_ce_grad(predict_logits(fed, features), labels).loss;
}

// Two passive parties plus either head, checked parameter by parameter.
inline GradcheckReport check_network(HeadKind head, Rng& rng, const GradcheckOptions& opt = {}) {
  GradcheckReport rep;
  rep.name = std::string("two-party network, ") + to_string(head) + " head";
  Architecture arch;
  arch.head = head;
  arch.party_inputs = {5, 4};
  arch.num_classes = 3;
  arch.passive_hidden = 6;
  arch.representation_width = 4;
  arch.head_hidden = 5;
  const std::size_t batch = 7;
  std::vector<Label> labels(batch);
  std::uniform_int_distribution<std::size_t> pick(0, arch.num_classes - 1);
  for (auto& y : labels) y = pick(rng);
  Federation fed = build_federation(arch, labels, SgdState{}, rng);
  std::normal_distribution<double> bias(0.0, 0.1);
  for (auto& p : fed.parties) {
    for (auto& l : p.model.layers) {
      for (double& b : l.bias) b = bias(rng);
    }
  }
  for (auto& l : fed.active.head.layers) {
    for (double& b : l.bias) b = bias(rng);
  }

  std::vector<Matrix> features;
  auto clear = [&] {
    std::vector<Matrix> reps;
    for (std::size_t k = 0; k < fed.parties.size(); ++k) {
      if (!clear_of_kinks(fed.parties[k].model, features[k], opt.kink_margin)) return false;
      reps.push_back(forward(fed.parties[k].model, features[k]));
    }
    return head == HeadKind::kSum || clear_of_kinks(fed.active.head, hconcat(reps), opt.kink_margin);
  };
  for (int attempt = 0; attempt < opt.max_resamples; ++attempt) {
    features.clear();
    for (std::size_t in : arch.party_inputs) features.push_back(random_matrix(batch, in, rng));
    if (clear()) break;
  }

  auto grads = network_gradients(fed, features, labels);
  auto loss = [&] { return network_loss(fed, features, labels); };
  auto check_stack = [&](Sequential& net, const SequentialGrads& g) {
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      auto& layer = net.layers[l];
      for (std::size_t i = 0; i < layer.weights.size(); ++i) {
        record(rep, g.layers[l].weights.values()[i],
               central_difference(layer.weights.values()[i], opt.step, loss), opt.tolerance);
      }
      for (std::size_t j = 0; j < layer.bias.size(); ++j) {
        record(rep, g.layers[l].bias[j], central_difference(layer.bias[j], opt.step, loss),
               opt.tolerance);
      }
    }
  };
  for (std::size_t k = 0; k < fed.parties.size(); ++k) check_stack(fed.parties[k].model, grads.parties[k]);
  if (head == HeadKind::kTrainable) check_stack(fed.active.head, grads.head);
  return rep;
}

// Ten random layer shapes plus both full networks.
inline std::vector<GradcheckReport> run_gradcheck_suite(std::uint64_t seed,
                                                        const GradcheckOptions& opt = {}) {
  Rng rng = make_rng(seed, Stream::kInit);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  std::vector<GradcheckReport> out;
  for (int i = 0; i < 10; ++i) {
    const std::size_t in = dim(rng);
    const std::size_t outd = dim(rng);
    const std::size_t batch = dim(rng);
    const Activation act = i % 2 == 0 ? Activation::kRelu : Activation::kIdentity;
    out.push_back(check_dense_layer(in, outd, act, batch, rng, opt));
  }
  out.push_back(check_network(HeadKind::kSum, rng, opt));
  out.push_back(check_network(HeadKind::kTrainable, rng, opt));
  return out;
}

}  // namespace vflbd

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

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vflbd/errors.hpp"
#include "vflbd/rng.hpp"
#include "vflbd/tensor.hpp"

namespace vflbd {

enum class Activation { kIdentity, kRelu };

inline const char* to_string(Activation a) {
  return a == Activation::kRelu ? "relu" : "identity";
}

// Fully connected layer: activation(input * weights + bias).
struct DenseLayer {
  Matrix weights;  // in x out
  std::vector<double> bias;
  Activation activation = Activation::kIdentity;

  std::size_t in_dim() const noexcept { return weights.rows(); }
  std::size_t out_dim() const noexcept { return weights.cols(); }

  // Glorot-uniform weights, zero bias.
  static DenseLayer glorot(std::size_t in, std::size_t out, Activation act, Rng& rng) {
    if (in == 0 || out == 0) throw ConfigError("DenseLayer: zero dimension");
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseLayer layer{Matrix(in, out), std::vector<double>(out, 0.0), act};
    for (double& w : layer.weights.values()) w = dist(rng);
    return layer;
  }
};

struct DenseGrads {
  Matrix weights;
  std::vector<double> bias;

  DenseGrads& operator*=(double s) {
    for (double& v : weights.values()) v *= s;
    for (double& v : bias) v *= s;
    return *this;
  }
};

struct DenseBackward {
  DenseGrads params;
  Matrix input_grad;  // empty when not requested
};

inline void check_layer(const DenseLayer& layer) {
  if (layer.bias.size() != layer.out_dim()) {
    throw ConfigError("DenseLayer: bias length " + std::to_string(layer.bias.size()) +
                      " != out_dim " + std::to_string(layer.out_dim()));
  }
}

inline Matrix dense_forward(const DenseLayer& layer, const Matrix& input) {
  check_layer(layer);
  if (input.cols() != layer.in_dim()) {
    throw ConfigError("dense_forward: input " + input.shape() + " vs layer in_dim " +
                      std::to_string(layer.in_dim()));
  }
  Matrix out = matmul(input, layer.weights);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] += layer.bias[j];
      if (layer.activation == Activation::kRelu && row[j] < 0.0) row[j] = 0.0;
    }
  }
  return out;
}

// Backward pass given the cached forward output. ReLU passes gradient only
// where the output is strictly positive.
inline DenseBackward dense_backward(const DenseLayer& layer, const Matrix& input,
                                    const Matrix& output, const Matrix& upstream_grad,
                                    bool want_input_grad = true) {
  check_layer(layer);
  if (input.cols() != layer.in_dim() || !output.same_shape(upstream_grad) ||
      output.rows() != input.rows() || output.cols() != layer.out_dim()) {
    throw ConfigError("dense_backward: input " + input.shape() + ", output " + output.shape() +
                      ", upstream " + upstream_grad.shape() + " for layer " +
                      Matrix::shape_string(layer.in_dim(), layer.out_dim()));
  }
  Matrix delta = upstream_grad;
  if (layer.activation == Activation::kRelu) {
    auto d = delta.values();
    auto o = output.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(o[i] > 0.0)) d[i] = 0.0;
    }
  }
  DenseBackward out;
  out.params.weights = matmul_at_b(input, delta);
  out.params.bias.assign(layer.out_dim(), 0.0);
  for (std::size_t r = 0; r < delta.rows(); ++r) {
    auto row = delta.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) out.params.bias[j] += row[j];
  }
  if (want_input_grad) out.input_grad = matmul_a_bt(delta, layer.weights);
  return out;
}

inline DenseBackward dense_backward(const DenseLayer& layer, const Matrix& input,
                                    const Matrix& upstream_grad) {
  return dense_backward(layer, input, dense_forward(layer, input), upstream_grad, true);
}

struct SoftmaxCe {
  double loss = 0.0;  // mean over rows
  Matrix grad;        // per-row gradient of that row's own loss
};

// Row i of the returned gradient is softmax(logits_i) - onehot(labels_i), the
// derivative of the i-th sample's cross-entropy. The true-label entry is
// computed as minus the mass on the other classes so it stays strictly
// negative even when the softmax saturates.
inline SoftmaxCe softmax_ce_grad(const Matrix& logits, std::span<const Label> labels) {
  if (labels.size() != logits.rows()) {
    throw ConfigError("softmax_ce_grad: " + std::to_string(labels.size()) + " labels for " +
                      logits.shape() + " logits");
  }
  SoftmaxCe out{0.0, Matrix(logits.rows(), logits.cols())};
  std::vector<double> e(logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const Label y = labels[r];
    if (y >= logits.cols()) {
      throw DataError("softmax_ce_grad: label " + std::to_string(y) + " outside [0," +
                      std::to_string(logits.cols()) + ")");
    }
    auto z = logits.row(r);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double total = 0.0;
    double others = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      e[j] = std::exp(z[j] - mx);
      total += e[j];
      if (j != y) others += e[j];
    }
    auto g = out.grad.row(r);
    for (std::size_t j = 0; j < z.size(); ++j) g[j] = e[j] / total;
    g[y] = -others / total;
    out.loss += std::log(total) - (z[y] - mx);
  }
  if (logits.rows() > 0) out.loss /= static_cast<double>(logits.rows());
  return out;
}

inline std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> s(z.begin(), z.end());
  if (s.empty()) return s;
  const double mx = *std::max_element(s.begin(), s.end());
  double total = 0.0;
  for (double& v : s) total += (v = std::exp(v - mx));
  for (double& v : s) v /= total;
  return s;
}

// Lowest index wins ties.
inline Label argmax(std::span<const double> row) {
  Label best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

struct SgdState {
  double learning_rate = 0.01;
  double l2_lambda = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("SgdState: learning rate must be positive");
    }
    if (!(l2_lambda >= 0.0) || !std::isfinite(l2_lambda)) {
      throw ConfigError("SgdState: l2 lambda must be non-negative");
    }
  }
};

// theta <- theta - lr * (grad + lambda * theta)
inline void sgd_step(DenseLayer& layer, const DenseGrads& grads, const SgdState& state) {
  state.validate();
  if (!grads.weights.same_shape(layer.weights) || grads.bias.size() != layer.bias.size()) {
    throw ConfigError("sgd_step: gradient shape does not match layer");
  }
  const double lr = state.learning_rate;
  const double lambda = state.l2_lambda;
  auto w = layer.weights.values();
  auto gw = grads.weights.values();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (gw[i] + lambda * w[i]);
  for (std::size_t j = 0; j < layer.bias.size(); ++j) {
    layer.bias[j] -= lr * (grads.bias[j] + lambda * layer.bias[j]);
  }
}

// A stack of dense layers applied in order.
struct Sequential {
  std::vector<DenseLayer> layers;

  bool empty() const noexcept { return layers.empty(); }
  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }
};

// activations[0] is the input, activations[i + 1] the output of layer i.
struct ForwardTrace {
  std::vector<Matrix> activations;
  const Matrix& output() const { return activations.back(); }
};

inline ForwardTrace forward_trace(const Sequential& net, Matrix input) {
  ForwardTrace trace;
  trace.activations.reserve(net.layers.size() + 1);
  trace.activations.push_back(std::move(input));
  for (const auto& layer : net.layers) {
    trace.activations.push_back(dense_forward(layer, trace.activations.back()));
  }
  return trace;
}

inline Matrix forward(const Sequential& net, const Matrix& input) {
  if (net.empty()) return input;
  Matrix x = dense_forward(net.layers.front(), input);
  for (std::size_t i = 1; i < net.layers.size(); ++i) x = dense_forward(net.layers[i], x);
  return x;
}

struct SequentialGrads {
  std::vector<DenseGrads> layers;
  Matrix input_grad;  // empty unless requested

  SequentialGrads& operator*=(double s) {
    for (auto& g : layers) g *= s;
    return *this;
  }
};

inline SequentialGrads backward(const Sequential& net, const ForwardTrace& trace,
                                const Matrix& upstream_grad, bool want_input_grad) {
  if (trace.activations.size() != net.layers.size() + 1) {
    throw ConfigError("backward: trace does not belong to this network");
  }
  SequentialGrads out;
  out.layers.resize(net.layers.size());
  Matrix grad = upstream_grad;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const bool need_input = want_input_grad || i > 0;
    auto step = dense_backward(net.layers[i], trace.activations[i], trace.activations[i + 1],
                               grad, need_input);
    out.layers[i] = std::move(step.params);
    grad = std::move(step.input_grad);
  }
  if (want_input_grad) out.input_grad = std::move(grad);
  return out;
}

inline void sgd_step(Sequential& net, const SequentialGrads& grads, const SgdState& state) {
  if (grads.layers.size() != net.layers.size()) {
    throw ConfigError("sgd_step: gradient stack depth does not match network");
  }
  for (std::size_t i = 0; i < net.layers.size(); ++i) sgd_step(net.layers[i], grads.layers[i], state);
}

}  // namespace vflbd

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

// Test-only reference trainer: the whole federated network written as one
// ordinary feed-forward net over the concatenated feature vector, trained by
// plain backprop. Passive layers become block-diagonal layers whose
// off-diagonal blocks are pinned to zero; under the sum head the last passive
// layer becomes one layer over the stacked party weights. It shares no code
// with the protocol besides the Federation it is initialised from.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "vflbd/protocol.hpp"

namespace vflbd::oracle {

struct Layer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> w;     // in x out, row-major
  std::vector<char> mask;    // trainable entries of w
  std::vector<std::vector<double>> biases;  // forward uses their sum
  bool relu = false;
};

class MonolithicNet {
 public:
  explicit MonolithicNet(const Federation& fed) {
    const std::size_t parties = fed.parties.size();
    const std::size_t depth = fed.parties.front().model.layers.size();
    const bool sum_head = fed.active.head_kind == HeadKind::kSum;
    const std::size_t block_layers = sum_head ? depth - 1 : depth;

    for (std::size_t l = 0; l < block_layers; ++l) {
      Layer L;
      for (const auto& p : fed.parties) {
        L.in += p.model.layers[l].in_dim();
        L.out += p.model.layers[l].out_dim();
      }
      L.w.assign(L.in * L.out, 0.0);
      L.mask.assign(L.in * L.out, 0);
      L.biases.assign(1, {});
      L.relu = fed.parties.front().model.layers[l].activation == Activation::kRelu;
      std::size_t r0 = 0, c0 = 0;
      for (const auto& p : fed.parties) {
        const auto& src = p.model.layers[l];
        for (std::size_t i = 0; i < src.in_dim(); ++i) {
          for (std::size_t j = 0; j < src.out_dim(); ++j) {
            L.w[(r0 + i) * L.out + c0 + j] = src.weights(i, j);
            L.mask[(r0 + i) * L.out + c0 + j] = 1;
          }
        }
        L.biases[0].insert(L.biases[0].end(), src.bias.begin(), src.bias.end());
        r0 += src.in_dim();
        c0 += src.out_dim();
      }
      layers_.push_back(std::move(L));
    }

    if (sum_head) {
      Layer L;
      L.out = fed.parties.front().model.layers.back().out_dim();
      for (const auto& p : fed.parties) L.in += p.model.layers.back().in_dim();
      L.relu = false;
      for (const auto& p : fed.parties) {
        const auto& src = p.model.layers.back();
        for (std::size_t i = 0; i < src.in_dim(); ++i) {
          for (std::size_t j = 0; j < src.out_dim(); ++j) L.w.push_back(src.weights(i, j));
        }
        L.biases.push_back(src.bias);
      }
      L.mask.assign(L.w.size(), 1);
      layers_.push_back(std::move(L));
    } else {
      for (const auto& src : fed.active.head.layers) {
        Layer L;
        L.in = src.in_dim();
        L.out = src.out_dim();
        L.w.assign(src.weights.values().begin(), src.weights.values().end());
        L.mask.assign(L.w.size(), 1);
        L.biases.push_back(src.bias);
        L.relu = src.activation == Activation::kRelu;
        layers_.push_back(std::move(L));
      }
    }
    (void)parties;
  }

  // One SGD step on mean cross-entropy over the given rows.
  void train_step(const std::vector<std::vector<double>>& x, std::span<const Label> y, double lr) {
    const std::size_t n = x.size();
    std::vector<std::vector<std::vector<double>>> acts{x};
    for (const auto& L : layers_) acts.push_back(apply(L, acts.back()));

    std::vector<std::vector<double>> delta = acts.back();
    for (std::size_t r = 0; r < n; ++r) {
      auto& z = delta[r];
      double mx = z[0];
      for (double v : z) mx = std::max(mx, v);
      double total = 0.0;
      for (double& v : z) total += (v = std::exp(v - mx));
      for (double& v : z) v /= total;
      z[y[r]] -= 1.0;
      for (double& v : z) v /= static_cast<double>(n);
    }

    for (std::size_t li = layers_.size(); li-- > 0;) {
      Layer& L = layers_[li];
      const auto& out = acts[li + 1];
      const auto& in = acts[li];
      if (L.relu) {
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < L.out; ++j) {
            if (!(out[r][j] > 0.0)) delta[r][j] = 0.0;
          }
        }
      }
      std::vector<double> gw(L.in * L.out, 0.0), gb(L.out, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t i = 0; i < L.in; ++i) {
          for (std::size_t j = 0; j < L.out; ++j) gw[i * L.out + j] += in[r][i] * delta[r][j];
        }
        for (std::size_t j = 0; j < L.out; ++j) gb[j] += delta[r][j];
      }
      std::vector<std::vector<double>> prev(n, std::vector<double>(L.in, 0.0));
      if (li > 0) {
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t i = 0; i < L.in; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < L.out; ++j) acc += delta[r][j] * L.w[i * L.out + j];
            prev[r][i] = acc;
          }
        }
      }
      for (std::size_t k = 0; k < L.w.size(); ++k) {
        if (L.mask[k]) L.w[k] -= lr * gw[k];
      }
      for (auto& b : L.biases) {
        for (std::size_t j = 0; j < L.out; ++j) b[j] -= lr * gb[j];
      }
      delta = std::move(prev);
    }
  }

  std::vector<std::vector<double>> logits(const std::vector<std::vector<double>>& x) const {
    auto a = x;
    for (const auto& L : layers_) a = apply(L, a);
    return a;
  }

  // Largest absolute difference between these parameters and the federation's.
  double max_param_diff(const Federation& fed) const {
    double worst = 0.0;
    auto upd = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
    const bool sum_head = fed.active.head_kind == HeadKind::kSum;
    const std::size_t depth = fed.parties.front().model.layers.size();
    const std::size_t block_layers = sum_head ? depth - 1 : depth;
    for (std::size_t l = 0; l < block_layers; ++l) {
      const Layer& L = layers_[l];
      std::size_t r0 = 0, c0 = 0;
      for (const auto& p : fed.parties) {
        const auto& src = p.model.layers[l];
        for (std::size_t i = 0; i < src.in_dim(); ++i) {
          for (std::size_t j = 0; j < src.out_dim(); ++j) upd(L.w[(r0 + i) * L.out + c0 + j], src.weights(i, j));
        }
        for (std::size_t j = 0; j < src.out_dim(); ++j) upd(L.biases[0][c0 + j], src.bias[j]);
        r0 += src.in_dim();
        c0 += src.out_dim();
      }
    }
    if (sum_head) {
      const Layer& L = layers_.back();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < fed.parties.size(); ++k) {
        const auto& src = fed.parties[k].model.layers.back();
        for (std::size_t i = 0; i < src.in_dim(); ++i) {
          for (std::size_t j = 0; j < src.out_dim(); ++j) upd(L.w[offset + i * L.out + j], src.weights(i, j));
        }
        offset += src.in_dim() * src.out_dim();
        for (std::size_t j = 0; j < src.out_dim(); ++j) upd(L.biases[k][j], src.bias[j]);
      }
    } else {
      for (std::size_t h = 0; h < fed.active.head.layers.size(); ++h) {
        const Layer& L = layers_[block_layers + h];
        const auto& src = fed.active.head.layers[h];
        for (std::size_t k = 0; k < L.w.size(); ++k) upd(L.w[k], src.weights.values()[k]);
        for (std::size_t j = 0; j < L.out; ++j) upd(L.biases[0][j], src.bias[j]);
      }
    }
    return worst;
  }

 private:
  static std::vector<std::vector<double>> apply(const Layer& L, const std::vector<std::vector<double>>& x) {
    std::vector<std::vector<double>> out(x.size(), std::vector<double>(L.out, 0.0));
    for (std::size_t r = 0; r < x.size(); ++r) {
      for (std::size_t j = 0; j < L.out; ++j) {
        double acc = 0.0;
        for (const auto& b : L.biases) acc += b[j];
        for (std::size_t i = 0; i < L.in; ++i) acc += x[r][i] * L.w[i * L.out + j];
        out[r][j] = L.relu && acc < 0.0 ? 0.0 : acc;
      }
    }
    return out;
  }

  std::vector<Layer> layers_;
};

// Concatenated feature rows for the given sample ids.
inline std::vector<std::vector<double>> concat_rows(std::span<const Matrix> blocks,
                                                    std::span<const SampleId> ids) {
  std::vector<std::vector<double>> out;
  for (SampleId id : ids) {
    std::vector<double> row;
    for (const auto& b : blocks) row.insert(row.end(), b.row(id).begin(), b.row(id).end());
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace vflbd::oracle

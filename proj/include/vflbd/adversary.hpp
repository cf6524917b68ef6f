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
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vflbd/errors.hpp"
#include "vflbd/protocol.hpp"
#include "vflbd/rng.hpp"
#include "vflbd/tensor.hpp"

namespace vflbd {

using IdSet = std::set<SampleId>;

// Parameters of a malicious passive party.
struct AttackConfig {
  std::size_t malicious_party = 1;
  Label target_label = 0;
  double amplify_ratio = 10.0;
  IdSet target_ids;  // clean samples known to carry target_label
  IdSet poison_ids;  // triggered samples the backdoor should flip
  double blur_variance = 1e-6;

  void validate(std::size_t num_samples, std::size_t num_classes, std::size_t num_parties) const {
    if (malicious_party >= num_parties) {
      throw ConfigError("attack: malicious party " + std::to_string(malicious_party) +
                        " does not exist");
    }
    if (target_label >= num_classes) throw ConfigError("attack: target label out of range");
    if (!(amplify_ratio > 0.0) || !std::isfinite(amplify_ratio)) {
      throw ConfigError("attack: amplify ratio must be positive");
    }
    if (!(blur_variance >= 0.0) || !std::isfinite(blur_variance)) {
      throw ConfigError("attack: blur variance must be non-negative");
    }
    if (target_ids.empty()) throw ConfigError("attack: at least one target sample is required");
    for (SampleId id : target_ids) {
      if (id >= num_samples) throw ConfigError("attack: target id out of range");
      if (poison_ids.contains(id)) {
        throw ConfigError("attack: sample " + std::to_string(id) + " is both target and poison");
      }
    }
    if (!poison_ids.empty() && *poison_ids.rbegin() >= num_samples) {
      throw ConfigError("attack: poison id out of range");
    }
  }
};

struct RecordedGradient {
  std::vector<double> g_rec;
  bool seen = false;
};

// ---------------------------------------------------------------------------
// Label inference

// Under a softmax cross-entropy sum head the true-label entry of a received
// gradient row is the only negative one. Rows with zero or several negative
// entries yield nullopt.
inline std::optional<Label> infer_label(std::span<const double> row) {
  std::optional<Label> found;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (row[j] < 0.0) {
      if (found) return std::nullopt;
      found = j;
    }
  }
  return found;
}

inline std::vector<std::optional<Label>> infer_labels(const Matrix& down) {
  std::vector<std::optional<Label>> out(down.rows());
  for (std::size_t r = 0; r < down.rows(); ++r) out[r] = infer_label(down.row(r));
  return out;
}

// ---------------------------------------------------------------------------
// Direct gradient substitution

struct Substitution {
  Matrix grad;
  std::size_t replaced = 0;
  std::size_t skipped = 0;  // rows whose label could not be read off
};

// Rewrites one row in place as the gradient it would have been had the label
// been tau. The softmax is reconstructed from the row itself: S_j = g_j, except
// S_y = g_y + 1 at the inferred label y.
inline bool substitute_row(std::span<double> row, Label tau) {
  if (tau >= row.size()) throw ConfigError("substitute_gradient: target label out of range");
  auto y = infer_label(row);
  if (!y) return false;
  row[*y] += 1.0;
  row[tau] -= 1.0;
  return true;
}

inline Substitution substitute_gradient(Matrix down, Label tau, std::span<const std::size_t> rows) {
  Substitution out;
  for (std::size_t r : rows) {
    if (r >= down.rows()) throw ConfigError("substitute_gradient: row out of range");
    if (substitute_row(down.row(r), tau)) {
      ++out.replaced;
    } else {
      ++out.skipped;
    }
  }
  out.grad = std::move(down);
  return out;
}

inline Substitution substitute_gradient(Matrix down, Label tau) {
  std::vector<std::size_t> rows(down.rows());
  for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = r;
  return substitute_gradient(std::move(down), tau, rows);
}

// ---------------------------------------------------------------------------
// Gradient replacement

struct Replacement {
  Matrix grad;
  std::size_t replaced = 0;
  std::size_t skipped_poison = 0;  // poison rows met before any target row
};

// Walks the batch in row order. Target rows overwrite g_rec with the row as
// received; poison rows become amplify_ratio * g_rec once g_rec exists.
inline Replacement gradient_replacement(const Matrix& down, std::span<const SampleId> batch_ids,
                                        const AttackConfig& cfg, RecordedGradient& rec) {
  if (batch_ids.size() != down.rows()) {
    throw ConfigError("gradient_replacement: " + std::to_string(batch_ids.size()) +
                      " ids for " + down.shape() + " gradient");
  }
  Replacement out{down, 0, 0};
  for (std::size_t i = 0; i < batch_ids.size(); ++i) {
    const SampleId id = batch_ids[i];
    if (cfg.target_ids.contains(id)) {
      auto row = down.row(i);
      rec.g_rec.assign(row.begin(), row.end());
      rec.seen = true;
    }
    if (cfg.poison_ids.contains(id)) {
      if (!rec.seen) {
        ++out.skipped_poison;
        continue;
      }
      if (rec.g_rec.size() != down.cols()) {
        throw ProtocolError("gradient_replacement: recorded gradient width changed");
      }
      auto dst = out.grad.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = cfg.amplify_ratio * rec.g_rec[j];
      ++out.replaced;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activation blurring

// Poison rows are replaced by fresh N(0, variance) vectors.
inline Matrix activation_blur(Matrix up, std::span<const SampleId> batch_ids,
                              const AttackConfig& cfg, Rng& rng) {
  if (batch_ids.size() != up.rows()) {
    throw ConfigError("activation_blur: " + std::to_string(batch_ids.size()) + " ids for " +
                      up.shape() + " activations");
  }
  if (!(cfg.blur_variance >= 0.0)) throw ConfigError("activation_blur: negative variance");
  std::normal_distribution<double> noise(0.0, std::sqrt(cfg.blur_variance));
  for (std::size_t i = 0; i < batch_ids.size(); ++i) {
    if (!cfg.poison_ids.contains(batch_ids[i])) continue;
    for (double& v : up.row(i)) v = cfg.blur_variance > 0.0 ? noise(rng) : 0.0;
  }
  return up;
}

// ---------------------------------------------------------------------------
// Interceptors

class GradientReplacementAttack final : public Interceptor {
 public:
  explicit GradientReplacementAttack(AttackConfig cfg) : cfg_(std::move(cfg)) {}

  std::string name() const override { return "gradient-replacement"; }

  Matrix intercept(Matrix message, const InterceptContext& ctx) override {
    auto r = gradient_replacement(message, ctx.sample_ids, cfg_, rec_);
    replaced_ += r.replaced;
    skipped_poison_ += r.skipped_poison;
    return std::move(r.grad);
  }

  const RecordedGradient& recorded() const noexcept { return rec_; }
  std::size_t replaced() const noexcept { return replaced_; }
  std::size_t skipped_poison_events() const noexcept { return skipped_poison_; }

 private:
  AttackConfig cfg_;
  RecordedGradient rec_;
  std::size_t replaced_ = 0;
  std::size_t skipped_poison_ = 0;
};

class LabelSubstitutionAttack final : public Interceptor {
 public:
  explicit LabelSubstitutionAttack(AttackConfig cfg) : cfg_(std::move(cfg)) {}

  std::string name() const override { return "gradient-substitution"; }

  Matrix intercept(Matrix message, const InterceptContext& ctx) override {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ctx.sample_ids.size(); ++i) {
      if (cfg_.poison_ids.contains(ctx.sample_ids[i])) rows.push_back(i);
    }
    auto s = substitute_gradient(std::move(message), cfg_.target_label, rows);
    replaced_ += s.replaced;
    skipped_ += s.skipped;
    return std::move(s.grad);
  }

  std::size_t replaced() const noexcept { return replaced_; }
  std::size_t skipped() const noexcept { return skipped_; }

 private:
  AttackConfig cfg_;
  std::size_t replaced_ = 0;
  std::size_t skipped_ = 0;
};

class ActivationBlurAttack final : public Interceptor {
 public:
  ActivationBlurAttack(AttackConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), rng_(make_rng(seed, Stream::kAttack)) {}

  std::string name() const override { return "activation-blur"; }
  bool train_only() const override { return true; }

  Matrix intercept(Matrix message, const InterceptContext& ctx) override {
    return activation_blur(std::move(message), ctx.sample_ids, cfg_, rng_);
  }

 private:
  AttackConfig cfg_;
  Rng rng_;
};

// Passive observer that reads labels off every gradient it receives.
class LabelInferenceProbe final : public Interceptor {
 public:
  struct Observation {
    SampleId id;
    std::optional<Label> inferred;
  };

  std::string name() const override { return "label-inference-probe"; }

  Matrix intercept(Matrix message, const InterceptContext& ctx) override {
    auto labels = infer_labels(message);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      observations_.push_back({ctx.sample_ids[i], labels[i]});
    }
    return message;
  }

  const std::vector<Observation>& observations() const noexcept { return observations_; }

 private:
  std::vector<Observation> observations_;
};

}  // namespace vflbd

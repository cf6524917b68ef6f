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
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vflbd/errors.hpp"
#include "vflbd/protocol.hpp"
#include "vflbd/rng.hpp"
#include "vflbd/tensor.hpp"

namespace vflbd {

enum class NoiseKind { kNone, kGaussian, kLaplacian };

struct NoiseSpec {
  NoiseKind kind = NoiseKind::kNone;
  double variance = 0.0;  // Laplacian uses scale sqrt(variance / 2)
};

// What a sparsification residual row is filed under. Batch position is the
// usual error-feedback setup (one residual per entry of the tensor the active
// party emits), so unsent mass from one sample rides out on whichever sample
// takes that slot next round. Sample keying returns it to its own sample.
enum class ResidualKey { kBatchPosition, kSample };

struct DefenseConfig {
  NoiseSpec noise;
  std::optional<double> clip_norm;
  double drop_rate = 0.0;  // 0 disables sparsification
  ResidualKey residual_key = ResidualKey::kBatchPosition;
  bool trainable_head = false;

  void validate() const {
    if (!(noise.variance >= 0.0) || !std::isfinite(noise.variance)) {
      throw ConfigError("defense: noise variance must be non-negative");
    }
    if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("defense: clip norm must be positive");
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
      throw ConfigError("defense: drop rate must lie in [0, 1)");
    }
  }
};

// Where a row's noise comes from. Seeding per (round, party, sample id)
// makes the noise follow the sample when batch rows are permuted.
struct NoiseKey {
  std::uint64_t seed = 0;
  std::uint64_t round = 0;
  std::uint64_t party = 0;
};

inline double sample_laplace(double scale, Rng& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  double x = u(rng);
  while (x == -0.5) x = u(rng);
  const double mag = -scale * std::log1p(-2.0 * std::abs(x));
  return x < 0.0 ? -mag : mag;
}

inline Matrix add_noise(Matrix down, const NoiseSpec& noise, std::span<const SampleId> ids,
                        const NoiseKey& key) {
  if (!(noise.variance >= 0.0)) throw ConfigError("add_noise: negative variance");
  if (noise.kind == NoiseKind::kNone || noise.variance == 0.0) return down;
  if (ids.size() != down.rows()) throw ConfigError("add_noise: id count does not match rows");
  const double sd = std::sqrt(noise.variance);
  const double scale = std::sqrt(noise.variance / 2.0);
  for (std::size_t r = 0; r < down.rows(); ++r) {
    Rng rng(derive_seed({key.seed, key.round, key.party, ids[r]}));
    std::normal_distribution<double> gauss(0.0, sd);
    for (double& v : down.row(r)) {
      v += noise.kind == NoiseKind::kGaussian ? gauss(rng) : sample_laplace(scale, rng);
    }
  }
  return down;
}

// Rows whose L2 norm exceeds clip_norm are rescaled onto the ball.
inline Matrix clip_rows(Matrix down, double clip_norm) {
  if (!(clip_norm > 0.0)) throw ConfigError("clip_rows: clip norm must be positive");
  for (std::size_t r = 0; r < down.rows(); ++r) {
    auto row = down.row(r);
    const double norm = row_norm(row);
    if (norm > clip_norm) {
      const double s = clip_norm / norm;
      for (double& v : row) v *= s;
    }
  }
  return down;
}

// Unsent gradient mass for one party, one row per key (see ResidualKey).
class ResidualStore {
 public:
  ResidualStore() = default;
  explicit ResidualStore(std::size_t width) : width_(width) {}

  std::size_t width() const noexcept { return width_; }

  std::span<double> row(SampleId id) {
    auto [it, inserted] = rows_.try_emplace(id);
    if (inserted) it->second.assign(width_, 0.0);
    return it->second;
  }

  // Zero row for ids never seen.
  std::vector<double> get(SampleId id) const {
    auto it = rows_.find(id);
    return it == rows_.end() ? std::vector<double>(width_, 0.0) : it->second;
  }

  std::size_t tracked() const noexcept { return rows_.size(); }
  void clear() { rows_.clear(); }

 private:
  std::size_t width_ = 0;
  std::unordered_map<SampleId, std::vector<double>> rows_;
};

inline std::size_t kept_entries(std::size_t total, double drop_rate) {
  const double k = std::ceil((1.0 - drop_rate) * static_cast<double>(total) - 1e-9);
  return std::min(total, static_cast<std::size_t>(std::max(0.0, k)));
}

// Adds the stored residual to the batch gradient, sends the largest
// ceil((1 - drop_rate) * entries) magnitudes over the whole matrix, and keeps
// everything else as residual. Ties go to the earlier entry in row-major order.
inline Matrix sparsify(const Matrix& down, std::span<const SampleId> ids, double drop_rate,
                       ResidualStore& store) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw ConfigError("sparsify: drop rate outside [0,1)");
  if (ids.size() != down.rows()) throw ConfigError("sparsify: id count does not match rows");
  if (store.width() != down.cols()) {
    throw ConfigError("sparsify: residual width " + std::to_string(store.width()) +
                      " vs gradient " + down.shape());
  }
  Matrix candidate = down;
  for (std::size_t r = 0; r < down.rows(); ++r) {
    auto res = store.row(ids[r]);
    auto c = candidate.row(r);
    for (std::size_t j = 0; j < c.size(); ++j) c[j] += res[j];
  }

  const auto values = candidate.values();
  const std::size_t keep = kept_entries(values.size(), drop_rate);
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto larger = [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(values[a]);
    const double mb = std::abs(values[b]);
    return ma != mb ? ma > mb : a < b;
  };
  if (keep < order.size()) {
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                     larger);
  }
  std::vector<char> sent(values.size(), 0);
  for (std::size_t i = 0; i < keep; ++i) sent[order[i]] = 1;

  Matrix out(down.rows(), down.cols());
  for (std::size_t r = 0; r < down.rows(); ++r) {
    auto res = store.row(ids[r]);
    for (std::size_t j = 0; j < down.cols(); ++j) {
      const std::size_t flat = r * down.cols() + j;
      if (sent[flat]) {
        out(r, j) = values[flat];
        res[j] = 0.0;
      } else {
        res[j] = values[flat];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Interceptors, all bound at ActiveDown

class ClipDefense final : public Interceptor {
 public:
  explicit ClipDefense(double clip_norm) : clip_norm_(clip_norm) {}
  std::string name() const override { return "clip"; }
  Matrix intercept(Matrix message, const InterceptContext&) override {
    return clip_rows(std::move(message), clip_norm_);
  }

 private:
  double clip_norm_;
};

class NoiseDefense final : public Interceptor {
 public:
  NoiseDefense(NoiseSpec noise, std::uint64_t seed)
      : noise_(noise), seed_(derive_seed({seed, static_cast<std::uint64_t>(Stream::kDefense)})) {}
  std::string name() const override { return "noise"; }
  Matrix intercept(Matrix message, const InterceptContext& ctx) override {
    return add_noise(std::move(message), noise_, ctx.sample_ids, {seed_, ctx.round, ctx.party});
  }

 private:
  NoiseSpec noise_;
  std::uint64_t seed_;
};

inline std::vector<SampleId> residual_keys(std::span<const SampleId> ids, ResidualKey key) {
  std::vector<SampleId> out(ids.begin(), ids.end());
  if (key == ResidualKey::kBatchPosition) std::iota(out.begin(), out.end(), SampleId{0});
  return out;
}

class SparsifyDefense final : public Interceptor {
 public:
  explicit SparsifyDefense(double drop_rate, ResidualKey key = ResidualKey::kBatchPosition)
      : drop_rate_(drop_rate), key_(key) {}
  std::string name() const override { return "sparsify"; }
  Matrix intercept(Matrix message, const InterceptContext& ctx) override {
    auto it = stores_.try_emplace(ctx.party, message.cols()).first;
    return sparsify(message, residual_keys(ctx.sample_ids, key_), drop_rate_, it->second);
  }

  ResidualKey key() const noexcept { return key_; }
  const ResidualStore* store(std::size_t party) const {
    auto it = stores_.find(party);
    return it == stores_.end() ? nullptr : &it->second;
  }

 private:
  double drop_rate_;
  ResidualKey key_;
  std::map<std::size_t, ResidualStore> stores_;
};

struct InstalledDefenses {
  std::shared_ptr<ClipDefense> clip;
  std::shared_ptr<NoiseDefense> noise;
  std::shared_ptr<SparsifyDefense> sparsify;
};

// Message defenses in fixed order: clip, noise, sparsify.
inline InstalledDefenses install_defenses(const DefenseConfig& cfg, std::uint64_t seed,
                                          InterceptorStack& stack) {
  cfg.validate();
  InstalledDefenses out;
  if (cfg.clip_norm && std::isfinite(*cfg.clip_norm)) {
    out.clip = std::make_shared<ClipDefense>(*cfg.clip_norm);
    stack.add(Site::kActiveDown, std::nullopt, out.clip);
  }
  if (cfg.noise.kind != NoiseKind::kNone && cfg.noise.variance > 0.0) {
    out.noise = std::make_shared<NoiseDefense>(cfg.noise, seed);
    stack.add(Site::kActiveDown, std::nullopt, out.noise);
  }
  if (cfg.drop_rate > 0.0) {
    out.sparsify = std::make_shared<SparsifyDefense>(cfg.drop_rate, cfg.residual_key);
    stack.add(Site::kActiveDown, std::nullopt, out.sparsify);
  }
  return out;
}

}  // namespace vflbd

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
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vflbd/adversary.hpp"
#include "vflbd/dataset.hpp"
#include "vflbd/defense.hpp"
#include "vflbd/errors.hpp"
#include "vflbd/nn.hpp"
#include "vflbd/protocol.hpp"
#include "vflbd/rng.hpp"

namespace vflbd {

enum class DatasetKind { kMnist, kNusWide, kSynth };
enum class AttackKind { kNone, kGradientReplacement, kGradientSubstitution };

struct RunConfig {
  DatasetKind dataset = DatasetKind::kSynth;
  std::filesystem::path data_dir;
  std::size_t epochs = 0;  // 0: 50 for file-backed datasets, 20 for synth
  std::size_t batch_size = 64;
  double lr = 0.01;
  std::uint64_t seed = 1;
  std::size_t repeats = 1;

  AttackKind attack = AttackKind::kNone;
  double gamma = 10.0;
  Label target_label = 0;
  std::size_t target_count = 1;
  std::size_t malicious_party = 1;
  std::optional<bool> blur;  // unset: blur exactly when the head is trainable
  double blur_variance = 1e-6;

  DefenseConfig defense;

  std::size_t passive_hidden = 32;
  std::size_t representation_width = 32;
  std::size_t head_hidden = 32;

  SynthSpec synth;
  std::size_t mnist_poison_train = 600;
  std::size_t mnist_poison_test = 100;
  NusWideLayout nuswide;

  std::size_t effective_epochs() const {
    if (epochs > 0) return epochs;
    return dataset == DatasetKind::kSynth ? 20 : 50;
  }
  bool effective_blur() const { return blur.value_or(defense.trainable_head); }

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (repeats == 0) throw ConfigError("repeats must be at least 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be positive");
    if (!(blur_variance >= 0.0)) throw ConfigError("blur variance must be non-negative");
    if (attack != AttackKind::kNone && target_count == 0) {
      throw ConfigError("an attack needs at least one target sample");
    }
    if (attack == AttackKind::kGradientSubstitution && defense.trainable_head) {
      throw ConfigError("gradient substitution reads labels off a sum head; use --defense-head sum");
    }
    if (representation_width == 0 || head_hidden == 0) throw ConfigError("widths must be positive");
    defense.validate();
    if (dataset != DatasetKind::kSynth) {
      if (data_dir.empty()) throw ConfigError("--data-dir is required for this dataset");
      if (!std::filesystem::is_directory(data_dir)) {
        throw ConfigError("data directory " + data_dir.string() + " does not exist");
      }
    }
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double main_accuracy = 0.0;
  std::optional<double> backdoor_accuracy;
  double mean_loss = 0.0;
  std::size_t skipped_poison_events = 0;
};

struct RunResult {
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
  std::vector<double> poison_mean_scores;  // mean softmax over triggered test samples
};

inline TrainTest load_data(const RunConfig& cfg) {
  switch (cfg.dataset) {
    case DatasetKind::kMnist:
      return build_mnist(load_mnist(cfg.data_dir), cfg.seed, cfg.mnist_poison_train,
                         cfg.mnist_poison_test);
    case DatasetKind::kNusWide:
      return build_nuswide(cfg.data_dir, cfg.nuswide);
    case DatasetKind::kSynth:
      return build_synth(cfg.synth, cfg.seed);
  }
  throw ConfigError("unknown dataset");
}

// Clean training samples with the target label, drawn from the data stream.
inline IdSet choose_targets(const PartitionedDataset& train, Label tau, std::size_t count,
                            std::uint64_t seed) {
  std::vector<SampleId> candidates;
  for (SampleId i = 0; i < train.size(); ++i) {
    if (train.labels[i] == tau && !train.poison_ids.contains(i)) candidates.push_back(i);
  }
  if (candidates.size() < count) {
    throw DataError("only " + std::to_string(candidates.size()) +
                    " clean samples carry the target label");
  }
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kData), 0x7A26E7}));
  IdSet out;
  for (SampleId i : sample_ids(candidates.size(), count, rng)) out.insert(candidates[i]);
  return out;
}

struct Evaluation {
  double main_accuracy = 0.0;
  std::optional<double> backdoor_accuracy;  // absent when the test set has no poison samples
};

// Main accuracy over test samples outside poison_ids; backdoor accuracy is
// the share of poison samples predicted exactly tau.
inline Evaluation evaluate(const Federation& fed, const PartitionedDataset& test, Label tau,
                           const InterceptorStack* stack = nullptr, std::size_t chunk = 2048) {
  std::size_t clean = 0;
  std::size_t clean_hits = 0;
  std::size_t poison = 0;
  std::size_t poison_hits = 0;
  std::vector<SampleId> ids;
  for (std::size_t begin = 0; begin < test.size(); begin += chunk) {
    const std::size_t end = std::min(test.size(), begin + chunk);
    ids.resize(end - begin);
    std::iota(ids.begin(), ids.end(), begin);
    std::vector<Matrix> features;
    for (const auto& block : test.blocks) features.push_back(gather_rows(block, ids));
    auto pred = predict(fed, features, stack, ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (test.poison_ids.contains(ids[i])) {
        ++poison;
        poison_hits += pred[i] == tau;
      } else {
        ++clean;
        clean_hits += pred[i] == test.labels[ids[i]];
      }
    }
  }
  Evaluation out;
  out.main_accuracy = clean == 0 ? 0.0 : static_cast<double>(clean_hits) / static_cast<double>(clean);
  if (poison > 0) out.backdoor_accuracy = static_cast<double>(poison_hits) / static_cast<double>(poison);
  return out;
}

inline std::vector<double> poison_mean_scores(const Federation& fed, const PartitionedDataset& test) {
  std::vector<double> mean(fed.active.num_classes, 0.0);
  if (test.poison_ids.empty()) return mean;
  std::vector<SampleId> ids(test.poison_ids.begin(), test.poison_ids.end());
  std::vector<Matrix> features;
  for (const auto& block : test.blocks) features.push_back(gather_rows(block, ids));
  Matrix logits = predict_logits(fed, features);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto s = softmax(logits.row(r));
    for (std::size_t j = 0; j < s.size(); ++j) mean[j] += s[j];
  }
  for (double& v : mean) v /= static_cast<double>(ids.size());
  return mean;
}

inline Architecture architecture_for(const RunConfig& cfg, const PartitionedDataset& train) {
  Architecture arch;
  arch.head = cfg.defense.trainable_head ? HeadKind::kTrainable : HeadKind::kSum;
  for (const auto& b : train.blocks) arch.party_inputs.push_back(b.cols());
  arch.num_classes = train.num_classes;
  arch.passive_hidden = cfg.passive_hidden;
  arch.representation_width = cfg.representation_width;
  arch.head_hidden = cfg.head_hidden;
  return arch;
}

// Everything one repeat needs besides the data: the federation and the
// interceptors bound to it.
struct Session {
  Federation fed;
  InterceptorStack stack;
  std::shared_ptr<GradientReplacementAttack> replacement;
  std::shared_ptr<LabelSubstitutionAttack> substitution;
  InstalledDefenses defenses;
};

inline Session make_session(const RunConfig& cfg, const TrainTest& data, std::uint64_t seed) {
  Session s;
  Rng init = make_rng(seed, Stream::kInit);
  s.fed = build_federation(architecture_for(cfg, data.train), data.train.labels,
                           SgdState{cfg.lr, 0.0}, init);
  if (cfg.attack != AttackKind::kNone) {
    AttackConfig attack;
    attack.malicious_party = cfg.malicious_party;
    attack.target_label = cfg.target_label;
    attack.amplify_ratio = cfg.gamma;
    attack.poison_ids = data.train.poison_ids;
    attack.target_ids = data.train.target_ids.empty()
                            ? choose_targets(data.train, cfg.target_label, cfg.target_count, cfg.seed)
                            : data.train.target_ids;
    attack.blur_variance = cfg.blur_variance;
    attack.validate(data.train.size(), data.train.num_classes, data.train.blocks.size());
    if (cfg.attack == AttackKind::kGradientReplacement) {
      s.replacement = std::make_shared<GradientReplacementAttack>(attack);
      s.stack.add(Site::kPassiveApply, attack.malicious_party, s.replacement);
    } else {
      s.substitution = std::make_shared<LabelSubstitutionAttack>(attack);
      s.stack.add(Site::kPassiveApply, attack.malicious_party, s.substitution);
    }
    if (cfg.effective_blur()) {
      s.stack.add(Site::kPassiveUp, attack.malicious_party,
                  std::make_shared<ActivationBlurAttack>(attack, seed));
    }
  }
  s.defenses = install_defenses(cfg.defense, seed, s.stack);
  return s;
}

// Seeded shuffle of [0, n) chunked into batches; the last batch may be short.
inline std::vector<std::vector<SampleId>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<SampleId> order(n);
  std::iota(order.begin(), order.end(), SampleId{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<SampleId>> out;
  for (std::size_t b = 0; b < n; b += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  }
  return out;
}

inline RunResult run_repeat(const RunConfig& cfg, const TrainTest& data, std::size_t repeat) {
  RunResult result;
  result.repeat = repeat;
  result.seed = cfg.seed + repeat;
  Session s = make_session(cfg, data, result.seed);
  Rng shuffle = make_rng(result.seed, Stream::kShuffle);
  std::size_t round = 0;
  std::size_t skipped_before = 0;
  for (std::size_t epoch = 1; epoch <= cfg.effective_epochs(); ++epoch) {
    double loss_sum = 0.0;
    for (const auto& batch : epoch_batches(data.train.size(), cfg.batch_size, shuffle)) {
      auto r = run_round(s.fed, data.train.blocks, batch, s.stack, round++);
      loss_sum += r.loss * static_cast<double>(batch.size());
    }
    auto eval = evaluate(s.fed, data.test, cfg.target_label, &s.stack);
    EpochMetrics m;
    m.epoch = epoch;
    m.main_accuracy = eval.main_accuracy;
    m.backdoor_accuracy = eval.backdoor_accuracy;
    m.mean_loss = loss_sum / static_cast<double>(data.train.size());
    if (s.replacement) {
      m.skipped_poison_events = s.replacement->skipped_poison_events() - skipped_before;
      skipped_before = s.replacement->skipped_poison_events();
    } else if (s.substitution) {
      m.skipped_poison_events = s.substitution->skipped() - skipped_before;
      skipped_before = s.substitution->skipped();
    }
    if (!std::isfinite(m.mean_loss)) throw ProtocolError("training diverged: non-finite loss");
    result.epochs.push_back(m);
  }
  result.poison_mean_scores = poison_mean_scores(s.fed, data.test);
  return result;
}

inline std::vector<RunResult> run_experiment(const RunConfig& cfg, const TrainTest& data) {
  cfg.validate();
  std::vector<RunResult> out;
  for (std::size_t r = 0; r < cfg.repeats; ++r) out.push_back(run_repeat(cfg, data, r));
  return out;
}

inline std::vector<RunResult> run_experiment(const RunConfig& cfg) {
  cfg.validate();
  return run_experiment(cfg, load_data(cfg));
}

struct LabelInferenceOutcome {
  std::size_t observed = 0;
  std::size_t recovered = 0;
  std::size_t ambiguous = 0;  // rows with zero or several negative entries

  double rate() const {
    return observed == 0 ? 0.0 : static_cast<double>(recovered) / static_cast<double>(observed);
  }
};

// Clean training with a sum head while the malicious party reads labels off
// every gradient it receives.
inline LabelInferenceOutcome run_label_inference(const RunConfig& cfg, const TrainTest& data) {
  cfg.validate();
  if (cfg.defense.trainable_head) throw ConfigError("label inference needs the sum head");
  RunConfig clean = cfg;
  clean.attack = AttackKind::kNone;
  Session s = make_session(clean, data, cfg.seed);
  auto probe = std::make_shared<LabelInferenceProbe>();
  s.stack.add(Site::kPassiveApply, cfg.malicious_party, probe);
  Rng shuffle = make_rng(cfg.seed, Stream::kShuffle);
  std::size_t round = 0;
  for (std::size_t epoch = 0; epoch < cfg.effective_epochs(); ++epoch) {
    for (const auto& batch : epoch_batches(data.train.size(), cfg.batch_size, shuffle)) {
      run_round(s.fed, data.train.blocks, batch, s.stack, round++);
    }
  }
  LabelInferenceOutcome out;
  for (const auto& obs : probe->observations()) {
    ++out.observed;
    if (!obs.inferred) {
      ++out.ambiguous;
    } else if (*obs.inferred == data.train.labels[obs.id]) {
      ++out.recovered;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reporting

inline constexpr const char* kEpochCsvHeader = "epoch,main_acc,backdoor_acc,loss,skipped_poison";

struct ReportOptions {
  std::string prefix = "run";
  bool long_format = false;    // also write <prefix>_long.csv
  bool poison_scores = false;  // also write <prefix>_poison_scores.csv
};

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single value
  std::size_t n = 0;
};

inline Summary summarize(std::span<const double> values) {
  Summary s;
  s.n = values.size();
  if (s.n == 0) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

namespace detail {

inline std::string fmt_double(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline std::string fmt_optional(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string("NA");
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  return out;
}

inline std::string epoch_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + fmt_double(m.main_accuracy) + "," +
         fmt_optional(m.backdoor_accuracy) + "," + fmt_double(m.mean_loss, "%.9g") + "," +
         std::to_string(m.skipped_poison_events);
}

}  // namespace detail

// Writes <prefix>_r<repeat>.csv per repeat and <prefix>_summary.csv with the
// final-epoch mean and standard deviation across repeats. Returns the paths
// written.
inline std::vector<std::filesystem::path> emit_report(const std::vector<RunResult>& runs,
                                                      const std::filesystem::path& dir,
                                                      const ReportOptions& opt = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir)) throw DataError(dir.string() + ": cannot create directory");
  std::vector<std::filesystem::path> written;

  for (const auto& run : runs) {
    auto path = dir / (opt.prefix + "_r" + std::to_string(run.repeat) + ".csv");
    auto out = detail::open_out(path);
    out << kEpochCsvHeader << "\n";
    for (const auto& m : run.epochs) out << detail::epoch_row(m) << "\n";
    if (!out) throw DataError(path.string() + ": write failed");
    written.push_back(path);
  }

  {
    auto path = dir / (opt.prefix + "_summary.csv");
    auto out = detail::open_out(path);
    std::vector<double> main, backdoor, loss, skipped;
    for (const auto& run : runs) {
      if (run.epochs.empty()) continue;
      const auto& last = run.epochs.back();
      main.push_back(last.main_accuracy);
      if (last.backdoor_accuracy) backdoor.push_back(*last.backdoor_accuracy);
      loss.push_back(last.mean_loss);
      skipped.push_back(static_cast<double>(last.skipped_poison_events));
    }
    out << "metric,mean,stddev,n\n";
    auto line = [&](const char* name, const std::vector<double>& v) {
      if (v.empty()) {
        out << name << ",NA,NA,0\n";
        return;
      }
      auto s = summarize(v);
      out << name << "," << detail::fmt_double(s.mean) << "," << detail::fmt_double(s.stddev) << ","
          << s.n << "\n";
    };
    line("main_acc", main);
    line("backdoor_acc", backdoor);
    line("loss", loss);
    line("skipped_poison", skipped);
    if (!out) throw DataError(path.string() + ": write failed");
    written.push_back(path);
  }

  if (opt.long_format) {
    auto path = dir / (opt.prefix + "_long.csv");
    auto out = detail::open_out(path);
    out << "run,repeat," << kEpochCsvHeader << "\n";
    for (const auto& run : runs) {
      for (const auto& m : run.epochs) {
        out << opt.prefix << "," << run.repeat << "," << detail::epoch_row(m) << "\n";
      }
    }
    written.push_back(path);
  }

  if (opt.poison_scores) {
    auto path = dir / (opt.prefix + "_poison_scores.csv");
    auto out = detail::open_out(path);
    out << "repeat,class,mean_score\n";
    for (const auto& run : runs) {
      for (std::size_t c = 0; c < run.poison_mean_scores.size(); ++c) {
        out << run.repeat << "," << c << "," << detail::fmt_double(run.poison_mean_scores[c]) << "\n";
      }
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace vflbd

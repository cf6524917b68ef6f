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
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "vflbd/adversary.hpp"
#include "vflbd/errors.hpp"
#include "vflbd/rng.hpp"
#include "vflbd/tensor.hpp"

namespace vflbd {

enum class Split { kTrain, kTest };

// Feature blocks (one per passive party, in party order) plus labels for
// the same N samples.
struct PartitionedDataset {
  std::vector<Matrix> blocks;
  std::vector<Label> labels;
  IdSet poison_ids;
  IdSet target_ids;
  Split split = Split::kTrain;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }

  void validate() const {
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      if (blocks[k].rows() != labels.size()) {
        throw DataError("dataset: block " + std::to_string(k) + " has " +
                        std::to_string(blocks[k].rows()) + " rows for " +
                        std::to_string(labels.size()) + " labels");
      }
    }
    for (Label y : labels) {
      if (y >= num_classes) throw DataError("dataset: label out of range");
    }
    if (!poison_ids.empty() && *poison_ids.rbegin() >= size()) {
      throw DataError("dataset: poison id out of range");
    }
    if (!target_ids.empty() && *target_ids.rbegin() >= size()) {
      throw DataError("dataset: target id out of range");
    }
  }
};

// Uniform sample of `count` distinct ids from [0, n), returned sorted.
inline IdSet sample_ids(std::size_t n, std::size_t count, Rng& rng) {
  if (count > n) throw ConfigError("sample_ids: cannot draw " + std::to_string(count) +
                                   " of " + std::to_string(n));
  std::vector<SampleId> pool(n);
  std::iota(pool.begin(), pool.end(), SampleId{0});
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  return IdSet(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
}

// ---------------------------------------------------------------------------
// Triggers

struct Pixel {
  std::size_t row = 0;
  std::size_t col = 0;
  std::uint8_t value = 255;
};

using PixelPattern = std::vector<Pixel>;

struct FeatureEquals {
  std::size_t feature = 0;
  double value = 1.0;
};

using TriggerSpec = std::variant<PixelPattern, FeatureEquals>;

// Four marked pixels in the bottom-right corner.
inline PixelPattern mnist_trigger() { return {{25, 27, 255}, {27, 25, 255}, {26, 26, 255}, {27, 27, 255}}; }

// ---------------------------------------------------------------------------
// MNIST

struct ImageSet {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
  std::vector<Label> labels;

  std::span<std::uint8_t> image(std::size_t i) {
    return {pixels.data() + i * rows * cols, rows * cols};
  }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * rows * cols, rows * cols};
  }
};

struct MnistArchive {
  ImageSet train;
  ImageSet test;
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& file) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw DataError(file + ": truncated header");
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

inline std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  return in;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

inline std::vector<Label> read_idx_labels(const std::filesystem::path& path) {
  auto in = detail::open_binary(path);
  const std::string name = path.string();
  if (detail::read_be32(in, name) != kIdxLabelMagic) throw DataError(name + ": bad magic number");
  const std::uint32_t count = detail::read_be32(in, name);
  std::vector<unsigned char> raw(count);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count))) {
    throw DataError(name + ": truncated payload");
  }
  return {raw.begin(), raw.end()};
}

inline ImageSet read_idx_images(const std::filesystem::path& path) {
  auto in = detail::open_binary(path);
  const std::string name = path.string();
  if (detail::read_be32(in, name) != kIdxImageMagic) throw DataError(name + ": bad magic number");
  ImageSet set;
  set.count = detail::read_be32(in, name);
  set.rows = detail::read_be32(in, name);
  set.cols = detail::read_be32(in, name);
  set.pixels.resize(set.count * set.rows * set.cols);
  if (!in.read(reinterpret_cast<char*>(set.pixels.data()),
               static_cast<std::streamsize>(set.pixels.size()))) {
    throw DataError(name + ": truncated payload");
  }
  return set;
}

inline ImageSet read_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels) {
  ImageSet set = read_idx_images(images);
  set.labels = read_idx_labels(labels);
  if (set.labels.size() != set.count) {
    throw DataError(images.string() + ": " + std::to_string(set.count) + " images but " +
                    labels.string() + " has " + std::to_string(set.labels.size()) + " labels");
  }
  for (Label y : set.labels) {
    if (y > 9) throw DataError(labels.string() + ": label " + std::to_string(y) + " out of range");
  }
  return set;
}

// Reads the standard four-file archive from `dir`.
inline MnistArchive load_mnist(const std::filesystem::path& dir) {
  MnistArchive a;
  a.train = read_idx_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  a.test = read_idx_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  return a;
}

// Sets the pattern pixels on every selected image.
inline void inject_trigger(ImageSet& images, const IdSet& ids, const PixelPattern& pattern) {
  for (const auto& p : pattern) {
    if (p.row >= images.rows || p.col >= images.cols) {
      throw ConfigError("inject_trigger: pixel (" + std::to_string(p.row) + "," +
                        std::to_string(p.col) + ") outside " +
                        Matrix::shape_string(images.rows, images.cols));
    }
  }
  for (SampleId id : ids) {
    if (id >= images.count) throw ConfigError("inject_trigger: image id out of range");
    auto img = images.image(id);
    for (const auto& p : pattern) img[p.row * images.cols + p.col] = p.value;
  }
}

// Image rows [0, split_row) go to the first block, the rest to the second;
// pixels are flattened row-major and scaled by 1/255.
inline std::vector<Matrix> partition_rows(const ImageSet& images, std::size_t split_row = 14) {
  if (split_row == 0 || split_row >= images.rows) {
    throw ConfigError("partition_rows: split row must lie inside the image");
  }
  const std::size_t wa = split_row * images.cols;
  const std::size_t wb = (images.rows - split_row) * images.cols;
  std::vector<Matrix> blocks{Matrix(images.count, wa), Matrix(images.count, wb)};
  for (std::size_t i = 0; i < images.count; ++i) {
    auto img = images.image(i);
    auto a = blocks[0].row(i);
    auto b = blocks[1].row(i);
    for (std::size_t j = 0; j < wa; ++j) a[j] = img[j] / 255.0;
    for (std::size_t j = 0; j < wb; ++j) b[j] = img[wa + j] / 255.0;
  }
  return blocks;
}

struct PoisonSplit {
  IdSet train;
  IdSet test;
};

inline PoisonSplit select_poison_mnist(std::size_t train_size, std::size_t test_size,
                                       std::size_t n_train, std::size_t n_test,
                                       std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::kData);
  PoisonSplit out;
  out.train = sample_ids(train_size, n_train, rng);
  out.test = sample_ids(test_size, n_test, rng);
  return out;
}

struct TrainTest {
  PartitionedDataset train;
  PartitionedDataset test;
};

// Load, pick poison sets, stamp the trigger on them, then split and scale.
inline TrainTest build_mnist(MnistArchive archive, std::uint64_t seed, std::size_t n_poison_train = 600,
                             std::size_t n_poison_test = 100) {
  auto poison = select_poison_mnist(archive.train.count, archive.test.count, n_poison_train,
                                    n_poison_test, seed);
  inject_trigger(archive.train, poison.train, mnist_trigger());
  inject_trigger(archive.test, poison.test, mnist_trigger());
  TrainTest out;
  out.train = {partition_rows(archive.train), std::move(archive.train.labels), poison.train, {},
               Split::kTrain, 10};
  out.test = {partition_rows(archive.test), std::move(archive.test.labels), poison.test, {},
              Split::kTest, 10};
  out.train.validate();
  out.test.validate();
  return out;
}

// ---------------------------------------------------------------------------
// NUS-WIDE

// File names may contain {split} (Train/Test) and, for labels, {concept}.
struct NusWideLayout {
  std::vector<std::string> image_files = {
      "Low_Level_Features/{split}_Normalized_CH.dat",  "Low_Level_Features/{split}_Normalized_CM55.dat",
      "Low_Level_Features/{split}_Normalized_CORR.dat", "Low_Level_Features/{split}_Normalized_EDH.dat",
      "Low_Level_Features/{split}_Normalized_WT.dat"};
  std::string tag_file = "NUS_WID_Tags/{split}_Tags1k.dat";
  std::string label_file = "Groundtruth/TrainTestLabels/Labels_{concept}_{split}.txt";
  std::vector<std::string> concepts = {"buildings", "grass", "animal", "water", "person"};
  std::size_t image_width = 634;
  std::size_t text_width = 1000;
};

namespace detail {

inline std::string expand(std::string pattern, std::string_view key, std::string_view value) {
  for (auto pos = pattern.find(key); pos != std::string::npos; pos = pattern.find(key, pos)) {
    pattern.replace(pos, key.size(), value);
    pos += value.size();
  }
  return pattern;
}

inline void parse_numbers(std::string_view line, std::vector<double>& out, const std::string& file,
                          std::size_t line_no) {
  out.clear();
  const char* p = line.data();
  const char* end = p + line.size();
  while (p < end) {
    while (p < end && (*p == ' ' || *p == '\t' || *p == ',' || *p == '\r')) ++p;
    if (p >= end) break;
    double v = 0.0;
    auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc()) {
      throw DataError(file + ":" + std::to_string(line_no) + ": not a number");
    }
    out.push_back(v);
    p = next;
  }
}

// Calls fn(row_index, values) for each non-blank line.
template <typename Fn>
void for_each_row(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::string line;
  std::vector<double> values;
  std::size_t row = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    parse_numbers(line, values, path.string(), line_no);
    if (values.empty()) continue;
    fn(row++, values);
  }
}

}  // namespace detail

// Samples carrying exactly one of the layout's concepts, labelled by concept
// position. Party 0 gets the image features, party 1 the text tags.
inline PartitionedDataset load_nuswide(const std::filesystem::path& dir, Split split,
                                       const NusWideLayout& layout = {}) {
  const std::string split_name = split == Split::kTrain ? "Train" : "Test";
  auto file = [&](const std::string& pattern, std::string_view concept_name = {}) {
    return dir / detail::expand(detail::expand(pattern, "{split}", split_name), "{concept}",
                                concept_name);
  };
  if (layout.concepts.size() < 2) throw ConfigError("nuswide: need at least two concepts");

  std::vector<std::vector<char>> marks(layout.concepts.size());
  std::size_t total = 0;
  for (std::size_t c = 0; c < layout.concepts.size(); ++c) {
    const auto path = file(layout.label_file, layout.concepts[c]);
    detail::for_each_row(path, [&](std::size_t, const std::vector<double>& v) {
      if (v.size() != 1) throw DataError(path.string() + ": expected one value per line");
      marks[c].push_back(v[0] > 0.5 ? 1 : 0);
    });
    if (c == 0) total = marks[0].size();
    if (marks[c].size() != total) {
      throw DataError(path.string() + ": " + std::to_string(marks[c].size()) + " rows, expected " +
                      std::to_string(total));
    }
  }

  std::vector<std::size_t> keep_row(total, SIZE_MAX);  // source row -> dataset row
  PartitionedDataset ds;
  ds.split = split;
  ds.num_classes = layout.concepts.size();
  for (std::size_t r = 0; r < total; ++r) {
    std::size_t hits = 0;
    Label y = 0;
    for (std::size_t c = 0; c < marks.size(); ++c) {
      if (marks[c][r]) {
        ++hits;
        y = c;
      }
    }
    if (hits == 1) {
      keep_row[r] = ds.labels.size();
      ds.labels.push_back(y);
    }
  }
  const std::size_t n = ds.labels.size();

  auto load_block = [&](const std::vector<std::string>& patterns, std::size_t expected_width) {
    std::vector<std::size_t> widths;
    for (const auto& pat : patterns) {
      const auto path = file(pat);
      std::size_t width = 0;
      std::size_t rows = 0;
      detail::for_each_row(path, [&](std::size_t, const std::vector<double>& v) {
        if (rows == 0) width = v.size();
        if (v.size() != width) {
          throw DataError(path.string() + ": row " + std::to_string(rows) + " has " +
                          std::to_string(v.size()) + " columns, expected " + std::to_string(width));
        }
        ++rows;
      });
      if (rows != total) {
        throw DataError(path.string() + ": " + std::to_string(rows) + " rows, labels have " +
                        std::to_string(total));
      }
      widths.push_back(width);
    }
    const std::size_t width = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
    if (expected_width != 0 && width != expected_width) {
      throw DataError("nuswide: feature width " + std::to_string(width) + ", expected " +
                      std::to_string(expected_width));
    }
    Matrix block(n, width);
    std::size_t offset = 0;
    for (std::size_t f = 0; f < patterns.size(); ++f) {
      detail::for_each_row(file(patterns[f]), [&](std::size_t r, const std::vector<double>& v) {
        if (keep_row[r] == SIZE_MAX) return;
        std::ranges::copy(v, block.row(keep_row[r]).begin() + static_cast<std::ptrdiff_t>(offset));
      });
      offset += widths[f];
    }
    return block;
  };
  ds.blocks.push_back(load_block(layout.image_files, layout.image_width));
  ds.blocks.push_back(load_block({layout.tag_file}, layout.text_width));
  ds.validate();
  return ds;
}

// Ids whose feature `trigger.feature` of block `party` equals trigger.value.
inline IdSet select_by_feature(const PartitionedDataset& ds, std::size_t party, FeatureEquals trigger) {
  if (party >= ds.blocks.size()) throw ConfigError("select_by_feature: no such party");
  const Matrix& block = ds.blocks[party];
  if (trigger.feature >= block.cols()) throw ConfigError("select_by_feature: feature out of range");
  IdSet out;
  for (std::size_t r = 0; r < block.rows(); ++r) {
    if (block(r, trigger.feature) == trigger.value) out.insert(r);
  }
  return out;
}

// The last text tag set to 1 marks the poison set.
inline IdSet select_poison_nuswide(const PartitionedDataset& ds) {
  if (ds.blocks.size() < 2 || ds.blocks[1].cols() == 0) throw ConfigError("nuswide: no text block");
  return select_by_feature(ds, 1, {ds.blocks[1].cols() - 1, 1.0});
}

inline TrainTest build_nuswide(const std::filesystem::path& dir, const NusWideLayout& layout = {}) {
  TrainTest out{load_nuswide(dir, Split::kTrain, layout), load_nuswide(dir, Split::kTest, layout)};
  out.train.poison_ids = select_poison_nuswide(out.train);
  out.test.poison_ids = select_poison_nuswide(out.test);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic

struct SynthSpec {
  std::size_t n_train = 4000;
  std::size_t n_test = 2000;
  std::size_t d_per_party = 16;
  std::size_t num_classes = 5;
  double class_separation = 1.0;  // std-dev of class-mean coordinates
  std::optional<double> separation_b;  // party 1's spread; unset: class_separation
  double poison_fraction = 0.02;
};

// Gaussian class blobs over 2d - 1 dimensions. Party 0 holds the first d,
// party 1 the remaining d - 1 plus a binary trigger column (its last feature)
// set on a random poison_fraction of the samples. Class means depend only on
// the seed, so train and test draw from one distribution.
inline PartitionedDataset synth_generate(const SynthSpec& spec, std::uint64_t seed, Split split) {
  if (spec.n_train == 0 || spec.n_test == 0 || spec.d_per_party < 2 || spec.num_classes < 2) {
    throw ConfigError("synth: sizes must be positive (d_per_party >= 2, classes >= 2)");
  }
  if (!(spec.poison_fraction >= 0.0 && spec.poison_fraction < 1.0)) {
    throw ConfigError("synth: poison fraction must lie in [0, 1)");
  }
  const std::size_t d = spec.d_per_party;
  const std::size_t dims = 2 * d - 1;
  Rng mean_rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kData), 0xC1A55}));
  std::normal_distribution<double> unit_mean(0.0, 1.0);
  const double sep_b = spec.separation_b.value_or(spec.class_separation);
  Matrix means(spec.num_classes, dims);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t j = 0; j < dims; ++j) {
      means(c, j) = unit_mean(mean_rng) * (j < d ? spec.class_separation : sep_b);
    }
  }

  const std::size_t n = split == Split::kTrain ? spec.n_train : spec.n_test;
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kData),
                       split == Split::kTrain ? 1u : 2u}));
  std::vector<Label> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % spec.num_classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  PartitionedDataset ds;
  ds.split = split;
  ds.num_classes = spec.num_classes;
  ds.blocks = {Matrix(n, d), Matrix(n, d)};
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto mu = means.row(labels[i]);
    for (std::size_t j = 0; j < d; ++j) ds.blocks[0](i, j) = mu[j] + unit(rng);
    for (std::size_t j = 0; j + 1 < d; ++j) ds.blocks[1](i, j) = mu[d + j] + unit(rng);
  }
  const auto poison_count = static_cast<std::size_t>(std::llround(spec.poison_fraction * static_cast<double>(n)));
  ds.poison_ids = sample_ids(n, poison_count, rng);
  for (SampleId id : ds.poison_ids) ds.blocks[1](id, d - 1) = 1.0;
  ds.labels = std::move(labels);
  ds.validate();
  return ds;
}

inline TrainTest build_synth(const SynthSpec& spec, std::uint64_t seed) {
  return {synth_generate(spec, seed, Split::kTrain), synth_generate(spec, seed, Split::kTest)};
}

}  // namespace vflbd

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
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vflbd/errors.hpp"

namespace vflbd {

using SampleId = std::size_t;
using Label = std::size_t;

// Dense row-major matrix of doubles with value semantics.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ConfigError("Matrix: data length " + std::to_string(data_.size()) +
                        " does not match " + shape_string(rows_, cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ConfigError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape() const { return shape_string(rows_, cols_); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    std::ostringstream os;
    os << r << "x" << c;
    return os.str();
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ConfigError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

// a (n x k) * b (k x m)
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: " + a.shape() + " * " + b.shape());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* dst = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* src = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

// a^T (k x n)^T * b (k x m) -> n x m
inline Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ConfigError("matmul_at_b: " + a.shape() + "^T * " + b.shape());
  }
  Matrix out(a.cols(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* src = b.row(r).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = a(r, i);
      if (ari == 0.0) continue;
      double* dst = out.row(i).data();
      for (std::size_t j = 0; j < m; ++j) dst[j] += ari * src[j];
    }
  }
  return out;
}

// a (n x m) * b^T (k x m)^T -> n x k
inline Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ConfigError("matmul_a_bt: " + a.shape() + " * " + b.shape() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ar = a.row(i);
    for (std::size_t k = 0; k < b.rows(); ++k) {
      const auto br = b.row(k);
      double acc = 0.0;
      for (std::size_t j = 0; j < a.cols(); ++j) acc += ar[j] * br[j];
      out(i, k) = acc;
    }
  }
  return out;
}

inline Matrix operator+(Matrix a, const Matrix& b) {
  require_same_shape(a, b, "operator+");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  return a;
}

inline Matrix operator-(Matrix a, const Matrix& b) {
  require_same_shape(a, b, "operator-");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] -= bv[i];
  return a;
}

inline Matrix operator*(Matrix a, double s) {
  for (double& v : a.values()) v *= s;
  return a;
}

inline double max_abs(const Matrix& m) {
  double out = 0.0;
  for (double v : m.values()) out = std::max(out, std::abs(v));
  return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double out = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out = std::max(out, std::abs(a.values()[i] - b.values()[i]));
  }
  return out;
}

inline bool all_finite(const Matrix& m) {
  return std::ranges::all_of(m.values(), [](double v) { return std::isfinite(v); });
}

inline double row_norm(std::span<const double> row) {
  double acc = 0.0;
  for (double v : row) acc += v * v;
  return std::sqrt(acc);
}

// Rows of `src` picked by `ids`, in order.
inline Matrix gather_rows(const Matrix& src, std::span<const SampleId> ids) {
  Matrix out(ids.size(), src.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= src.rows()) {
      throw DataError("gather_rows: sample id " + std::to_string(ids[i]) + " out of range " +
                      std::to_string(src.rows()));
    }
    std::ranges::copy(src.row(ids[i]), out.row(i).begin());
  }
  return out;
}

// Columns [begin, end).
inline Matrix column_slice(const Matrix& src, std::size_t begin, std::size_t end) {
  if (begin > end || end > src.cols()) {
    throw ConfigError("column_slice: [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") of " + src.shape());
  }
  Matrix out(src.rows(), end - begin);
  for (std::size_t r = 0; r < src.rows(); ++r) {
    auto s = src.row(r);
    std::copy(s.begin() + static_cast<std::ptrdiff_t>(begin),
              s.begin() + static_cast<std::ptrdiff_t>(end), out.row(r).begin());
  }
  return out;
}

// Side-by-side concatenation of matrices that share a row count.
inline Matrix hconcat(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) {
      throw ConfigError("hconcat: row mismatch " + p.shape() + " vs " + parts.front().shape());
    }
    cols += p.cols();
  }
  Matrix out(parts.front().rows(), cols);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row(r).begin();
    for (const auto& p : parts) dst = std::ranges::copy(p.row(r), dst).out;
  }
  return out;
}

}  // namespace vflbd

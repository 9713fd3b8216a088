/*
 * Copyright 2026 The stmot Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stmot {

/// Storage scalar for all tensors and parameters. Double keeps finite-difference
/// gradient checks and long reductions well inside the required tolerances.
using Scalar = double;

/// Row-major dense tensor. Invariant: product(shape) == data.size().
struct DenseTensor {
  std::vector<int64_t> shape;
  std::vector<Scalar> data;

  DenseTensor() = default;

  explicit DenseTensor(std::vector<int64_t> s, Scalar fill = 0.0)
      : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), fill) {}

  DenseTensor(std::vector<int64_t> s, std::vector<Scalar> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (numel_of(shape) != static_cast<int64_t>(data.size())) {
      throw std::invalid_argument("DenseTensor: shape/data size mismatch");
    }
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw std::invalid_argument("DenseTensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static DenseTensor zeros(std::vector<int64_t> s) { return DenseTensor(std::move(s)); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  int64_t dim(int i) const {
    if (i < 0 || i >= rank()) throw std::out_of_range("DenseTensor::dim");
    return shape[static_cast<size_t>(i)];
  }

  Scalar& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  Scalar operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  Scalar& operator()(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  Scalar operator()(int64_t i, int64_t j) const {
    return data[static_cast<size_t>(i * shape[1] + j)];
  }

  Scalar& operator()(int64_t i, int64_t j, int64_t k) {
    return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  Scalar operator()(int64_t i, int64_t j, int64_t k) const {
    return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }

  Scalar& operator()(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }
  Scalar operator()(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }

  void fill(Scalar v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const DenseTensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (Scalar v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }
};

inline void accumulate(DenseTensor& dst, const DenseTensor& src) {
  if (!dst.same_shape(src)) {
    throw std::invalid_argument("accumulate: shape mismatch " + dst.shape_str() + " vs " +
                                src.shape_str());
  }
  for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

inline Scalar max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  Scalar m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace stmot

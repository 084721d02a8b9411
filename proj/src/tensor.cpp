// Copyright 2026 The groupclip Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "groupclip/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "groupclip/errors.hpp"

namespace groupclip {

std::size_t shape_product(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimension must be positive");
  }
  data.assign(shape_product(shape), 0.0);
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

Tensor Tensor::row(std::size_t i) const {
  if (rank() < 2) throw DimensionError("row() needs rank >= 2, got " + shape_str());
  std::vector<std::size_t> s(shape.begin() + 1, shape.end());
  // Keep a leading batch dimension of 1 so the slice stays batch-shaped.
  s.insert(s.begin(), 1);
  Tensor out(s);
  const std::size_t stride = shape_product(s);
  std::copy(data.begin() + static_cast<std::ptrdiff_t>(i * stride),
            data.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride), out.data.begin());
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("dot: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += v * v;
  return s;
}

void axpy(double s, const Tensor& b, Tensor& a) {
  if (!a.same_shape(b)) throw DimensionError("axpy: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += s * b.data[i];
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace groupclip

/*
 * Copyright 2026 The btmuda Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "btmuda/tensor.hpp"

// Reference implementations written straight from the definitions, quadratic
// or worse on purpose.
namespace btmuda::test {

// Double loop over the definition: median pair distance of the pooled sample
// as bandwidth, Gaussian kernels averaged over scales.
inline double mmd_oracle(const Matrix<double>& x, const Matrix<double>& y, const std::vector<double>& scales) {
  const Index n = x.rows(), m = y.rows();
  Matrix<double> z(n + m, x.cols());
  z << x, y;
  std::vector<double> dist;
  for (Index i = 0; i < n + m; ++i)
    for (Index j = i + 1; j < n + m; ++j) dist.push_back(std::sqrt((z.row(i) - z.row(j)).squaredNorm()));
  std::sort(dist.begin(), dist.end());
  double sigma = 1.0;
  if (!dist.empty()) {
    const std::size_t mid = dist.size() / 2;
    const double med = dist.size() % 2 == 1 ? dist[mid] : 0.5 * (dist[mid - 1] + dist[mid]);
    if (med > 0) sigma = med;
  }
  double total = 0;
  for (double s : scales) {
    const double bw = s * sigma;
    auto k = [bw](const auto& a, const auto& b) { return std::exp(-(a - b).squaredNorm() / (2 * bw * bw)); };
    double xx = 0, yy = 0, xy = 0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) xx += k(x.row(i), x.row(j));
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < m; ++j) yy += k(y.row(i), y.row(j));
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) xy += k(x.row(i), y.row(j));
    total += xx / (n * n) + yy / (m * m) - 2 * xy / (n * m);
  }
  return total / static_cast<double>(scales.size());
}

// Every (positive, negative) pair: 1 when the positive scores higher, 1/2 on a tie.
inline double auc_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

}  // namespace btmuda::test

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

#include <cmath>
#include <vector>

#include "btmuda/param_store.hpp"

namespace btmuda {

// Mini-batch SGD with momentum, L2 weight decay and an annealed step size
// lr(p) = base / (1 + a*p)^b.
struct OptimConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double anneal_a = 10.0;
  double anneal_b = 0.75;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("optim.learning_rate must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("optim.momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("optim.weight_decay must be >= 0");
    if (!(anneal_a > 0)) throw ConfigError("optim.anneal_a must be positive");
    if (!(anneal_b > 0)) throw ConfigError("optim.anneal_b must be positive");
  }
};

inline double annealed_learning_rate(const OptimConfig& cfg, double progress) {
  return cfg.learning_rate / std::pow(1.0 + cfg.anneal_a * progress, cfg.anneal_b);
}

// One update at iteration e of iter_total:
//   v <- momentum * v + (g + weight_decay * w);  w <- w - lr(e / iter_total) * v
// Advances the store's iteration counter.
template <typename Scalar>
void sgd_step(ParamStore<Scalar>& params, const std::vector<Matrix<Scalar>>& grads, std::int64_t e,
              std::int64_t iter_total, const OptimConfig& cfg) {
  require(grads.size() == params.size(), "sgd_step: gradient count does not match parameter count");
  require(iter_total > 0 && e >= 0 && e < iter_total, "sgd_step: iteration out of range");
  const Scalar lr = static_cast<Scalar>(annealed_learning_rate(cfg, static_cast<double>(e) / static_cast<double>(iter_total)));
  const Scalar mu = static_cast<Scalar>(cfg.momentum);
  const Scalar wd = static_cast<Scalar>(cfg.weight_decay);
  auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = entries[i];
    const auto& g = grads[i];
    if (g.rows() != p.value.rows() || g.cols() != p.value.cols())
      throw ContractViolation("sgd_step: gradient shape mismatch for " + p.name);
    p.momentum = mu * p.momentum + (g + wd * p.value);
    p.value -= lr * p.momentum;
  }
  params.iteration = e + 1;
  params.iter_total = iter_total;
}

}  // namespace btmuda

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

#include <vector>

#include "btmuda/model.hpp"
#include "btmuda/ops.hpp"

namespace btmuda {

// Alignment sub-module A_j^k: affine map to the alignment space, then ReLU.
template <typename Scalar>
Var<Scalar> align(const ParamBindings<Scalar>& p, const ModelConfig& cfg, const Var<Scalar>& features, int k, int j) {
  cfg.flat_index(k, j);  // range check
  if (features.cols() != cfg.feature_dim(k)) throw ContractViolation("align: features are not from path " + std::to_string(k));
  const std::string base = align_name(k, j);
  return relu(linear(features, p(base + "/weight"), p(base + "/bias")));
}

// Source-specific classifier C_j^k; returns logits.
template <typename Scalar>
Var<Scalar> classify(const ParamBindings<Scalar>& p, const ModelConfig& cfg, const Var<Scalar>& aligned, int k, int j) {
  cfg.flat_index(k, j);
  const std::string base = classifier_name(k, j);
  return linear(aligned, p(base + "/weight"), p(base + "/bias"));
}

// Distillation head shared by teacher and student branches.
template <typename Scalar>
Var<Scalar> distill_logits(const ParamBindings<Scalar>& p, const Var<Scalar>& features) {
  return linear(features, p("heads/distill/weight"), p("heads/distill/bias"));
}

// Fusion head on the aligned features of every (k, j), concatenated in flat
// index order. aligned[i] must be the output of classifier slot i.
template <typename Scalar>
Var<Scalar> fuse_predict(const ParamBindings<Scalar>& p, const ModelConfig& cfg, const std::vector<Var<Scalar>>& aligned) {
  if (static_cast<int>(aligned.size()) != cfg.num_classifiers())
    throw ContractViolation("fuse_predict: expected " + std::to_string(cfg.num_classifiers()) + " aligned feature blocks, got " +
                            std::to_string(aligned.size()));
  for (const auto& a : aligned)
    if (!a.valid()) throw ContractViolation("fuse_predict: missing alignment module output");
  return linear(concat_cols(aligned), p("heads/fusion/weight"), p("heads/fusion/bias"));
}

}  // namespace btmuda

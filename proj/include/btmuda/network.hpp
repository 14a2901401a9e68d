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

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "btmuda/cnn.hpp"
#include "btmuda/heads.hpp"
#include "btmuda/losses.hpp"
#include "btmuda/transformer.hpp"

namespace btmuda {

// Component switches of one ablation row (exp1 .. exp10).
struct Preset {
  std::string name;
  bool use_cnn = true;
  bool use_transformer = true;
  bool use_mmd = true;
  bool use_rest = true;
  bool use_three_branch = true;
  bool use_con = true;
};

inline const std::vector<Preset>& all_presets() {
  //                                cnn    vit    mmd    rest   3-br   con
  static const std::vector<Preset> presets = {
      {"exp1", true, false, true, false, false, false},   {"exp2", true, false, true, true, false, false},
      {"exp3", false, true, true, false, false, false},   {"exp4", false, true, true, true, false, false},
      {"exp5", false, true, true, true, true, false},     {"exp6", true, true, false, false, false, false},
      {"exp7", true, true, true, false, false, false},    {"exp8", true, true, true, true, false, false},
      {"exp9", true, true, true, true, true, false},      {"exp10", true, true, true, true, true, true},
  };
  return presets;
}

inline const Preset& preset_by_name(const std::string& name) {
  for (const auto& p : all_presets())
    if (p.name == name) return p;
  throw ConfigError("unknown preset '" + name + "' (expected exp1 .. exp10)");
}

// Model architecture implied by a preset.
inline ModelConfig apply_preset(ModelConfig cfg, const Preset& preset) {
  cfg.use_cnn = preset.use_cnn;
  cfg.use_transformer = preset.use_transformer;
  cfg.three_branch = preset.use_three_branch;
  return cfg;
}

///////////////////////////////////////////
// One training step's graph
///////////////////////////////////////////

// Equal-size batches: one per source (with labels) and one target batch
// (never labelled).
template <typename Scalar>
struct StepBatch {
  std::vector<ImageBatch<Scalar>> sources;
  std::vector<std::vector<int>> labels;
  ImageBatch<Scalar> target;
};

template <typename Scalar>
struct StepGraph {
  Var<Scalar> dtl, con, mmd, rest, cls;
  // Teacher distributions used by the distillation term, one per source.
  std::vector<Matrix<Scalar>> teacher_probs;
  // Target-domain class probabilities of every classifier, flat order.
  std::vector<Var<Scalar>> target_probs;
  // Fused logits of each source batch.
  std::vector<Var<Scalar>> fused_logits;
  // (source, target) aligned features of every alignment module, flat order.
  std::vector<std::pair<Var<Scalar>, Var<Scalar>>> aligned_pairs;
};

namespace detail {

template <typename Scalar>
ImageBatch<Scalar> stack(const std::vector<ImageBatch<Scalar>>& parts) {
  require(!parts.empty(), "stack: no batches");
  ImageBatch<Scalar> out{0, parts.front().height, parts.front().width, {}};
  for (const auto& b : parts) {
    require(b.height == out.height && b.width == out.width, "stack: image sizes differ");
    out.count += b.count;
  }
  out.pixels.resize(out.count * out.height * out.width, 1);
  Index at = 0;
  for (const auto& b : parts) {
    out.pixels.middleRows(at, b.pixels.rows()) = b.pixels;
    at += b.pixels.rows();
  }
  return out;
}

// Runs `fn`, re-labelling numeric failures with the component being built.
template <typename Fn>
auto guarded(const char* component, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError(std::string(component) + ": " + e.what());
  }
}

}  // namespace detail

// Builds every loss of one iteration on the bound parameters. Disabled
// components are constant zeros. When `teacher_override` is given, those
// fixed distributions replace the live teacher (used by gradient checks,
// where detaching means holding the teacher constant).
template <typename Scalar>
StepGraph<Scalar> build_step(const ParamBindings<Scalar>& p, const ModelConfig& cfg, const Preset& preset,
                             const KernelConfig& kernel, const StepBatch<Scalar>& batch,
                             const std::vector<Matrix<Scalar>>* teacher_override = nullptr) {
  Tape<Scalar>& tape = p.tape();
  const int M = cfg.num_sources;
  if (static_cast<int>(batch.sources.size()) != M || static_cast<int>(batch.labels.size()) != M)
    throw ContractViolation("build_step: expected one batch per source domain");
  const Index B = batch.target.count;
  for (int j = 0; j < M; ++j) {
    if (batch.sources[j].count != B || static_cast<Index>(batch.labels[j].size()) != B)
      throw ContractViolation("build_step: batches must have equal sizes");
  }
  if (preset.use_con && !(cfg.use_cnn && cfg.use_transformer))
    throw ConfigError("the consistency loss needs both extractor paths");

  const auto paths = cfg.paths();
  const ImageBatch<Scalar> stacked = detail::stack(batch.sources);

  // Extractor features per path: sources stacked (M*B rows), target (B rows).
  std::array<Var<Scalar>, 3> src_feat, tgt_feat;
  std::optional<Var<Scalar>> cross_feat;
  detail::guarded("extractor", [&] {
    if (cfg.use_cnn) {
      src_feat[1] = cnn_forward(p, cfg, stacked);
      tgt_feat[1] = cnn_forward(p, cfg, batch.target);
    }
    if (cfg.use_transformer) {
      auto f = transformer_forward(p, cfg, stacked, batch.target);
      src_feat[2] = *f.source;
      tgt_feat[2] = f.target;
      cross_feat = f.cross;
    }
    return 0;
  });

  // Every source image passes through every alignment module (fusion needs
  // all of them); the matching module's rows are sliced out per source.
  const int slots = cfg.num_classifiers();
  std::vector<Var<Scalar>> src_aligned(static_cast<std::size_t>(slots)), tgt_aligned(static_cast<std::size_t>(slots));
  detail::guarded("alignment", [&] {
    for (int k : paths)
      for (int j = 1; j <= M; ++j) {
        const auto slot = static_cast<std::size_t>(cfg.flat_index(k, j));
        src_aligned[slot] = align(p, cfg, src_feat[k], k, j);
        tgt_aligned[slot] = align(p, cfg, tgt_feat[k], k, j);
      }
    return 0;
  });
  auto own_rows = [&](const Var<Scalar>& v, int j) { return slice_rows(v, (j - 1) * B, B); };

  StepGraph<Scalar> g;
  const auto zero = [&tape] { return tape.constant(Matrix<Scalar>::Zero(1, 1)); };

  for (int k : paths)
    for (int j = 1; j <= M; ++j) {
      const auto slot = static_cast<std::size_t>(cfg.flat_index(k, j));
      g.aligned_pairs.emplace_back(own_rows(src_aligned[slot], j), tgt_aligned[slot]);
    }

  // Distillation: teacher = source-target branch, student = target branch.
  g.dtl = zero();
  if (preset.use_three_branch) {
    g.dtl = detail::guarded("L_dtl", [&] {
      require(cross_feat.has_value(), "build_step: three-branch preset without a source-target branch");
      if (teacher_override != nullptr) {
        g.teacher_probs = *teacher_override;
      } else {
        Var<Scalar> teacher = distill_logits(p, detach(*cross_feat));
        for (int j = 1; j <= M; ++j)
          g.teacher_probs.push_back(softmax_rows_value(Matrix<Scalar>(teacher.value().middleRows((j - 1) * B, B))));
      }
      return distill_loss_from_probs(g.teacher_probs, distill_logits(p, tgt_feat[2]));
    });
  }

  g.mmd = preset.use_mmd ? detail::guarded("L_mmd", [&] { return mmd_loss(g.aligned_pairs, kernel); }) : zero();

  // Classifier outputs on target and on each source's own batch.
  std::vector<std::vector<Var<Scalar>>> source_logits(static_cast<std::size_t>(M));
  detail::guarded("predictions", [&] {
    for (int k : paths)
      for (int j = 1; j <= M; ++j) {
        const auto slot = static_cast<std::size_t>(cfg.flat_index(k, j));
        g.target_probs.push_back(Var<Scalar>());
        source_logits[static_cast<std::size_t>(j - 1)].push_back(classify(p, cfg, own_rows(src_aligned[slot], j), k, j));
      }
    for (int k : paths)
      for (int j = 1; j <= M; ++j) {
        const auto slot = static_cast<std::size_t>(cfg.flat_index(k, j));
        g.target_probs[slot] = softmax_rows(classify(p, cfg, tgt_aligned[slot], k, j));
      }
    return 0;
  });

  g.rest = preset.use_rest ? detail::guarded("L_rest", [&] { return restriction_loss(g.target_probs); }) : zero();

  g.con = zero();
  if (preset.use_con) {
    g.con = detail::guarded("L_con", [&] {
      std::vector<std::pair<Var<Scalar>, Var<Scalar>>> per_domain;
      for (int j = 1; j <= M; ++j) {
        const auto& logits = source_logits[static_cast<std::size_t>(j - 1)];
        per_domain.emplace_back(softmax_rows(logits[0]), softmax_rows(logits[1]));
      }
      // Target: mean distribution over the M classifiers of each path.
      std::array<Var<Scalar>, 2> mean_probs;
      for (int k = 1; k <= 2; ++k) {
        Var<Scalar> acc = g.target_probs[static_cast<std::size_t>(cfg.flat_index(k, 1))];
        for (int j = 2; j <= M; ++j) acc = add(acc, g.target_probs[static_cast<std::size_t>(cfg.flat_index(k, j))]);
        mean_probs[static_cast<std::size_t>(k - 1)] = scale(acc, Scalar(1) / Scalar(M));
      }
      per_domain.emplace_back(mean_probs[0], mean_probs[1]);
      return consistency_loss(per_domain);
    });
  }

  g.cls = detail::guarded("L_cls", [&] {
    Var<Scalar> fused = fuse_predict(p, cfg, src_aligned);
    for (int j = 1; j <= M; ++j) g.fused_logits.push_back(own_rows(fused, j));
    return classification_loss(source_logits, g.fused_logits, batch.labels);
  });
  return g;
}

///////////////////////////////////////////
// Target-domain inference
///////////////////////////////////////////

// Aligned features A_j^k(F^k(x)) of every alignment module in flat order,
// using only the target branch of the transformer.
template <typename Scalar>
std::vector<Var<Scalar>> aligned_target_features(const ParamBindings<Scalar>& p, const ModelConfig& cfg,
                                                 const ImageBatch<Scalar>& images) {
  std::array<Var<Scalar>, 3> feat;
  if (cfg.use_cnn) feat[1] = cnn_forward(p, cfg, images);
  if (cfg.use_transformer) feat[2] = target_only_forward(p, cfg, images);
  std::vector<Var<Scalar>> out(static_cast<std::size_t>(cfg.num_classifiers()));
  for (int k : cfg.paths())
    for (int j = 1; j <= cfg.num_sources; ++j) out[static_cast<std::size_t>(cfg.flat_index(k, j))] = align(p, cfg, feat[k], k, j);
  return out;
}

}  // namespace btmuda

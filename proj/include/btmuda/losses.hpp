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
#include <optional>
#include <utility>
#include <vector>

#include "btmuda/ops.hpp"

namespace btmuda {

// The five loss components, the schedule weights, and their combination
// total = alpha*dtl + beta*con + lambda*(mmd + rest) + cls.
struct LossBundle {
  double dtl = 0;
  double con = 0;
  double mmd = 0;
  double rest = 0;
  double cls = 0;
  double alpha = 1;
  double beta = 0;
  double lambda = 0;
  double total = 0;
};

inline double total_loss(const LossBundle& b, double alpha, double beta, double lambda) {
  return alpha * b.dtl + beta * b.con + lambda * (b.mmd + b.rest) + b.cls;
}

template <typename Scalar>
Var<Scalar> total_loss(const Var<Scalar>& dtl, const Var<Scalar>& con, const Var<Scalar>& mmd, const Var<Scalar>& rest,
                       const Var<Scalar>& cls, double alpha, double beta, double lambda) {
  Var<Scalar> t = add(scale(dtl, static_cast<Scalar>(alpha)), scale(con, static_cast<Scalar>(beta)));
  t = add(t, scale(add(mmd, rest), static_cast<Scalar>(lambda)));
  return add(t, cls);
}

///////////////////////////////////////////
// Distillation
///////////////////////////////////////////

// Mean over sources of the soft cross-entropy between fixed teacher
// distributions (one batch x C matrix per source) and the student's
// log-softmax.
template <typename Scalar>
Var<Scalar> distill_loss_from_probs(const std::vector<Matrix<Scalar>>& teacher_probs, const Var<Scalar>& student_logits) {
  require(!teacher_probs.empty(), "distill_loss: no teacher");
  Var<Scalar> logp = log_softmax_rows(student_logits);
  const Scalar per_term = Scalar(-1) / (static_cast<Scalar>(student_logits.rows()) * static_cast<Scalar>(teacher_probs.size()));
  Matrix<Scalar> weights = Matrix<Scalar>::Zero(student_logits.rows(), student_logits.cols());
  for (const auto& t : teacher_probs) {
    require(t.rows() == student_logits.rows() && t.cols() == student_logits.cols(), "distill_loss: teacher/student shape mismatch");
    weights += t;
  }
  return sum(mul_const(logp, Matrix<Scalar>(weights * per_term)));
}

// Teacher logits are detached: no gradient reaches the teacher side.
template <typename Scalar>
Var<Scalar> distill_loss(const std::vector<Var<Scalar>>& teacher_logits, const Var<Scalar>& student_logits) {
  std::vector<Matrix<Scalar>> probs;
  for (const auto& t : teacher_logits) probs.push_back(softmax_rows_value(t.value()));
  return distill_loss_from_probs(probs, student_logits);
}

///////////////////////////////////////////
// Co-training consistency
///////////////////////////////////////////

inline constexpr double kProbabilityFloor = 1e-8;

// (KL(p||q) + KL(q||p)) / 2 per row, averaged over rows. Probabilities are
// clamped to 1e-8 inside the logarithm only.
template <typename Scalar>
Var<Scalar> symmetric_kl(const Var<Scalar>& p, const Var<Scalar>& q) {
  detail::same_shape(p, q, "symmetric_kl");
  const Scalar floor = static_cast<Scalar>(kProbabilityFloor);
  Var<Scalar> dlog = sub(log(clamp_min(p, floor)), log(clamp_min(q, floor)));
  return scale(sum(mul(sub(p, q), dlog)), Scalar(0.5) / static_cast<Scalar>(p.rows()));
}

// Mean over the given domains of symmetric_kl(path-1 probabilities,
// path-2 probabilities).
template <typename Scalar>
Var<Scalar> consistency_loss(const std::vector<std::pair<Var<Scalar>, Var<Scalar>>>& per_domain) {
  require(!per_domain.empty(), "consistency_loss: no domains");
  std::vector<Var<Scalar>> terms;
  for (const auto& [p1, p2] : per_domain) terms.push_back(symmetric_kl(p1, p2));
  return scale(sum(concat_rows(terms)), Scalar(1) / static_cast<Scalar>(terms.size()));
}

///////////////////////////////////////////
// Maximum mean discrepancy
///////////////////////////////////////////

// Gaussian kernels exp(-|a-b|^2 / (2 (s*sigma)^2)) averaged over the scales
// s. sigma is the median pairwise distance of the joint sample unless fixed;
// a zero median falls back to 1.
struct KernelConfig {
  std::vector<double> scales{0.25, 0.5, 1.0, 2.0, 4.0};
  std::optional<double> fixed_bandwidth;
};

// Biased squared-MMD estimate between the rows of x and of y, averaged over
// the kernel scales. The median bandwidth stays differentiable: its gradient
// flows through the selected pair distance(s).
template <typename Scalar>
Var<Scalar> mmd_squared(const Var<Scalar>& x, const Var<Scalar>& y, const KernelConfig& kernel = {}) {
  if (x.cols() != y.cols()) throw ContractViolation("mmd_squared: feature dimension mismatch");
  require(x.rows() >= 1 && y.rows() >= 1, "mmd_squared: empty sample");
  require(!kernel.scales.empty(), "mmd_squared: no kernel scales");
  Tape<Scalar>& tape = x.tape();
  const Index n = x.rows(), m = y.rows(), total = n + m;
  Var<Scalar> z = concat_rows(std::vector<Var<Scalar>>{x, y});
  Var<Scalar> d2 = pairwise_sqdist(z, z);

  Var<Scalar> sigma;
  if (kernel.fixed_bandwidth) {
    require(*kernel.fixed_bandwidth > 0, "mmd_squared: bandwidth must be positive");
    sigma = tape.constant(Matrix<Scalar>::Constant(1, 1, static_cast<Scalar>(*kernel.fixed_bandwidth)));
  } else {
    std::vector<std::pair<Index, Index>> pairs;
    for (Index i = 0; i < total; ++i)
      for (Index j = i + 1; j < total; ++j) pairs.emplace_back(i, j);
    const Matrix<Scalar>& dv = d2.value();
    std::stable_sort(pairs.begin(), pairs.end(), [&dv](const auto& a, const auto& b) {
      return dv(a.first, a.second) < dv(b.first, b.second);
    });
    const std::size_t mid = pairs.size() / 2;
    std::vector<std::pair<Index, Index>> chosen;
    if (pairs.size() % 2 == 1) {
      chosen = {pairs[mid]};
    } else {
      chosen = {pairs[mid - 1], pairs[mid]};
    }
    Var<Scalar> median = mean(sqrt(gather_elements(d2, chosen)));
    sigma = median.item() > Scalar(0) ? median : tape.constant(Matrix<Scalar>::Ones(1, 1));
  }

  // +1/n^2 on the x-x block, +1/m^2 on y-y, -1/(nm) on both cross blocks.
  Matrix<Scalar> w(total, total);
  w.topLeftCorner(n, n).setConstant(Scalar(1) / Scalar(n * n));
  w.bottomRightCorner(m, m).setConstant(Scalar(1) / Scalar(m * m));
  w.topRightCorner(n, m).setConstant(Scalar(-1) / Scalar(n * m));
  w.bottomLeftCorner(m, n).setConstant(Scalar(-1) / Scalar(n * m));

  Var<Scalar> inv_sigma2 = pow(sigma, Scalar(-2));
  std::vector<Var<Scalar>> per_scale;
  for (double s : kernel.scales) {
    Var<Scalar> coeff = scale(inv_sigma2, static_cast<Scalar>(-1.0 / (2.0 * s * s)));
    Var<Scalar> k = exp(mul_scalar(d2, coeff));
    per_scale.push_back(sum(mul_const(k, w)));
  }
  return scale(sum(concat_rows(per_scale)), Scalar(1) / static_cast<Scalar>(per_scale.size()));
}

// Mean of mmd_squared over (source, target) aligned-feature pairs, one pair
// per (path, source) alignment module.
template <typename Scalar>
Var<Scalar> mmd_loss(const std::vector<std::pair<Var<Scalar>, Var<Scalar>>>& pairs, const KernelConfig& kernel = {}) {
  require(!pairs.empty(), "mmd_loss: no feature pairs");
  std::vector<Var<Scalar>> terms;
  for (const auto& [s, t] : pairs) terms.push_back(mmd_squared(s, t, kernel));
  return scale(sum(concat_rows(terms)), Scalar(1) / static_cast<Scalar>(terms.size()));
}

///////////////////////////////////////////
// Decision-boundary restriction
///////////////////////////////////////////

// Unordered classifier pairs (m, n), m < n, in enumeration order.
inline std::vector<std::pair<int, int>> classifier_pairs(int count) {
  std::vector<std::pair<int, int>> out;
  for (int a = 0; a < count; ++a)
    for (int b = a + 1; b < count; ++b) out.emplace_back(a, b);
  return out;
}

// Sum over classifier pairs of the per-sample L1 distance between their
// target probability vectors, batch-averaged, divided by the pair count
// (M(2M-1) with both paths).
template <typename Scalar>
Var<Scalar> restriction_loss(const std::vector<Var<Scalar>>& probs) {
  require(probs.size() >= 2, "restriction_loss: need at least two classifiers");
  const auto pairs = classifier_pairs(static_cast<int>(probs.size()));
  std::vector<Var<Scalar>> terms;
  for (const auto& [a, b] : pairs) terms.push_back(sum(abs(sub(probs[static_cast<std::size_t>(a)], probs[static_cast<std::size_t>(b)]))));
  const Scalar norm = static_cast<Scalar>(probs.front().rows()) * static_cast<Scalar>(pairs.size());
  return scale(sum(concat_rows(terms)), Scalar(1) / norm);
}

///////////////////////////////////////////
// Classification
///////////////////////////////////////////

// (1/(K*M)) sum_j sum_k [CE(source logits (k, j)) + CE(fused logits of source j)]
// over the K enabled paths. source_logits[j][k] holds classifier (k, j)'s
// logits on source j's batch.
template <typename Scalar>
Var<Scalar> classification_loss(const std::vector<std::vector<Var<Scalar>>>& source_logits, const std::vector<Var<Scalar>>& fused_logits,
                                const std::vector<std::vector<int>>& labels) {
  require(!source_logits.empty() && source_logits.size() == fused_logits.size() && labels.size() == fused_logits.size(),
          "classification_loss: per-source inputs are misaligned");
  std::vector<Var<Scalar>> terms;
  std::size_t count = 0;
  for (std::size_t j = 0; j < source_logits.size(); ++j) {
    Var<Scalar> fused = cross_entropy(fused_logits[j], labels[j]);
    for (const auto& logits : source_logits[j]) {
      terms.push_back(add(cross_entropy(logits, labels[j]), fused));
      ++count;
    }
  }
  return scale(sum(concat_rows(terms)), Scalar(1) / static_cast<Scalar>(count));
}

}  // namespace btmuda

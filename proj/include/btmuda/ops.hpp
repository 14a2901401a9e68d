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
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "btmuda/tensor.hpp"

namespace btmuda {

namespace detail {

template <typename Scalar>
void same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()));
  }
}

}  // namespace detail

///////////////////////////////////////////
// Structural
///////////////////////////////////////////

// Copies the value into a gradient-free node.
template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& x) {
  return x.tape().constant(x.value());
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  require(!parts.empty(), "concat_cols: no operands");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    offsets.push_back(at);
    at += p.cols();
  }
  return parts.front().tape().record(
      "concat_cols", std::move(out), parts, [parts, offsets](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        for (std::size_t i = 0; i < parts.size(); ++i)
          t.accumulate(parts[i], g.middleCols(offsets[i], parts[i].cols()));
      });
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  require(!parts.empty(), "concat_rows: no operands");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    offsets.push_back(at);
    at += p.rows();
  }
  return parts.front().tape().record(
      "concat_rows", std::move(out), parts, [parts, offsets](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        for (std::size_t i = 0; i < parts.size(); ++i)
          t.accumulate(parts[i], g.middleRows(offsets[i], parts[i].rows()));
      });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& x, Index start, Index count) {
  require(start >= 0 && count > 0 && start + count <= x.rows(), "slice_rows: out of range");
  const Index rows = x.rows(), cols = x.cols();
  return x.tape().record("slice_rows", x.value().middleRows(start, count), {x},
                         [x, start, count, rows, cols](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> full = Matrix<Scalar>::Zero(rows, cols);
                           full.middleRows(start, count) = g;
                           t.accumulate(x, full);
                         });
}

// Rows offset, offset + stride, offset + 2*stride, ... (e.g. the class token
// of every stacked sequence).
template <typename Scalar>
Var<Scalar> strided_rows(const Var<Scalar>& x, Index stride, Index offset) {
  require(stride > 0 && offset >= 0 && offset < stride && x.rows() % stride == 0,
          "strided_rows: bad stride");
  const Index n = x.rows() / stride;
  Matrix<Scalar> out(n, x.cols());
  for (Index i = 0; i < n; ++i) out.row(i) = x.value().row(i * stride + offset);
  const Index rows = x.rows(), cols = x.cols();
  return x.tape().record("strided_rows", std::move(out), {x},
                         [x, stride, offset, n, rows, cols](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> full = Matrix<Scalar>::Zero(rows, cols);
                           for (Index i = 0; i < n; ++i) full.row(i * stride + offset) = g.row(i);
                           t.accumulate(x, full);
                         });
}

// Gathers individual elements into a column vector.
template <typename Scalar>
Var<Scalar> gather_elements(const Var<Scalar>& x, std::vector<std::pair<Index, Index>> at) {
  require(!at.empty(), "gather_elements: empty index list");
  Matrix<Scalar> out(static_cast<Index>(at.size()), 1);
  for (std::size_t i = 0; i < at.size(); ++i) {
    require(at[i].first < x.rows() && at[i].second < x.cols(), "gather_elements: out of range");
    out(static_cast<Index>(i), 0) = x.value()(at[i].first, at[i].second);
  }
  const Index rows = x.rows(), cols = x.cols();
  return x.tape().record("gather_elements", std::move(out), {x},
                         [x, at = std::move(at), rows, cols](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> full = Matrix<Scalar>::Zero(rows, cols);
                           for (std::size_t i = 0; i < at.size(); ++i)
                             full(at[i].first, at[i].second) += g(static_cast<Index>(i), 0);
                           t.accumulate(x, full);
                         });
}

///////////////////////////////////////////
// Linear algebra
///////////////////////////////////////////

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) throw ContractViolation("matmul: inner dimension mismatch");
  Matrix<Scalar> out = a.value() * b.value();
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

// x * w + bias, bias broadcast over rows.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& bias) {
  if (x.cols() != w.rows()) throw ContractViolation("linear: input width mismatch");
  require(bias.rows() == 1 && bias.cols() == w.cols(), "linear: bias shape");
  Matrix<Scalar> out = x.value() * w.value();
  out.rowwise() += bias.value().row(0);
  return x.tape().record("linear", std::move(out), {x, w, bias},
                         [x, w, bias](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           if (t.requires_grad(x)) t.accumulate(x, g * w.value().transpose());
                           if (t.requires_grad(w)) t.accumulate(w, x.value().transpose() * g);
                           if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
                         });
}

///////////////////////////////////////////
// Elementwise
///////////////////////////////////////////

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_shape(a, b, "add");
  return a.tape().record("add", a.value() + b.value(), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_shape(a, b, "sub");
  return a.tape().record("sub", a.value() - b.value(), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

// Adds a 1 x cols row to every row of x.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& x, const Var<Scalar>& row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "add_row: shape");
  Matrix<Scalar> out = x.value();
  out.rowwise() += row.value().row(0);
  return x.tape().record("add_row", std::move(out), {x, row}, [x, row](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(x, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

// Adds a period x cols block to each consecutive group of `period` rows.
template <typename Scalar>
Var<Scalar> add_tiled_rows(const Var<Scalar>& x, const Var<Scalar>& block) {
  const Index period = block.rows();
  require(block.cols() == x.cols() && period > 0 && x.rows() % period == 0, "add_tiled_rows: shape");
  Matrix<Scalar> out = x.value();
  const Index groups = x.rows() / period;
  for (Index s = 0; s < groups; ++s) out.middleRows(s * period, period) += block.value();
  return x.tape().record("add_tiled_rows", std::move(out), {x, block},
                         [x, block, period, groups](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(x, g);
                           if (!t.requires_grad(block)) return;
                           Matrix<Scalar> acc = Matrix<Scalar>::Zero(period, g.cols());
                           for (Index s = 0; s < groups; ++s) acc += g.middleRows(s * period, period);
                           t.accumulate(block, acc);
                         });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_shape(a, b, "mul");
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

// Elementwise product with a constant matrix.
template <typename Scalar>
Var<Scalar> mul_const(const Var<Scalar>& a, Matrix<Scalar> c) {
  require(a.rows() == c.rows() && a.cols() == c.cols(), "mul_const: shape");
  Matrix<Scalar> out = a.value().cwiseProduct(c);
  return a.tape().record("mul_const", std::move(out), {a},
                         [a, c = std::move(c)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(a, g.cwiseProduct(c));
                         });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar c) {
  return a.tape().record("scale", a.value() * c, {a},
                         [a, c](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(a, g * c); });
}

template <typename Scalar>
Var<Scalar> add_const(const Var<Scalar>& a, Scalar c) {
  Matrix<Scalar> out = a.value().array() + c;
  return a.tape().record("add_const", std::move(out), {a},
                         [a](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(a, g); });
}

// a * s for a 1x1 variable s.
template <typename Scalar>
Var<Scalar> mul_scalar(const Var<Scalar>& a, const Var<Scalar>& s) {
  require(s.rows() == 1 && s.cols() == 1, "mul_scalar: factor must be 1x1");
  const Scalar k = s.value()(0, 0);
  return a.tape().record("mul_scalar", a.value() * k, {a, s}, [a, s, k](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * k);
    if (t.requires_grad(s)) t.accumulate(s, Matrix<Scalar>::Constant(1, 1, g.cwiseProduct(a.value()).sum()));
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().cwiseMax(Scalar(0));
  return x.tape().record("relu", std::move(out), {x}, [x](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(x, (x.value().array() > Scalar(0)).select(g, Scalar(0)));
  });
}

// Exact GELU: x * Phi(x).
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  Matrix<Scalar> out = x.value().unaryExpr(
      [inv_sqrt2](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
  return x.tape().record("gelu", std::move(out), {x}, [x, inv_sqrt2](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
    Matrix<Scalar> d = x.value().unaryExpr([&](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    });
    if (t.fault() == Fault::GeluBackward) d *= Scalar(1.01);
    t.accumulate(x, g.cwiseProduct(d));
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().array().exp();
  Matrix<Scalar> saved = out;
  return x.tape().record("exp", std::move(out), {x}, [x, saved = std::move(saved)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(x, g.cwiseProduct(saved));
  });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& x) {
  if ((x.value().array() <= Scalar(0)).any()) throw NumericError("log: non-positive input");
  Matrix<Scalar> out = x.value().array().log();
  return x.tape().record("log", std::move(out), {x}, [x](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(x, g.cwiseQuotient(x.value()));
  });
}

// |x| with subgradient 0 at 0.
template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value().cwiseAbs();
  return x.tape().record("abs", std::move(out), {x}, [x](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> s = x.value().unaryExpr([](Scalar v) { return Scalar((v > 0) - (v < 0)); });
    t.accumulate(x, g.cwiseProduct(s));
  });
}

// sqrt with gradient 0 at exactly 0.
template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& x) {
  if ((x.value().array() < Scalar(0)).any()) throw NumericError("sqrt: negative input");
  Matrix<Scalar> out = x.value().cwiseSqrt();
  Matrix<Scalar> saved = out;
  return x.tape().record("sqrt", std::move(out), {x}, [x, saved = std::move(saved)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> d = saved.unaryExpr([](Scalar r) { return r > Scalar(0) ? Scalar(0.5) / r : Scalar(0); });
    t.accumulate(x, g.cwiseProduct(d));
  });
}

template <typename Scalar>
Var<Scalar> pow(const Var<Scalar>& x, Scalar p) {
  Matrix<Scalar> out = x.value().array().pow(p);
  return x.tape().record("pow", std::move(out), {x}, [x, p](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> d = p * x.value().array().pow(p - Scalar(1));
    t.accumulate(x, g.cwiseProduct(d));
  });
}

// max(x, lo); gradient passes only where x > lo.
template <typename Scalar>
Var<Scalar> clamp_min(const Var<Scalar>& x, Scalar lo) {
  Matrix<Scalar> out = x.value().cwiseMax(lo);
  return x.tape().record("clamp_min", std::move(out), {x}, [x, lo](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(x, (x.value().array() > lo).select(g, Scalar(0)));
  });
}

///////////////////////////////////////////
// Reductions
///////////////////////////////////////////

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  const Index rows = x.rows(), cols = x.cols();
  return x.tape().record("sum", Matrix<Scalar>::Constant(1, 1, x.value().sum()), {x},
                         [x, rows, cols](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(x, Matrix<Scalar>::Constant(rows, cols, g(0, 0)));
                         });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  const Index rows = x.rows(), cols = x.cols();
  const Scalar n = Scalar(x.value().size());
  return x.tape().record("mean", Matrix<Scalar>::Constant(1, 1, x.value().sum() / n), {x},
                         [x, rows, cols, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(x, Matrix<Scalar>::Constant(rows, cols, g(0, 0) / n));
                         });
}

// Per-row sum: rows x 1.
template <typename Scalar>
Var<Scalar> row_sum(const Var<Scalar>& x) {
  const Index cols = x.cols();
  Matrix<Scalar> out = x.value().rowwise().sum();
  return x.tape().record("row_sum", std::move(out), {x}, [x, cols](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(x, g.col(0).replicate(1, cols));
  });
}

// Mean over each consecutive group of `group` rows: (rows/group) x cols.
template <typename Scalar>
Var<Scalar> group_mean_rows(const Var<Scalar>& x, Index group) {
  require(group > 0 && x.rows() % group == 0, "group_mean_rows: rows not divisible by group");
  const Index n = x.rows() / group;
  Matrix<Scalar> out(n, x.cols());
  for (Index i = 0; i < n; ++i) out.row(i) = x.value().middleRows(i * group, group).colwise().sum() / Scalar(group);
  return x.tape().record("group_mean_rows", std::move(out), {x}, [x, group, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> full(n * group, g.cols());
    for (Index i = 0; i < n; ++i) full.middleRows(i * group, group) = (g.row(i) / Scalar(group)).replicate(group, 1);
    t.accumulate(x, full);
  });
}

///////////////////////////////////////////
// Normalizers
///////////////////////////////////////////

template <typename Scalar>
Matrix<Scalar> softmax_rows_value(const Matrix<Scalar>& x) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& x) {
  if (!x.value().allFinite()) throw NumericError("softmax: non-finite logits");
  Matrix<Scalar> out = softmax_rows_value(x.value());
  Matrix<Scalar> saved = out;
  return x.tape().record("softmax_rows", std::move(out), {x}, [x, p = std::move(saved)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> dot = g.cwiseProduct(p).rowwise().sum();
    Matrix<Scalar> d = p.cwiseProduct(g - dot.col(0).replicate(1, g.cols()));
    t.accumulate(x, d);
  });
}

template <typename Scalar>
Var<Scalar> log_softmax_rows(const Var<Scalar>& x) {
  if (!x.value().allFinite()) throw NumericError("log_softmax: non-finite logits");
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.value().row(r).maxCoeff();
    const Scalar lse = m + std::log((x.value().row(r).array() - m).exp().sum());
    out.row(r) = x.value().row(r).array() - lse;
  }
  Matrix<Scalar> p = out.array().exp();
  return x.tape().record("log_softmax_rows", std::move(out), {x}, [x, p = std::move(p)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> total = g.rowwise().sum();
    t.accumulate(x, g - p.cwiseProduct(total.col(0).replicate(1, g.cols())));
  });
}

// Row-wise layer normalization with population variance.
template <typename Scalar>
Var<Scalar> layer_norm_rows(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  require(eps > Scalar(0), "layer_norm: eps must be positive");
  const Index n = x.cols();
  require(n >= 1, "layer_norm: empty rows");
  require(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n, "layer_norm: affine shape");
  Matrix<Scalar> xhat(x.rows(), n);
  Matrix<Scalar> inv_std(x.rows(), 1);
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.value().row(r).mean();
    const Scalar var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r, 0) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r, 0);
  }
  Matrix<Scalar> out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return x.tape().record(
      "layer_norm_rows", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (!t.requires_grad(x)) return;
        Matrix<Scalar> dxhat = g.array().rowwise() * gain.value().row(0).array();
        Matrix<Scalar> dx(g.rows(), n);
        for (Index r = 0; r < g.rows(); ++r) {
          const Scalar s1 = dxhat.row(r).sum();
          const Scalar s2 = dxhat.row(r).dot(xhat.row(r));
          dx.row(r) = (inv_std(r, 0) / Scalar(n)) * (Scalar(n) * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2);
        }
        t.accumulate(x, dx);
      });
}

///////////////////////////////////////////
// Losses
///////////////////////////////////////////

// Mean softmax cross-entropy of integer labels.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::vector<int> labels) {
  require(static_cast<Index>(labels.size()) == logits.rows(), "cross_entropy: label count");
  const Index n = logits.rows();
  Matrix<Scalar> p = softmax_rows_value(logits.value());
  Scalar loss = 0;
  for (Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    require(y >= 0 && y < logits.cols(), "cross_entropy: label out of range");
    const Scalar m = logits.value().row(r).maxCoeff();
    const Scalar lse = m + std::log((logits.value().row(r).array() - m).exp().sum());
    loss += lse - logits.value()(r, y);
  }
  loss /= Scalar(n);
  return logits.tape().record(
      "cross_entropy", Matrix<Scalar>::Constant(1, 1, loss), {logits},
      [logits, labels = std::move(labels), p = std::move(p), n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> d = p;
        for (Index r = 0; r < n; ++r) d(r, labels[static_cast<std::size_t>(r)]) -= Scalar(1);
        t.accumulate(logits, d * (g(0, 0) / Scalar(n)));
      });
}

///////////////////////////////////////////
// Geometry-aware primitives
///////////////////////////////////////////

// NHWC feature map geometry: rows = count * height * width, cols = channels.
struct MapGeometry {
  Index count = 0;
  Index height = 0;
  Index width = 0;
  Index channels = 0;

  Index rows() const { return count * height * width; }
};

inline Index conv_out_extent(Index in, Index kernel, Index stride, Index pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// 2-D convolution via im2col. weight is (kernel*kernel*in_channels) x
// out_channels with row index (ky*kernel + kx)*in_channels + c.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const MapGeometry& in, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   Index kernel, Index stride, Index pad) {
  require(x.rows() == in.rows() && x.cols() == in.channels, "conv2d: input does not match geometry");
  const Index patch = kernel * kernel * in.channels;
  require(weight.rows() == patch, "conv2d: weight rows must be kernel*kernel*in_channels");
  require(bias.rows() == 1 && bias.cols() == weight.cols(), "conv2d: bias shape");
  const Index ho = conv_out_extent(in.height, kernel, stride, pad);
  const Index wo = conv_out_extent(in.width, kernel, stride, pad);
  require(ho >= 1 && wo >= 1, "conv2d: output would be empty");

  // cols(row, k) holds the input pixel feeding tap k of output pixel row.
  Matrix<Scalar> cols = Matrix<Scalar>::Zero(in.count * ho * wo, patch);
  const Matrix<Scalar>& xv = x.value();
  for (Index b = 0; b < in.count; ++b)
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox) {
        const Index orow = (b * ho + oy) * wo + ox;
        for (Index ky = 0; ky < kernel; ++ky) {
          const Index iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= in.height) continue;
          for (Index kx = 0; kx < kernel; ++kx) {
            const Index ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= in.width) continue;
            cols.row(orow).segment((ky * kernel + kx) * in.channels, in.channels) =
                xv.row((b * in.height + iy) * in.width + ix);
          }
        }
      }
  Matrix<Scalar> out = cols * weight.value();
  out.rowwise() += bias.value().row(0);
  return x.tape().record(
      "conv2d", std::move(out), {x, weight, bias},
      [x, weight, bias, in, cols = std::move(cols), kernel, stride, pad, ho, wo](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (t.requires_grad(weight)) t.accumulate(weight, cols.transpose() * g);
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (!t.requires_grad(x)) return;
        Matrix<Scalar> dcols = g * weight.value().transpose();
        Matrix<Scalar> dx = Matrix<Scalar>::Zero(in.rows(), in.channels);
        for (Index b = 0; b < in.count; ++b)
          for (Index oy = 0; oy < ho; ++oy)
            for (Index ox = 0; ox < wo; ++ox) {
              const Index orow = (b * ho + oy) * wo + ox;
              for (Index ky = 0; ky < kernel; ++ky) {
                const Index iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= in.height) continue;
                for (Index kx = 0; kx < kernel; ++kx) {
                  const Index ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= in.width) continue;
                  dx.row((b * in.height + iy) * in.width + ix) +=
                      dcols.row(orow).segment((ky * kernel + kx) * in.channels, in.channels);
                }
              }
            }
        t.accumulate(x, dx);
      });
}

// Keeps pixels (y*stride, x*stride) of an NHWC map.
template <typename Scalar>
Var<Scalar> subsample2d(const Var<Scalar>& x, const MapGeometry& in, Index stride) {
  require(x.rows() == in.rows() && x.cols() == in.channels, "subsample2d: input does not match geometry");
  const Index ho = (in.height + stride - 1) / stride;
  const Index wo = (in.width + stride - 1) / stride;
  std::vector<Index> src;
  src.reserve(static_cast<std::size_t>(in.count * ho * wo));
  for (Index b = 0; b < in.count; ++b)
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox) src.push_back((b * in.height + oy * stride) * in.width + ox * stride);
  Matrix<Scalar> out(static_cast<Index>(src.size()), in.channels);
  for (std::size_t i = 0; i < src.size(); ++i) out.row(static_cast<Index>(i)) = x.value().row(src[i]);
  const Index rows = in.rows(), channels = in.channels;
  return x.tape().record("subsample2d", std::move(out), {x},
                         [x, src = std::move(src), rows, channels](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> dx = Matrix<Scalar>::Zero(rows, channels);
                           for (std::size_t i = 0; i < src.size(); ++i) dx.row(src[i]) += g.row(static_cast<Index>(i));
                           t.accumulate(x, dx);
                         });
}

// Prepends `token` (1 x d) to each group of `per_sequence` rows.
template <typename Scalar>
Var<Scalar> prepend_token(const Var<Scalar>& x, const Var<Scalar>& token, Index per_sequence) {
  require(token.rows() == 1 && token.cols() == x.cols(), "prepend_token: token shape");
  require(per_sequence > 0 && x.rows() % per_sequence == 0, "prepend_token: rows not divisible");
  const Index seqs = x.rows() / per_sequence;
  const Index len = per_sequence + 1;
  Matrix<Scalar> out(seqs * len, x.cols());
  for (Index s = 0; s < seqs; ++s) {
    out.row(s * len) = token.value().row(0);
    out.middleRows(s * len + 1, per_sequence) = x.value().middleRows(s * per_sequence, per_sequence);
  }
  return x.tape().record("prepend_token", std::move(out), {x, token},
                         [x, token, seqs, len, per_sequence](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           if (t.requires_grad(x)) {
                             Matrix<Scalar> dx(seqs * per_sequence, g.cols());
                             for (Index s = 0; s < seqs; ++s)
                               dx.middleRows(s * per_sequence, per_sequence) = g.middleRows(s * len + 1, per_sequence);
                             t.accumulate(x, dx);
                           }
                           if (t.requires_grad(token)) {
                             Matrix<Scalar> dt = Matrix<Scalar>::Zero(1, g.cols());
                             for (Index s = 0; s < seqs; ++s) dt += g.row(s * len);
                             t.accumulate(token, dt);
                           }
                         });
}

// Scaled dot-product multi-head attention over stacked sequences.
//
// q holds query_sequences * tokens rows; k and v hold the key/value
// sequences. Query sequence s attends to key/value sequence kv_of[s]; with
// kv_of[s] == s this is self-attention, otherwise cross-attention. Columns
// are split into `heads` contiguous groups of width d/heads.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Index heads, Index tokens,
                      std::vector<Index> kv_of, std::vector<Matrix<Scalar>>* weights_out = nullptr) {
  const Index d = q.cols();
  require(heads > 0 && d % heads == 0, "attention: heads must divide the model width");
  require(k.cols() == d && v.cols() == d, "attention: width mismatch");
  require(tokens > 0 && q.rows() % tokens == 0 && k.rows() % tokens == 0 && k.rows() == v.rows(),
          "attention: rows are not whole sequences");
  const Index nq = q.rows() / tokens;
  const Index nkv = k.rows() / tokens;
  require(static_cast<Index>(kv_of.size()) == nq, "attention: kv map size");
  for (Index s : kv_of) require(s >= 0 && s < nkv, "attention: kv index out of range");
  const Index dk = d / heads;
  const Scalar inv_scale = Scalar(1) / std::sqrt(Scalar(dk));

  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(static_cast<std::size_t>(nq * heads));
  Matrix<Scalar> out(q.rows(), d);
  for (Index s = 0; s < nq; ++s) {
    const Index kv = kv_of[static_cast<std::size_t>(s)];
    for (Index h = 0; h < heads; ++h) {
      auto qs = q.value().block(s * tokens, h * dk, tokens, dk);
      auto ks = k.value().block(kv * tokens, h * dk, tokens, dk);
      auto vs = v.value().block(kv * tokens, h * dk, tokens, dk);
      Matrix<Scalar> scores = (qs * ks.transpose()) * inv_scale;
      Matrix<Scalar>& a = (*probs)[static_cast<std::size_t>(s * heads + h)];
      a = softmax_rows_value(scores);
      out.block(s * tokens, h * dk, tokens, dk).noalias() = a * vs;
    }
  }
  if (weights_out != nullptr) *weights_out = *probs;
  return q.tape().record(
      "attention", std::move(out), {q, k, v},
      [q, k, v, heads, tokens, kv_of = std::move(kv_of), probs, nq, dk, inv_scale](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(q.rows(), q.cols());
        Matrix<Scalar> dk_ = Matrix<Scalar>::Zero(k.rows(), k.cols());
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(v.rows(), v.cols());
        for (Index s = 0; s < nq; ++s) {
          const Index kv = kv_of[static_cast<std::size_t>(s)];
          for (Index h = 0; h < heads; ++h) {
            const Matrix<Scalar>& a = (*probs)[static_cast<std::size_t>(s * heads + h)];
            auto go = g.block(s * tokens, h * dk, tokens, dk);
            auto qs = q.value().block(s * tokens, h * dk, tokens, dk);
            auto ks = k.value().block(kv * tokens, h * dk, tokens, dk);
            auto vs = v.value().block(kv * tokens, h * dk, tokens, dk);
            Matrix<Scalar> da = go * vs.transpose();
            dv.block(kv * tokens, h * dk, tokens, dk).noalias() += a.transpose() * go;
            Matrix<Scalar> dot = da.cwiseProduct(a).rowwise().sum();
            Matrix<Scalar> ds = a.cwiseProduct(da - dot.col(0).replicate(1, tokens)) * inv_scale;
            dq.block(s * tokens, h * dk, tokens, dk).noalias() += ds * ks;
            dk_.block(kv * tokens, h * dk, tokens, dk).noalias() += ds.transpose() * qs;
          }
        }
        t.accumulate(q, dq);
        t.accumulate(k, dk_);
        t.accumulate(v, dv);
      });
}

// Squared Euclidean distances between the rows of a and the rows of b,
// computed from explicit differences so identical rows give exactly 0.
template <typename Scalar>
Var<Scalar> pairwise_sqdist(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.cols()) throw ContractViolation("pairwise_sqdist: feature dimension mismatch");
  const Matrix<Scalar>& av = a.value();
  const Matrix<Scalar>& bv = b.value();
  Matrix<Scalar> out(av.rows(), bv.rows());
  for (Index i = 0; i < av.rows(); ++i)
    for (Index j = 0; j < bv.rows(); ++j) out(i, j) = (av.row(i) - bv.row(j)).squaredNorm();
  return a.tape().record("pairwise_sqdist", std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const Matrix<Scalar>& av = a.value();
    const Matrix<Scalar>& bv = b.value();
    if (t.requires_grad(a)) {
      Matrix<Scalar> da = Scalar(2) * (g.rowwise().sum().asDiagonal() * av - g * bv);
      t.accumulate(a, da);
    }
    if (t.requires_grad(b)) {
      Matrix<Scalar> db = Scalar(2) * (g.colwise().sum().transpose().asDiagonal() * bv - g.transpose() * av);
      t.accumulate(b, db);
    }
  });
}

}  // namespace btmuda

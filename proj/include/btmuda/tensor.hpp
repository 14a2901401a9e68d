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

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "btmuda/errors.hpp"

namespace btmuda {

using Index = Eigen::Index;

// Every array in the library is a dense row-major matrix. Feature maps are
// stored NHWC with one row per pixel; token sequences with one row per
// token, sequences stacked back to back.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Test hook that perturbs one backward rule. Used as a negative control for
// the gradient checker; never set during training.
enum class Fault { None, GeluBackward };

template <typename Scalar>
class Tape;

// Lightweight handle to a node on a Tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const {
    require(tape_ != nullptr, "Var: null tape");
    return *tape_;
  }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix<Scalar>& value() const { return tape().value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const {
    require(rows() == 1 && cols() == 1, "Var::item: not a scalar");
    return value()(0, 0);
  }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the tape is
// already a topological order and backward() is a single reverse sweep.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  // Receives the node's output gradient and accumulates into its parents.
  using Backward = std::function<void(Tape&, const Mat&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value) { return push("constant", std::move(value), false, {}); }
  Var<Scalar> variable(Mat value) { return push("variable", std::move(value), true, {}); }

  // Appends the result of a primitive. The node requires a gradient iff one
  // of its parents does; otherwise the backward closure is dropped.
  Var<Scalar> record(std::string_view op, Mat value, std::initializer_list<Var<Scalar>> parents,
                     Backward backward) {
    return record(op, std::move(value), std::vector<Var<Scalar>>(parents), std::move(backward));
  }

  Var<Scalar> record(std::string_view op, Mat value, const std::vector<Var<Scalar>>& parents,
                     Backward backward) {
    bool needs = false;
    for (const auto& p : parents) {
      require(&p.tape() == this, std::string(op) + ": operand from another tape");
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(op, std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Mat& value(const Var<Scalar>& v) const { return node(v).value; }
  bool requires_grad(const Var<Scalar>& v) const { return node(v).requires_grad; }

  // Gradient of the last backward() root w.r.t. v; zero-sized when v did not
  // receive any gradient.
  const Mat& grad(const Var<Scalar>& v) const { return node(v).grad; }

  template <typename Expr>
  void accumulate(const Var<Scalar>& v, const Expr& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(const Var<Scalar>& root) {
    require(&root.tape() == this, "backward: root from another tape");
    require(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!nodes_[root.id()].requires_grad) return;
    nodes_[root.id()].grad = Mat::Ones(1, 1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(const Var<Scalar>& v) const { return node(v).op; }

  void set_fault(Fault f) { fault_ = f; }
  Fault fault() const { return fault_; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backward backward;
    bool requires_grad = false;
    std::string_view op;
  };

  const Node& node(const Var<Scalar>& v) const {
    require(v.id() < nodes_.size(), "Var: dangling id");
    return nodes_[v.id()];
  }

  Var<Scalar> push(std::string_view op, Mat value, bool needs, Backward backward) {
    if (!value.allFinite()) throw NumericError(std::string("non-finite value in ") + std::string(op));
    nodes_.push_back(Node{std::move(value), Mat(), std::move(backward), needs, op});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  Fault fault_ = Fault::None;
};

}  // namespace btmuda

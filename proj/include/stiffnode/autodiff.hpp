#pragma once

// Reverse-mode automatic differentiation over dense matrix values.
//
// A Tape records matrix-valued nodes in topological order. Each node stores
// its primal value, the ids of its inputs, and a backward rule that pushes
// the node's adjoint into the adjoints of its inputs. Batched data is laid
// out one sample per column, so a whole training epoch is a few dozen nodes.
//
// Every op below also has an overload on plain Eigen::MatrixXd with the
// same semantics, so numeric code and recorded code can share one template.

#include "stiffnode/densela.hpp"

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiffnode {

/// Flat parameter vector theta.
using ParamVector = Eigen::VectorXd;

namespace ad {

using Mat = Eigen::MatrixXd;

class NonFiniteGradient : public std::runtime_error {
public:
  explicit NonFiniteGradient(const std::string &what) : std::runtime_error(what) {}
};

class Tape;

class Var {
public:
  Var() = default;
  Var(Tape *tape, int id) : tape_(tape), id_(id) {}

  Tape *tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Mat &value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

private:
  Tape *tape_ = nullptr;
  int id_ = -1;
};

class Tape {
public:
  /// Pushes the adjoint of node `self` into the adjoints of its inputs.
  using Backward = std::function<void(Tape &, int self)>;

  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Mat value);
  /// Leaf that receives a gradient (a parameter slot or a differentiable input).
  Var variable(Mat value);
  /// Interior node. Inputs that carry no gradient are skipped in the sweep.
  Var record(Mat value, std::vector<int> inputs, Backward backward);

  const Mat &value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  const std::vector<int> &inputs(int id) const { return nodes_[static_cast<std::size_t>(id)].inputs; }

  /// Adjoint of a node after backward(); zero-shaped if it never received one.
  Mat adjoint(int id) const;
  Mat adjoint(Var v) const { return adjoint(v.id()); }
  /// Adjoint of the node currently being swept, valid inside a Backward rule.
  const Mat &upstream(int id) const { return nodes_[static_cast<std::size_t>(id)].adjoint; }

  /// Adds `delta` into the adjoint of `id` if that node carries a gradient.
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived> &delta) {
    auto &node = nodes_[static_cast<std::size_t>(id)];
    if (!node.needs_grad) return;
    if (node.adjoint.size() == 0) {
      node.adjoint = delta;
    } else {
      node.adjoint += delta;
    }
  }

  /// Single reverse sweep from `output` seeded with `seed` (defaults to 1 for
  /// a 1x1 output).
  void backward(Var output);
  void backward(Var output, const Mat &seed);

  void zero_adjoints();
  std::size_t size() const { return nodes_.size(); }

private:
  struct Node {
    Mat value;
    Mat adjoint;
    std::vector<int> inputs;
    Backward backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

inline const Mat &Var::value() const { return tape_->value(id_); }

// Elementwise and linear-algebra ops on recorded values.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator-(Var a);
Var operator*(Var a, Var b);  // matrix product
Var operator*(double s, Var a);
Var operator*(Var a, double s);
Var hadamard(Var a, Var b);
Var add_scalar(Var a, double s);
Var plus_constant(Var a, const Mat &c);
/// a (r x n) plus column vector v (r x 1) broadcast over columns.
Var add_colwise(Var a, Var v);
/// Each row of a (r x n) multiplied elementwise by the row vector r (1 x n).
Var mul_rowwise(Var a, Var r);
/// Column vector v (r x 1) repeated into r x cols.
Var broadcast_cols(Var v, Index cols);
/// Column-major reshape of flat[offset : offset + rows*cols].
Var slice(Var flat, Index offset, Index rows, Index cols);
Var row_block(Var a, Index start, Index count);
Var col(Var a, Index j);
Var vstack(std::span<const Var> parts);
Var sum(Var a);
/// sum_j weights(j) * sum_i a(i, j), as a 1x1 node.
Var col_weighted_sum(Var a, const Eigen::VectorXd &weights);
Var stop_gradient(Var a);

// Same ops on plain matrices.
inline Mat hadamard(const Mat &a, const Mat &b) { return a.cwiseProduct(b); }
inline Mat add_scalar(const Mat &a, double s) { return (a.array() + s).matrix(); }
inline Mat plus_constant(const Mat &a, const Mat &c) { return a + c; }
inline Mat add_colwise(const Mat &a, const Mat &v) { return a.colwise() + v.col(0); }
inline Mat mul_rowwise(const Mat &a, const Mat &r) { return a.array().rowwise() * r.row(0).array(); }
inline Mat broadcast_cols(const Mat &v, Index cols) { return v.col(0).replicate(1, cols); }
inline Mat slice(const Mat &flat, Index offset, Index rows, Index cols) {
  return Eigen::Map<const Mat>(flat.data() + offset, rows, cols);
}
inline Mat row_block(const Mat &a, Index start, Index count) { return a.middleRows(start, count); }
inline Mat col(const Mat &a, Index j) { return a.col(j); }
inline Mat stop_gradient(const Mat &a) { return a; }

/// Value and gradient of a scalar loss built on a tape from theta.
struct ValueAndGrad {
  double value = 0.0;
  ParamVector gradient;
};

/// loss_fn: (Tape&, Var theta) -> Var (1x1). One reverse sweep.
/// Throws NonFiniteGradient if any gradient component is NaN or Inf.
ValueAndGrad value_and_grad(const std::function<Var(Tape &, Var)> &loss_fn, const ParamVector &at);

inline ParamVector grad(const std::function<Var(Tape &, Var)> &loss_fn, const ParamVector &at) {
  return value_and_grad(loss_fn, at).gradient;
}

}  // namespace ad
}  // namespace stiffnode

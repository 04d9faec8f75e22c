#include "stiffnode/autodiff.hpp"

#include <cassert>
#include <utility>

namespace stiffnode::ad {

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), {}, nullptr, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::variable(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), {}, nullptr, true});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Mat value, std::vector<int> inputs, Backward backward) {
  bool needs = false;
  for (int in : inputs) needs = needs || needs_grad(in);
  nodes_.push_back(Node{std::move(value), Mat(), std::move(inputs), needs ? std::move(backward) : nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Mat Tape::adjoint(int id) const {
  const auto &node = nodes_[static_cast<std::size_t>(id)];
  if (node.adjoint.size() == 0) return Mat::Zero(node.value.rows(), node.value.cols());
  return node.adjoint;
}

void Tape::zero_adjoints() {
  for (auto &node : nodes_) node.adjoint.resize(0, 0);
}

void Tape::backward(Var output) {
  if (output.rows() != 1 || output.cols() != 1) {
    throw ShapeMismatch("backward: implicit seed needs a 1x1 output");
  }
  backward(output, Mat::Ones(1, 1));
}

void Tape::backward(Var output, const Mat &seed) {
  assert(output.tape() == this);
  const int top = output.id();
  if (seed.rows() != value(top).rows() || seed.cols() != value(top).cols()) {
    throw ShapeMismatch("backward: seed shape differs from output shape");
  }
  zero_adjoints();
  nodes_[static_cast<std::size_t>(top)].adjoint = seed;
  for (int id = top; id >= 0; --id) {
    auto &node = nodes_[static_cast<std::size_t>(id)];
    if (!node.backward || node.adjoint.size() == 0) continue;
    node.backward(*this, id);
  }
}

namespace {

Tape &tape_of(Var a, [[maybe_unused]] Var b) {
  assert(a.tape() == b.tape());
  return *a.tape();
}

void require_same_shape(const char *op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatch(std::string(op) + ": operand shapes differ");
  }
}

}  // namespace

Var operator+(Var a, Var b) {
  require_same_shape("add", a, b);
  Tape &t = tape_of(a, b);
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape &tp, int self) {
    tp.accumulate(ia, tp.upstream(self));
    tp.accumulate(ib, tp.upstream(self));
  });
}

Var operator-(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tape &t = tape_of(a, b);
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape &tp, int self) {
    tp.accumulate(ia, tp.upstream(self));
    tp.accumulate(ib, -tp.upstream(self));
  });
}

Var operator-(Var a) {
  const int ia = a.id();
  return a.tape()->record(-a.value(), {ia}, [ia](Tape &tp, int self) { tp.accumulate(ia, -tp.upstream(self)); });
}

Var operator*(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
  Tape &t = tape_of(a, b);
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value(), {ia, ib}, [ia, ib](Tape &tp, int self) {
    const Mat &g = tp.upstream(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var operator*(double s, Var a) {
  const int ia = a.id();
  return a.tape()->record(s * a.value(), {ia}, [ia, s](Tape &tp, int self) { tp.accumulate(ia, s * tp.upstream(self)); });
}

Var operator*(Var a, double s) { return s * a; }

Var hadamard(Var a, Var b) {
  require_same_shape("hadamard", a, b);
  Tape &t = tape_of(a, b);
  const int ia = a.id(), ib = b.id();
  return t.record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape &tp, int self) {
    const Mat &g = tp.upstream(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

Var add_scalar(Var a, double s) {
  const int ia = a.id();
  return a.tape()->record(add_scalar(a.value(), s), {ia},
                          [ia](Tape &tp, int self) { tp.accumulate(ia, tp.upstream(self)); });
}

Var plus_constant(Var a, const Mat &c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw ShapeMismatch("plus_constant: shapes differ");
  const int ia = a.id();
  return a.tape()->record(a.value() + c, {ia}, [ia](Tape &tp, int self) { tp.accumulate(ia, tp.upstream(self)); });
}

Var add_colwise(Var a, Var v) {
  if (v.cols() != 1 || v.rows() != a.rows()) throw ShapeMismatch("add_colwise: bias is not a matching column");
  Tape &t = tape_of(a, v);
  const int ia = a.id(), iv = v.id();
  return t.record(add_colwise(a.value(), v.value()), {ia, iv}, [ia, iv](Tape &tp, int self) {
    const Mat &g = tp.upstream(self);
    tp.accumulate(ia, g);
    if (tp.needs_grad(iv)) tp.accumulate(iv, g.rowwise().sum());
  });
}

Var mul_rowwise(Var a, Var r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw ShapeMismatch("mul_rowwise: scale is not a matching row");
  Tape &t = tape_of(a, r);
  const int ia = a.id(), ir = r.id();
  return t.record(mul_rowwise(a.value(), r.value()), {ia, ir}, [ia, ir](Tape &tp, int self) {
    const Mat &g = tp.upstream(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, mul_rowwise(g, tp.value(ir)));
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.cwiseProduct(tp.value(ia)).colwise().sum());
  });
}

Var broadcast_cols(Var v, Index cols) {
  if (v.cols() != 1) throw ShapeMismatch("broadcast_cols: input is not a column");
  const int iv = v.id();
  return v.tape()->record(broadcast_cols(v.value(), cols), {iv},
                          [iv](Tape &tp, int self) { tp.accumulate(iv, tp.upstream(self).rowwise().sum()); });
}

Var slice(Var flat, Index offset, Index rows, Index cols) {
  if (flat.cols() != 1 || offset < 0 || offset + rows * cols > flat.rows()) {
    throw ShapeMismatch("slice: range outside the flat vector");
  }
  const int iflat = flat.id();
  const Index total = flat.rows();
  return flat.tape()->record(slice(flat.value(), offset, rows, cols), {iflat},
                             [iflat, offset, rows, cols, total](Tape &tp, int self) {
                               Mat delta = Mat::Zero(total, 1);
                               delta.middleRows(offset, rows * cols) =
                                   Eigen::Map<const Eigen::VectorXd>(tp.upstream(self).data(), rows * cols);
                               tp.accumulate(iflat, delta);
                             });
}

Var row_block(Var a, Index start, Index count) {
  if (start < 0 || start + count > a.rows()) throw ShapeMismatch("row_block: rows out of range");
  const int ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  return a.tape()->record(row_block(a.value(), start, count), {ia}, [ia, start, count, rows, cols](Tape &tp, int self) {
    Mat delta = Mat::Zero(rows, cols);
    delta.middleRows(start, count) = tp.upstream(self);
    tp.accumulate(ia, delta);
  });
}

Var col(Var a, Index j) {
  if (j < 0 || j >= a.cols()) throw ShapeMismatch("col: column out of range");
  const int ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  return a.tape()->record(a.value().col(j), {ia}, [ia, j, rows, cols](Tape &tp, int self) {
    Mat delta = Mat::Zero(rows, cols);
    delta.col(j) = tp.upstream(self);
    tp.accumulate(ia, delta);
  });
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeMismatch("vstack: no parts");
  Tape &t = *parts.front().tape();
  const Index cols = parts.front().cols();
  Index rows = 0;
  std::vector<int> ids;
  std::vector<Index> offsets;
  for (const Var &p : parts) {
    if (p.cols() != cols) throw ShapeMismatch("vstack: column counts differ");
    ids.push_back(p.id());
    offsets.push_back(rows);
    rows += p.rows();
  }
  Mat value(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) value.middleRows(offsets[k], parts[k].rows()) = parts[k].value();
  return t.record(std::move(value), ids, [ids, offsets](Tape &tp, int self) {
    const Mat &g = tp.upstream(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      tp.accumulate(ids[k], g.middleRows(offsets[k], tp.value(ids[k]).rows()));
    }
  });
}

Var sum(Var a) {
  const int ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  Mat value(1, 1);
  value(0, 0) = a.value().sum();
  return a.tape()->record(std::move(value), {ia}, [ia, rows, cols](Tape &tp, int self) {
    tp.accumulate(ia, Mat::Constant(rows, cols, tp.upstream(self)(0, 0)));
  });
}

Var col_weighted_sum(Var a, const Eigen::VectorXd &weights) {
  if (weights.size() != a.cols()) throw ShapeMismatch("col_weighted_sum: weight count differs from columns");
  const int ia = a.id();
  const Index rows = a.rows();
  Mat value(1, 1);
  // Column sums first, then one dot product: fixed summation order.
  value(0, 0) = a.value().colwise().sum().dot(weights.transpose());
  return a.tape()->record(std::move(value), {ia}, [ia, rows, weights](Tape &tp, int self) {
    const double g = tp.upstream(self)(0, 0);
    tp.accumulate(ia, (g * weights.transpose()).replicate(rows, 1));
  });
}

Var stop_gradient(Var a) { return a.tape()->constant(a.value()); }

ValueAndGrad value_and_grad(const std::function<Var(Tape &, Var)> &loss_fn, const ParamVector &at) {
  Tape tape;
  Var theta = tape.variable(at);
  Var loss = loss_fn(tape, theta);
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeMismatch("grad: loss is not scalar");
  tape.backward(loss);
  ValueAndGrad out;
  out.value = loss.value()(0, 0);
  out.gradient = tape.adjoint(theta);
  if (!out.gradient.allFinite()) throw NonFiniteGradient("grad: gradient has non-finite components");
  return out;
}

}  // namespace stiffnode::ad

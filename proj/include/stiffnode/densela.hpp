#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace stiffnode {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// d-dimensional ODE state.
using StateVector = Vector<double>;
/// Dense operator. Eigen's default column-major storage.
using DenseMatrix = Matrix<double>;

class ShapeMismatch : public std::invalid_argument {
public:
  explicit ShapeMismatch(const std::string &what) : std::invalid_argument(what) {}
};

class SingularMatrix : public std::runtime_error {
public:
  explicit SingularMatrix(const std::string &what) : std::runtime_error(what) {}
};

/// Max absolute row sum.
template <typename Derived>
typename Derived::RealScalar norm_inf(const Eigen::MatrixBase<Derived> &a) {
  if (a.size() == 0) return 0;
  return a.cwiseAbs().rowwise().sum().maxCoeff();
}

/// Euclidean norm for vectors, Frobenius for matrices.
template <typename Derived>
typename Derived::RealScalar norm_2(const Eigen::MatrixBase<Derived> &a) {
  return a.norm();
}

template <typename DA, typename DB>
auto matmul(const Eigen::MatrixBase<DA> &a, const Eigen::MatrixBase<DB> &b) {
  if (a.cols() != b.rows()) {
    throw ShapeMismatch("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " times " +
                        std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  return (a * b).eval();
}

template <typename DA, typename DB>
auto matvec(const Eigen::MatrixBase<DA> &a, const Eigen::MatrixBase<DB> &x) {
  if (x.cols() != 1) throw ShapeMismatch("matvec: right operand is not a column vector");
  return matmul(a, x);
}

template <typename Derived>
auto transpose(const Eigen::MatrixBase<Derived> &a) {
  return a.transpose().eval();
}

/// PA = LU with partial pivoting.
///
/// Construction rejects matrices whose smallest pivot falls below
/// 1e-14 times the largest row norm of the input.
template <typename Scalar>
class LUFactorization {
public:
  static constexpr double kPivotTolerance = 1e-14;

  LUFactorization() = default;

  explicit LUFactorization(const Matrix<Scalar> &a) {
    if (a.rows() != a.cols()) {
      throw ShapeMismatch("lu_factor: matrix is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
    }
    if (a.rows() == 0) throw ShapeMismatch("lu_factor: empty matrix");
    lu_.compute(a);
    const Scalar scale = norm_inf(a);
    const Scalar min_pivot = lu_.matrixLU().diagonal().cwiseAbs().minCoeff();
    if (!(min_pivot > kPivotTolerance * scale)) {
      throw SingularMatrix("lu_factor: pivot " + std::to_string(min_pivot) + " below tolerance for matrix of row norm " +
                           std::to_string(scale));
    }
  }

  Index dim() const { return lu_.rows(); }

  /// Packed L (unit lower, implicit diagonal) and U factors.
  const Matrix<Scalar> &packed() const { return lu_.matrixLU(); }

  /// Row permutation as an index list: row i of PA is row perm[i] of A.
  Eigen::VectorXi pivots() const {
    Eigen::VectorXi p(dim());
    const auto &perm = lu_.permutationP().indices();
    for (Index i = 0; i < dim(); ++i) p(perm(i)) = static_cast<int>(i);
    return p;
  }

  template <typename Derived>
  Matrix<Scalar> solve(const Eigen::MatrixBase<Derived> &b) const {
    check_rows(b.rows());
    return lu_.solve(b);
  }

  /// Solves A^T x = b.
  template <typename Derived>
  Matrix<Scalar> solve_transpose(const Eigen::MatrixBase<Derived> &b) const {
    check_rows(b.rows());
    return lu_.transpose().solve(b);
  }

  Scalar determinant() const { return lu_.determinant(); }

private:
  void check_rows(Index rows) const {
    if (rows != dim()) {
      throw ShapeMismatch("solve: right-hand side has " + std::to_string(rows) + " rows, factorization has " +
                          std::to_string(dim()));
    }
  }

  Eigen::PartialPivLU<Matrix<Scalar>> lu_;
};

template <typename Derived>
LUFactorization<typename Derived::Scalar> lu_factor(const Eigen::MatrixBase<Derived> &a) {
  return LUFactorization<typename Derived::Scalar>(a.eval());
}

template <typename Scalar, typename Derived>
Vector<Scalar> solve(const LUFactorization<Scalar> &f, const Eigen::MatrixBase<Derived> &b) {
  if (b.cols() != 1) throw ShapeMismatch("solve: right-hand side is not a vector");
  return f.solve(b);
}

}  // namespace stiffnode

#pragma once

#include "stiffnode/densela.hpp"

#include <cmath>
#include <stdexcept>

namespace stiffnode {

class ExpmOverflow : public std::overflow_error {
public:
  explicit ExpmOverflow(const std::string &what) : std::overflow_error(what) {}
};

template <typename MatrixType>
struct ExpmResult {
  MatrixType value;
  int scaling = 0;  // s in value = r13(A / 2^s)^(2^s)
  int pade_order = 13;
};

namespace detail {

// Degree-13 Pade coefficients and the inf-norm bound below which r13 is
// accurate to unit roundoff.
inline constexpr double kPade13[] = {64764752532480000.0,
                                     32382376266240000.0,
                                     7771770303897600.0,
                                     1187353796428800.0,
                                     129060195264000.0,
                                     10559470521600.0,
                                     670442572800.0,
                                     33522128640.0,
                                     1323241920.0,
                                     40840800.0,
                                     960960.0,
                                     16380.0,
                                     182.0,
                                     1.0};
inline constexpr double kTheta13 = 5.371920351148152;
inline constexpr double kOverflowLimit = 1e300;

template <typename Derived>
void check_overflow(const Eigen::MatrixBase<Derived> &m, const char *stage) {
  const double peak = m.cwiseAbs().maxCoeff();
  if (!(peak <= kOverflowLimit)) throw ExpmOverflow(std::string("expm: overflow during ") + stage);
}

}  // namespace detail

/// Matrix exponential by scaling and squaring with a degree-13 Pade
/// approximant. The scaling exponent s is the smallest with
/// ||A / 2^s||_inf <= 5.37.
template <typename Derived>
ExpmResult<typename Derived::PlainObject> expm(const Eigen::MatrixBase<Derived> &a) {
  using MatrixType = typename Derived::PlainObject;
  if (a.rows() != a.cols()) throw ShapeMismatch("expm: matrix is not square");
  if (!a.allFinite()) throw std::domain_error("expm: non-finite input");

  ExpmResult<MatrixType> out;
  const Index n = a.rows();
  if (n == 0) return out;

  const double norm = norm_inf(a);
  if (norm == 0.0) {
    out.value = MatrixType::Identity(n, n);
    return out;
  }
  if (norm > detail::kTheta13) {
    out.scaling = std::max(0, static_cast<int>(std::ceil(std::log2(norm / detail::kTheta13))));
    while (std::ldexp(norm, -out.scaling) > detail::kTheta13) ++out.scaling;
  }

  const MatrixType A = a * std::ldexp(1.0, -out.scaling);
  const auto &b = detail::kPade13;
  const MatrixType I = MatrixType::Identity(n, n);
  const MatrixType A2 = A * A;
  const MatrixType A4 = A2 * A2;
  const MatrixType A6 = A4 * A2;

  MatrixType inner = b[13] * A6 + b[11] * A4 + b[9] * A2;
  MatrixType U = A * (A6 * inner + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * I);
  inner = b[12] * A6 + b[10] * A4 + b[8] * A2;
  MatrixType V = A6 * inner + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * I;
  detail::check_overflow(U, "pade evaluation");
  detail::check_overflow(V, "pade evaluation");

  MatrixType P = V + U;
  MatrixType Q = V - U;
  MatrixType R = Q.partialPivLu().solve(P);
  if (!R.allFinite()) throw ExpmOverflow("expm: pade denominator is singular");

  for (int k = 0; k < out.scaling; ++k) {
    R = (R * R).eval();
    detail::check_overflow(R, "squaring");
  }
  out.value = std::move(R);
  return out;
}

/// Frechet derivative D expm(A)[E], read from the upper-right block of
/// expm([[A, E], [0, A]]). E is rescaled to the norm of A before the block
/// exponential so the perturbation does not inflate the scaling exponent.
template <typename DA, typename DE>
typename DA::PlainObject expm_frechet(const Eigen::MatrixBase<DA> &a, const Eigen::MatrixBase<DE> &e) {
  using Scalar = typename DA::Scalar;
  if (a.rows() != a.cols() || e.rows() != a.rows() || e.cols() != a.cols()) {
    throw ShapeMismatch("expm_frechet: A and E must be square and of equal shape");
  }
  const Index n = a.rows();
  const double e_norm = norm_inf(e);
  if (e_norm == 0.0) return DA::PlainObject::Zero(n, n);
  const double a_norm = norm_inf(a);
  const double factor = a_norm > 0.0 ? a_norm / e_norm : 1.0 / e_norm;

  constexpr int kBlock = DA::RowsAtCompileTime == Eigen::Dynamic ? Eigen::Dynamic : 2 * DA::RowsAtCompileTime;
  using BlockMatrix = Eigen::Matrix<Scalar, kBlock, kBlock>;
  BlockMatrix big = BlockMatrix::Zero(2 * n, 2 * n);
  big.topLeftCorner(n, n) = a;
  big.topRightCorner(n, n) = factor * e;
  big.bottomRightCorner(n, n) = a;
  const auto block = expm(big);
  return block.value.topRightCorner(n, n) / factor;
}

/// Adjoint of the Frechet operator: <W, D expm(A)[E]> = <D*[W], E>.
/// Equal to D expm(A^T)[W].
template <typename DA, typename DW>
typename DA::PlainObject expm_frechet_adjoint(const Eigen::MatrixBase<DA> &a, const Eigen::MatrixBase<DW> &w) {
  return expm_frechet(a.transpose().eval(), w);
}

/// expm on a dynamic matrix, routed through fixed-size kernels for d <= 4.
DenseMatrix expm_dense(const DenseMatrix &a);
/// expm_frechet_adjoint on dynamic matrices, fixed-size kernels for d <= 4.
DenseMatrix expm_frechet_adjoint_dense(const DenseMatrix &a, const DenseMatrix &w);

}  // namespace stiffnode

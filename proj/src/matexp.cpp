#include "stiffnode/matexp.hpp"

namespace stiffnode {

namespace {

template <int N>
DenseMatrix expm_fixed(const DenseMatrix &a) {
  const Eigen::Matrix<double, N, N> fixed = a;
  return expm(fixed).value;
}

template <int N>
DenseMatrix frechet_adjoint_fixed(const DenseMatrix &a, const DenseMatrix &w) {
  const Eigen::Matrix<double, N, N> fa = a;
  const Eigen::Matrix<double, N, N> fw = w;
  return expm_frechet_adjoint(fa, fw);
}

}  // namespace

DenseMatrix expm_dense(const DenseMatrix &a) {
  if (a.rows() != a.cols()) throw ShapeMismatch("expm: matrix is not square");
  switch (a.rows()) {
    case 1: return expm_fixed<1>(a);
    case 2: return expm_fixed<2>(a);
    case 3: return expm_fixed<3>(a);
    case 4: return expm_fixed<4>(a);
    default: return expm(a).value;
  }
}

DenseMatrix expm_frechet_adjoint_dense(const DenseMatrix &a, const DenseMatrix &w) {
  if (a.rows() != a.cols() || w.rows() != a.rows() || w.cols() != a.cols()) {
    throw ShapeMismatch("expm_frechet_adjoint: shapes differ");
  }
  switch (a.rows()) {
    case 1: return frechet_adjoint_fixed<1>(a, w);
    case 2: return frechet_adjoint_fixed<2>(a, w);
    case 3: return frechet_adjoint_fixed<3>(a, w);
    case 4: return frechet_adjoint_fixed<4>(a, w);
    default: return expm_frechet_adjoint(a, w);
  }
}

}  // namespace stiffnode

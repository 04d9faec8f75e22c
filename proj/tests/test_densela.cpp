#include "oracles.hpp"

#include <stiffnode/densela.hpp>

#include <doctest.h>

using namespace stiffnode;

TEST_SUITE("densela") {

TEST_CASE("identity factorization solves trivially") {
  const DenseMatrix I = DenseMatrix::Identity(3, 3);
  const auto lu = lu_factor(I);
  StateVector b(3);
  b << 1.5, -2.0, 7.0;
  CHECK((solve(lu, b) - b).cwiseAbs().maxCoeff() == 0.0);
  CHECK(lu.determinant() == doctest::Approx(1.0));
}

TEST_CASE("diagonal and triangular systems") {
  DenseMatrix D(2, 2);
  D << 2, 0, 0, 4;
  StateVector b(2);
  b << 2, 4;
  const StateVector x = solve(lu_factor(D), b);
  CHECK(x(0) == doctest::Approx(1.0));
  CHECK(x(1) == doctest::Approx(1.0));

  DenseMatrix U(2, 2);
  U << 1, 1, 0, 1;
  b << 2, 1;
  const StateVector y = solve(lu_factor(U), b);
  CHECK(y(0) == doctest::Approx(1.0));
  CHECK(y(1) == doctest::Approx(1.0));
}

TEST_CASE("random well-conditioned systems recover the constructed solution") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = trial % 2 == 0 ? 10 : 20;
    DenseMatrix A = oracle::random_matrix(rng, n, n) + 2.0 * static_cast<double>(n) * DenseMatrix::Identity(n, n) / 4.0;
    const StateVector x_true = oracle::random_matrix(rng, n, 1);
    const StateVector b = A * x_true;
    const auto lu = lu_factor(A);
    const StateVector x = solve(lu, b);
    CHECK((x - x_true).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((A * x - b).cwiseAbs().maxCoeff() / b.cwiseAbs().maxCoeff() < 1e-12);
    // transposed solve against the independent elimination
    const StateVector xt = lu.solve_transpose(b);
    CHECK((xt - oracle::gauss_solve(A.transpose(), b)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("pivot permutation reproduces PA = LU") {
  std::mt19937_64 rng(3);
  const DenseMatrix A = oracle::random_matrix(rng, 6, 6);
  const auto lu = lu_factor(A);
  const DenseMatrix &P = lu.packed();
  DenseMatrix L = P.triangularView<Eigen::StrictlyLower>();
  L.diagonal().setOnes();
  const DenseMatrix U = P.triangularView<Eigen::Upper>();
  const auto perm = lu.pivots();
  DenseMatrix PA(6, 6);
  for (Index i = 0; i < 6; ++i) PA.row(i) = A.row(perm(i));
  CHECK((PA - L * U).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("singular and misshaped inputs are reported") {
  DenseMatrix S(2, 2);
  S << 1, 2, 2, 4;
  CHECK_THROWS_AS(lu_factor(S), SingularMatrix);
  CHECK_THROWS_AS(lu_factor(DenseMatrix(2, 3)), ShapeMismatch);
  const auto lu = lu_factor(DenseMatrix::Identity(2, 2));
  CHECK_THROWS_AS(solve(lu, StateVector::Ones(3)), ShapeMismatch);
  CHECK_THROWS_AS(matmul(DenseMatrix(2, 3), DenseMatrix(2, 3)), ShapeMismatch);
}

TEST_CASE("norms and products") {
  DenseMatrix A(2, 2);
  A << 1, -2, 3, 0;
  CHECK(norm_inf(A) == 3.0);
  StateVector v(2);
  v << 3, 4;
  CHECK(norm_2(v) == doctest::Approx(5.0));

  std::mt19937_64 rng(5);
  const DenseMatrix X = oracle::random_matrix(rng, 5, 5), Y = oracle::random_matrix(rng, 5, 5);
  CHECK((matmul(X, DenseMatrix::Identity(5, 5)) - X).cwiseAbs().maxCoeff() == 0.0);
  CHECK((transpose(matmul(X, Y)) - matmul(transpose(Y), transpose(X))).cwiseAbs().maxCoeff() < 1e-14);

  const DenseMatrix P = oracle::random_matrix(rng, 8, 8), Q = oracle::random_matrix(rng, 8, 8),
                    R = oracle::random_matrix(rng, 8, 8);
  const DenseMatrix left = matmul(matmul(P, Q), R), right = matmul(P, matmul(Q, R));
  CHECK((left - right).cwiseAbs().maxCoeff() / left.cwiseAbs().maxCoeff() < 1e-12);
  const StateVector w = oracle::random_matrix(rng, 5, 1);
  CHECK((matvec(X, w) - X * w).cwiseAbs().maxCoeff() == 0.0);
}

}

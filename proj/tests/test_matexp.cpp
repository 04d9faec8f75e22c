#include "oracles.hpp"

#include <stiffnode/matexp.hpp>

#include <doctest.h>

using namespace stiffnode;

namespace {

double rel_err(const DenseMatrix &got, const DenseMatrix &want) {
  return (got - want).cwiseAbs().maxCoeff() / std::max(want.cwiseAbs().maxCoeff(), 1e-300);
}

DenseMatrix random_symmetric(std::mt19937_64 &rng, Index n, double norm) {
  DenseMatrix a = oracle::random_matrix(rng, n, n);
  a = 0.5 * (a + a.transpose()).eval();
  return a * (norm / norm_inf(a));
}

}  // namespace

TEST_SUITE("matexp") {

TEST_CASE("zero, diagonal and rotation") {
  CHECK(rel_err(expm(DenseMatrix::Zero(4, 4)).value, DenseMatrix::Identity(4, 4)) == 0.0);

  const double h = 0.01 / 9.0;
  DenseMatrix a(1, 1);
  a << -10000.0 * h;
  const auto r = expm(a);
  CHECK(std::abs(r.value(0, 0) - std::exp(-10000.0 * h)) / std::exp(-10000.0 * h) < 1e-13);
  CHECK(r.scaling >= 1);
  CHECK(r.pade_order == 13);

  DenseMatrix d = DenseMatrix::Zero(3, 3);
  d.diagonal() << -3.0, 0.5, 2.0;
  DenseMatrix want = DenseMatrix::Zero(3, 3);
  want.diagonal() << std::exp(-3.0), std::exp(0.5), std::exp(2.0);
  CHECK(rel_err(expm(d).value, want) < 1e-14);

  const double t = 0.7;
  DenseMatrix rot(2, 2);
  rot << 0, t, -t, 0;
  DenseMatrix cs(2, 2);
  cs << std::cos(t), std::sin(t), -std::sin(t), std::cos(t);
  CHECK(rel_err(expm(rot).value, cs) < 1e-15);
}

TEST_CASE("symmetric matrices against the Jacobi eigen oracle") {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (Index n : {2, 5, 8, 10}) {
    for (double norm : {0.1, 3.0, 50.0, 1e3, 1e4}) {
      // negative-definite shift keeps entries representable at large norms
      DenseMatrix a = random_symmetric(rng, n, norm);
      if (norm > 100.0) a -= norm * DenseMatrix::Identity(n, n);
      worst = std::max(worst, rel_err(expm(a).value, oracle::expm_symmetric(a)));
    }
  }
  CHECK(worst < 1e-11);
}

TEST_CASE("algebraic identities") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = 1 + trial % 6;
    DenseMatrix a = oracle::random_matrix(rng, n, n);
    a *= 10.0 / norm_inf(a) * (0.1 + 0.09 * trial);
    const DenseMatrix e = expm(a).value;
    CHECK(rel_err(e * e, expm(2.0 * a).value) < 1e-10);
    CHECK(rel_err(expm(a.transpose()).value, e.transpose()) < 1e-12);
    const double det = lu_factor(e).determinant();
    CHECK(std::abs(det - std::exp(a.trace())) / std::exp(a.trace()) < 1e-8);
  }
}

TEST_CASE("fixed-size kernels agree with the dynamic path") {
  std::mt19937_64 rng(9);
  for (Index n = 1; n <= 6; ++n) {
    const DenseMatrix a = 4.0 * oracle::random_matrix(rng, n, n);
    const DenseMatrix w = oracle::random_matrix(rng, n, n);
    CHECK(rel_err(expm_dense(a), expm(a).value) < 1e-14);
    CHECK(rel_err(expm_frechet_adjoint_dense(a, w), expm_frechet_adjoint(a, w)) < 1e-14);
  }
}

TEST_CASE("overflow is reported") {
  DenseMatrix a(1, 1);
  a << 800.0;
  CHECK_THROWS_AS(expm(a), ExpmOverflow);
  a << std::nan("");
  CHECK_THROWS(expm(a));
  CHECK_THROWS_AS(expm(DenseMatrix(2, 3)), ShapeMismatch);
}

TEST_CASE("Frechet derivative") {
  const DenseMatrix zero = DenseMatrix::Zero(3, 3);
  std::mt19937_64 rng(13);
  const DenseMatrix a3 = oracle::random_matrix(rng, 3, 3);
  CHECK(expm_frechet(a3, zero).cwiseAbs().maxCoeff() == 0.0);

  DenseMatrix ad = DenseMatrix::Zero(3, 3), ed = DenseMatrix::Zero(3, 3);
  ad.diagonal() << -1.0, 0.3, 2.0;
  ed.diagonal() << 0.5, -2.0, 1.0;
  DenseMatrix want = DenseMatrix::Zero(3, 3);
  for (Index i = 0; i < 3; ++i) want(i, i) = std::exp(ad(i, i)) * ed(i, i);
  CHECK(rel_err(expm_frechet(ad, ed), want) < 1e-13);

  const double eps = 1e-6;
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const DenseMatrix a = 2.0 * oracle::random_matrix(rng, 5, 5);
    const DenseMatrix e = oracle::random_matrix(rng, 5, 5);
    const DenseMatrix fd = (expm(a + eps * e).value - expm(a - eps * e).value) / (2.0 * eps);
    worst = std::max(worst, rel_err(expm_frechet(a, e), fd));

    const DenseMatrix e2 = oracle::random_matrix(rng, 5, 5);
    const DenseMatrix lhs = expm_frechet(a, 2.0 * e - 3.0 * e2);
    const DenseMatrix rhs = 2.0 * expm_frechet(a, e) - 3.0 * expm_frechet(a, e2);
    CHECK(rel_err(lhs, rhs) < 1e-10);

    // adjoint pairing <W, D[E]> = <D*[W], E>
    const DenseMatrix w = oracle::random_matrix(rng, 5, 5);
    const double left = (w.array() * expm_frechet(a, e).array()).sum();
    const double right = (expm_frechet_adjoint(a, w).array() * e.array()).sum();
    CHECK(std::abs(left - right) / std::abs(left) < 1e-10);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("Frechet derivative at larger norms") {
  std::mt19937_64 rng(17);
  DenseMatrix a = -DenseMatrix::Identity(4, 4) * 20.0 + 5.0 * oracle::random_matrix(rng, 4, 4);
  const DenseMatrix e = oracle::random_matrix(rng, 4, 4);
  const double eps = 1e-6 * norm_inf(a);
  const DenseMatrix fd = (expm(a + eps * e).value - expm(a - eps * e).value) / (2.0 * eps);
  const DenseMatrix got = expm_frechet(a, e);
  CHECK((got - fd).cwiseAbs().maxCoeff() <= 1e-5 * std::max(fd.cwiseAbs().maxCoeff(), 1e-300) + 1e-300);
}

}

#include "nets.hpp"
#include "oracles.hpp"

#include <stiffnode/matexp.hpp>
#include <stiffnode/odeint.hpp>

#include <doctest.h>

using namespace stiffnode;

namespace {

VectorField linear_field(const DenseMatrix &A) {
  return VectorField(
      static_cast<int>(A.rows()), [A](const Mat &Y) -> Mat { return A * Y; },
      [A](const StateVector &) -> DenseMatrix { return A; });
}

VectorField scalar_field(double lambda) { return linear_field(DenseMatrix::Constant(1, 1, lambda)); }

VectorField zero_field(int d) {
  return VectorField(
      d, [](const Mat &Y) -> Mat { return Mat::Zero(Y.rows(), Y.cols()); },
      [d](const StateVector &) -> DenseMatrix { return DenseMatrix::Zero(d, d); });
}

VectorField cubic_decay() {
  return VectorField(
      1, [](const Mat &Y) -> Mat { return -Y.array().cube().matrix(); },
      [](const StateVector &y) -> DenseMatrix { return DenseMatrix::Constant(1, 1, -3.0 * y(0) * y(0)); });
}
double cubic_decay_exact(double t) { return 1.0 / std::sqrt(2.0 * t + 1.0); }

VectorField chem3_field() {
  return VectorField(3, [](const Mat &Y) -> Mat {
    Mat out(3, Y.cols());
    for (Index k = 0; k < Y.cols(); ++k) out.col(k) = oracle::chem3(Y.col(k));
    return out;
  });
}

StateVector chem3_y0() {
  StateVector y(3);
  y << 15, 7, 10;
  return y;
}

DenseMatrix tridiagonal10() {
  DenseMatrix T = DenseMatrix::Zero(10, 10);
  const double diag[] = {-10, -20, -50, -100, -500, -1000, -5000, -10000, -20000, -50000};
  for (Index i = 0; i < 10; ++i) {
    T(i, i) = diag[i];
    if (i > 0) T(i, i - 1) = 5.0;
    if (i < 9) T(i, i + 1) = 5.0;
  }
  return T;
}

std::vector<double> uniform_grid(double t0, double t1, int n) {
  std::vector<double> t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = t0 + (t1 - t0) * i / (n - 1);
  return t;
}

double global_error_slope(Scheme s, const std::vector<int> &steps) {
  std::vector<double> hs, errs;
  for (int n : steps) {
    const auto traj = integrate_fixed(s, cubic_decay(), StateVector::Ones(1), uniform_grid(0.0, 1.0, n + 1));
    hs.push_back(1.0 / n);
    errs.push_back(std::abs(traj.states(0, n) - cubic_decay_exact(1.0)));
  }
  return oracle::loglog_slope(hs, errs);
}

}  // namespace

TEST_SUITE("odeint") {

TEST_CASE("tableaus") {
  for (const auto *tab : {&radau3(), &radau5()}) {
    CHECK_NOTHROW(tab->validate());
    CHECK(tab->stiffly_accurate());
    CHECK(tab->c(tab->stages() - 1) == 1.0);
  }
  CHECK(radau3().stages() == 2);
  CHECK(radau5().stages() == 3);
  for (Scheme s : all_schemes()) CHECK(parse_scheme(scheme_name(s)) == s);
  CHECK_FALSE(parse_scheme("radau7").has_value());
}

TEST_CASE("vector field contract") {
  CHECK_THROWS(VectorField(1, [](const Mat &Y) -> Mat { return Y; }, nullptr, false));
  const VectorField f = chem3_field();
  CHECK_FALSE(f.has_jacobian());
  const StateVector y = chem3_y0();
  const DenseMatrix fd = oracle::fd_jacobian(oracle::chem3, y);
  CHECK((f.jacobian(y) - fd).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("backward Euler") {
  CHECK(step_backward_euler(zero_field(2), StateVector::Ones(2), 0.1).y_next == StateVector::Ones(2));
  const auto r = step_backward_euler(scalar_field(-10000.0), StateVector::Constant(1, 1000.0), 1e-4);
  CHECK(r.y_next(0) == doctest::Approx(500.0).epsilon(1e-14));
  CHECK(r.diag.residual_norm < 1e-10);

  const double h = 1e-3;
  const auto step = step_backward_euler(chem3_field(), chem3_y0(), h);
  const StateVector ref = oracle::backward_euler_fixed_point(oracle::chem3, chem3_y0(), h);
  CHECK((step.y_next - ref).cwiseAbs().maxCoeff() < 1e-11);
  // root residual below the Newton tolerance
  CHECK((step.y_next - chem3_y0() - h * oracle::chem3(step.y_next)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(step.diag.f_evals > 0);
  CHECK(step.diag.newton_iterations >= 1);
  CHECK_THROWS(step_backward_euler(chem3_field(), chem3_y0(), 0.0));
}

TEST_CASE("trapezoid") {
  CHECK(step_trapezoid(zero_field(1), StateVector::Constant(1, 3.0), 0.5).y_next(0) == 3.0);
  CHECK(std::abs(step_trapezoid(scalar_field(-2.0), StateVector::Constant(1, 7.0), 1.0).y_next(0)) < 1e-12);
  const double h = 2e-3;
  const auto step = step_trapezoid(chem3_field(), chem3_y0(), h);
  const StateVector g = step.y_next - chem3_y0() - 0.5 * h * (oracle::chem3(chem3_y0()) + oracle::chem3(step.y_next));
  CHECK(g.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("Radau stage solutions reproduce the stability functions") {
  const auto r0 = step_radau(radau5(), zero_field(2), StateVector::Ones(2), 0.3);
  CHECK(r0.y_next == StateVector::Ones(2));
  for (double z : {-0.01, -0.5, -3.0, -40.0, -1e4}) {
    const double h = 0.1, lambda = z / h;
    const double y3 = step_radau(radau3(), scalar_field(lambda), StateVector::Ones(1), h).y_next(0);
    const double y5 = step_radau(radau5(), scalar_field(lambda), StateVector::Ones(1), h).y_next(0);
    // rounding in h*lambda*Y scales with |z|
    const double tol = 1e-14 * (1.0 + std::abs(z));
    CHECK(std::abs(y3 - oracle::r_radau3(z)) < tol);
    CHECK(std::abs(y5 - oracle::r_radau5(z)) < tol);
    const double ybe = step_backward_euler(scalar_field(lambda), StateVector::Ones(1), h).y_next(0);
    const double ytr = step_trapezoid(scalar_field(lambda), StateVector::Ones(1), h).y_next(0);
    CHECK(std::abs(ybe - oracle::r_backward_euler(z)) < tol);
    CHECK(std::abs(ytr - oracle::r_trapezoid(z)) < tol);
  }
}

TEST_CASE("A-stability witnesses at lambda h = -1e6") {
  const auto f = scalar_field(-1e6);
  const StateVector y0 = StateVector::Ones(1);
  for (Scheme s : {Scheme::BackwardEuler, Scheme::Trapezoid, Scheme::Radau3, Scheme::Radau5, Scheme::IFEuler}) {
    CAPTURE(scheme_name(s));
    CHECK(std::abs(step(s, f, y0, 1.0).y_next(0)) <= 1.0);
  }
  CHECK(std::abs(step(Scheme::ExplicitEuler, f, y0, 1.0).y_next(0)) > 1e5);
}

TEST_CASE("integrating factor Euler") {
  const double h = 0.01 / 9.0;
  const auto r = step_if_euler(scalar_field(-10000.0), StateVector::Constant(1, 1000.0), h);
  const double want = 1000.0 * std::exp(-10000.0 * h);
  CHECK(std::abs(r.y_next(0) - want) / want < 1e-13);
  CHECK(step_if_euler(zero_field(3), chem3_y0(), 0.2).y_next == chem3_y0());

  // linear systems are integrated exactly for any step
  const DenseMatrix T = tridiagonal10();
  const auto grid = uniform_grid(0.0, 0.4, 17);
  const StateVector y0 = StateVector::Constant(10, 20.0);
  const auto traj = integrate_fixed(Scheme::IFEuler, linear_field(T), y0, grid);
  double worst = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const StateVector exact = oracle::expm_symmetric(T * grid[i]) * y0;
    const StateVector got = traj.states.col(static_cast<Index>(i));
    worst = std::max(worst, (got - exact).cwiseAbs().maxCoeff() / std::max(exact.cwiseAbs().maxCoeff(), 1e-300));
  }
  CHECK(worst < 1e-11);
  CHECK(traj.jac_evals == 16);

  // one-step error is second order on the stiff chemistry field
  std::vector<double> hs, errs;
  for (int k = 0; k < 5; ++k) {
    const double hk = 1e-3 / std::pow(2.0, k);
    StateVector ref = chem3_y0();
    const int sub = 2000;
    for (int j = 0; j < sub; ++j) ref = step_rk4(chem3_field(), ref, hk / sub).y_next;
    const StateVector got = step_if_euler(chem3_field(), chem3_y0(), hk).y_next;
    hs.push_back(hk);
    errs.push_back((got - ref).cwiseAbs().maxCoeff());
  }
  CHECK(oracle::loglog_slope(hs, errs) == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("global convergence orders on y' = -y^3") {
  CHECK(global_error_slope(Scheme::ExplicitEuler, {40, 80, 160, 320}) == doctest::Approx(1.0).epsilon(0.15));
  CHECK(global_error_slope(Scheme::BackwardEuler, {40, 80, 160, 320}) == doctest::Approx(1.0).epsilon(0.15));
  CHECK(global_error_slope(Scheme::IFEuler, {40, 80, 160, 320}) == doctest::Approx(1.0).epsilon(0.15));
  CHECK(global_error_slope(Scheme::Trapezoid, {20, 40, 80, 160}) == doctest::Approx(2.0).epsilon(0.075));
  CHECK(global_error_slope(Scheme::RK4, {5, 10, 20, 40}) == doctest::Approx(4.0).epsilon(0.0625));
  CHECK(global_error_slope(Scheme::Radau3, {5, 10, 20, 40}) == doctest::Approx(3.0).epsilon(0.0667));
  CHECK(global_error_slope(Scheme::Radau5, {2, 4, 8, 16}) == doctest::Approx(5.0).epsilon(0.06));
}

TEST_CASE("trapezoid and Radau orders on y' = -y") {
  auto slope = [](Scheme s, const std::vector<int> &steps) {
    std::vector<double> hs, errs;
    for (int n : steps) {
      const auto traj = integrate_fixed(s, scalar_field(-1.0), StateVector::Ones(1), uniform_grid(0.0, 1.0, n + 1));
      hs.push_back(1.0 / n);
      errs.push_back(std::abs(traj.states(0, n) - std::exp(-1.0)));
    }
    return oracle::loglog_slope(hs, errs);
  };
  CHECK(slope(Scheme::Trapezoid, {10, 20, 40, 80}) == doctest::Approx(2.0).epsilon(0.05));
  CHECK(slope(Scheme::Radau3, {5, 10, 20, 40}) == doctest::Approx(3.0).epsilon(0.05));
  CHECK(slope(Scheme::Radau5, {2, 4, 8, 16}) == doctest::Approx(5.0).epsilon(0.05));
}

TEST_CASE("Newton failure is reported") {
  // y+ = y + h y+^2 has no real root when 4 h y > 1
  const VectorField f(
      1, [](const Mat &Y) -> Mat { return Y.array().square().matrix(); },
      [](const StateVector &y) -> DenseMatrix { return DenseMatrix::Constant(1, 1, 2.0 * y(0)); });
  CHECK_THROWS_AS(step_backward_euler(f, StateVector::Constant(1, 1.0), 1.0), NewtonDiverged);
  CHECK_THROWS_AS(integrate_fixed(Scheme::BackwardEuler, f, StateVector::Constant(1, 1.0), {0.0, 0.01, 1.0}),
                  StepFailure);
  try {
    integrate_fixed(Scheme::BackwardEuler, f, StateVector::Constant(1, 1.0), {0.0, 0.01, 1.0});
  } catch (const StepFailure &e) {
    CHECK(e.interval == 1);
  }
}

TEST_CASE("batched steps equal per-column steps") {
  Mat Y(3, 4);
  for (Index k = 0; k < 4; ++k) Y.col(k) = chem3_y0() * (0.5 + 0.3 * static_cast<double>(k));
  for (Scheme s : all_schemes()) {
    CAPTURE(scheme_name(s));
    const Mat batch = step_batch(s, chem3_field(), Y, 1e-3);
    for (Index k = 0; k < 4; ++k) {
      CHECK((batch.col(k) - step(s, chem3_field(), Y.col(k), 1e-3).y_next).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("fixed-grid trajectories") {
  const auto traj = integrate_fixed(Scheme::RK4, scalar_field(-1.0), StateVector::Ones(1), uniform_grid(0, 1, 101));
  CHECK(std::abs(traj.states(0, 100) - std::exp(-1.0)) < 1e-9);
  const auto one = integrate_fixed(Scheme::Radau3, chem3_field(), chem3_y0(), {0.0, 1e-3});
  CHECK((one.states.col(1) - step_radau(radau3(), chem3_field(), chem3_y0(), 1e-3).y_next).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS(integrate_fixed(Scheme::RK4, scalar_field(-1.0), StateVector::Ones(1), {0.0, 0.5, 0.5}));
}

TEST_CASE("adaptive Runge-Kutta-Fehlberg") {
  const auto decay = integrate_rkf45_adaptive(scalar_field(-1.0), StateVector::Ones(1), 0.0, 1.0, 1e-8, 1e-8);
  CHECK(decay.times.back() == 1.0);
  CHECK(std::abs(decay.states(0, decay.states.cols() - 1) - std::exp(-1.0)) < 1e-7);

  const auto still = integrate_rkf45_adaptive(zero_field(2), StateVector::Ones(2), 0.0, 10.0, 1e-6, 1e-6);
  CHECK(still.f_evals <= 10);
  CHECK(still.accepted == 1);

  CHECK_THROWS(integrate_rkf45_adaptive(scalar_field(-1.0), StateVector::Ones(1), 0.0, 1.0, 0.0, 1e-6));
}

TEST_CASE("adaptive explicit integration of a stiff oscillator is expensive") {
  const double mu = 1000.0;
  const VectorField vdp(2, [mu](const Mat &Y) -> Mat {
    Mat out(2, Y.cols());
    for (Index k = 0; k < Y.cols(); ++k) {
      const double x = Y(0, k), y = Y(1, k);
      out(0, k) = y;
      out(1, k) = mu * y - mu * x * x * y - x;
    }
    return out;
  });
  StateVector y0(2);
  y0 << 1.0, 0.0;
  const auto traj = integrate_rkf45_adaptive(vdp, y0, 0.0, 3000.0, 1e-3, 1e-3);
  MESSAGE("RKF45 evaluations on [0, 3000]: " << traj.f_evals << ", accepted points: " << traj.accepted);
  CHECK(traj.f_evals > 1000000);
  CHECK(traj.f_evals > 2956574 / 3);
  CHECK(traj.f_evals < 2956574 * 3);
}

TEST_CASE("implicit-function gradients") {
  // f = theta y through a one-weight linear network, backward Euler
  const double theta = -3.0, h = 0.1, y0 = 2.0;
  const auto net = testnets::scalar_linear_net(theta);
  const auto g = ift_step_gradient(Scheme::BackwardEuler, net, StateVector::Constant(1, y0), h, StateVector::Ones(1));
  const double y1 = y0 / (1.0 - theta * h);
  CHECK(g.y_next(0) == doctest::Approx(y1).epsilon(1e-14));
  // theta enters as A*C with A = theta, C = 1
  const double dy_dtheta = h * y1 / (1.0 - theta * h);
  CHECK(std::abs(g.d_theta(0) - dy_dtheta * 1.0) < 1e-10);
  CHECK(std::abs(g.d_theta(2) - dy_dtheta * theta) < 1e-10);
  CHECK(std::abs(g.d_y(0) - 1.0 / (1.0 - theta * h)) < 1e-12);

  const auto zero = ift_step_gradient(Scheme::Radau5, net, StateVector::Constant(1, y0), h, StateVector::Zero(1));
  CHECK(zero.d_theta.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.d_y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("step gradients against finite differences for every scheme") {
  const PiNetShape shape{2, 2, 6, 2};
  const ParamVector theta = init_params(shape, 21, 0.3);
  StateVector y(2), cot(2);
  y << 0.8, -0.6;
  cot << 0.7, -1.3;
  const double h = 0.05;
  for (Scheme s : all_schemes()) {
    for (bool freeze : {false, true}) {
      if (freeze && s != Scheme::IFEuler) continue;
      CAPTURE(scheme_name(s));
      CAPTURE(freeze);
      RecordOptions opt;
      opt.freeze_linearization = freeze;
      const auto g = ift_step_gradient(s, PiNet(shape, theta), y, h, cot, opt);
      auto objective = [&](const ParamVector &t, const StateVector &yy) {
        const PiNet net(shape, t);
        if (freeze) {
          // L held at the unperturbed parameters and state
          const DenseMatrix L = PiNet(shape, theta).jacobian(y);
          const StateVector N = net.forward(yy) - L * yy;
          return cot.dot(expm(L * h).value * (yy + h * N));
        }
        return cot.dot(step(s, make_field(net), yy, h).y_next);
      };
      const auto fd_theta = oracle::fd_gradient([&](const Eigen::VectorXd &t) { return objective(t, y); }, theta);
      double worst = 0.0;
      for (Index i = 0; i < fd_theta.size(); ++i) {
        worst = std::max(worst, std::abs(g.d_theta(i) - fd_theta(i)) / std::max(1e-3, std::abs(fd_theta(i))));
      }
      CHECK(worst < 1e-6);
      if (!freeze) {
        const auto fd_y = oracle::fd_gradient([&](const Eigen::VectorXd &yy) { return objective(theta, yy); }, y);
        CHECK((g.d_y - fd_y).cwiseAbs().maxCoeff() < 1e-6 * std::max(1.0, fd_y.cwiseAbs().maxCoeff()));
      }
    }
  }
}

}

#pragma once

#include "stiffnode/autodiff.hpp"
#include "stiffnode/densela.hpp"
#include "stiffnode/pinet.hpp"

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace stiffnode {

using ad::Mat;

// ---------------------------------------------------------------------------
// Errors

class NewtonDiverged : public std::runtime_error {
public:
  NewtonDiverged(const std::string &what, Index column, int iterations, double residual)
      : std::runtime_error(what), column(column), iterations(iterations), residual(residual) {}
  Index column;  // batch column (segment) that failed
  int iterations;
  double residual;
};

class SingularJacobian : public std::runtime_error {
public:
  explicit SingularJacobian(const std::string &what) : std::runtime_error(what) {}
};

class MinStepReached : public std::runtime_error {
public:
  MinStepReached(const std::string &what, double t) : std::runtime_error(what), t(t) {}
  double t;
};

class StepFailure : public std::runtime_error {
public:
  StepFailure(const std::string &what, std::size_t interval) : std::runtime_error(what), interval(interval) {}
  std::size_t interval;
};

// ---------------------------------------------------------------------------
// Vector fields

/// Autonomous vector field y -> f(y), evaluated on a batch of states stored
/// one per column.
class VectorField {
public:
  using Eval = std::function<Mat(const Mat &)>;
  using Jacobian = std::function<DenseMatrix(const StateVector &)>;
  using BatchJacobian = std::function<std::vector<DenseMatrix>(const Mat &)>;

  VectorField() = default;
  /// Without a Jacobian, central differences are used.
  VectorField(int dim, Eval eval, Jacobian jacobian = nullptr, bool autonomous = true);

  int dim() const { return dim_; }
  bool has_jacobian() const { return static_cast<bool>(jacobian_); }

  StateVector operator()(const StateVector &y) const;
  Mat eval(const Mat &Y) const;
  DenseMatrix jacobian(const StateVector &y) const;
  /// One Jacobian per column of Y.
  std::vector<DenseMatrix> jacobian_batch(const Mat &Y) const;

  /// Installs a batched Jacobian used in place of per-column calls.
  VectorField &with_batch_jacobian(BatchJacobian jac);

private:
  int dim_ = 0;
  Eval eval_;
  Jacobian jacobian_;
  BatchJacobian batch_jacobian_;
};

/// Field of a network at its current parameters (plus known term if hybrid).
VectorField make_field(const PiNet &net);

/// Network field recorded on a tape as a function of theta and the state.
struct TapedField {
  VectorField numeric;  // at the parameter values held by theta
  std::function<ad::Var(ad::Var)> eval;
  std::function<ForwardWithJacobian<ad::Var>(ad::Var)> eval_with_jacobian;
};

TapedField make_taped_field(const PiNet &net, ad::Var theta);

// ---------------------------------------------------------------------------
// Tableaus and schemes

struct ButcherTableau {
  std::string name;
  DenseMatrix A;
  StateVector b;
  StateVector c;
  int order = 0;

  Index stages() const { return b.size(); }
  /// b equals the last row of A (y_{n+1} is the last stage).
  bool stiffly_accurate() const;
  /// sum b = 1 and row sums of A equal c, both to 1e-15.
  void validate() const;
};

/// Radau IIA, 2 stages, order 3.
const ButcherTableau &radau3();
/// Radau IIA, 3 stages, order 5.
const ButcherTableau &radau5();

enum class Scheme { ExplicitEuler, RK4, BackwardEuler, Trapezoid, Radau3, Radau5, IFEuler };

std::string_view scheme_name(Scheme s);
/// Accepts explicit-euler, rk4, backward-euler, trapezoid, radau3, radau5, if-euler.
std::optional<Scheme> parse_scheme(std::string_view name);
const std::vector<Scheme> &all_schemes();
bool is_implicit(Scheme s);

// ---------------------------------------------------------------------------
// Single steps

struct NewtonOptions {
  double tol = 1e-10;  // infinity norm of the root residual
  int max_iter = 50;
  int max_consecutive_increases = 5;
  int max_backtracks = 4;
};

struct StepDiagnostics {
  int newton_iterations = 0;
  double residual_norm = 0.0;
  long f_evals = 0;
  long jac_evals = 0;
  bool converged = true;

  StepDiagnostics &operator+=(const StepDiagnostics &o);
};

struct StepResult {
  StateVector y_next;
  StepDiagnostics diag;
};

StepResult step_explicit_euler(const VectorField &f, const StateVector &y, double h);
StepResult step_rk4(const VectorField &f, const StateVector &y, double h);
/// Solves y+ - y - h f(y+) = 0 by Newton from y+ = y.
StepResult step_backward_euler(const VectorField &f, const StateVector &y, double h, const NewtonOptions &opt = {});
/// Solves y+ - y - h/2 (f(y) + f(y+)) = 0.
StepResult step_trapezoid(const VectorField &f, const StateVector &y, double h, const NewtonOptions &opt = {});
/// Stage system Y_i = y + h sum_j a_ij f(Y_j); y+ = y + h sum_j b_j f(Y_j).
StepResult step_radau(const ButcherTableau &tab, const VectorField &f, const StateVector &y, double h,
                      const NewtonOptions &opt = {});
/// L = f'(y), N = f(y) - L y, y+ = expm(L h) (y + h N).
StepResult step_if_euler(const VectorField &f, const StateVector &y, double h);

StepResult step(Scheme s, const VectorField &f, const StateVector &y, double h, const NewtonOptions &opt = {});

// ---------------------------------------------------------------------------
// Batched stepping, one independent initial value per column

struct BatchDiagnostics {
  long f_evals = 0;
  long jac_evals = 0;
  int max_newton_iterations = 0;
  double max_residual = 0.0;
};

/// Newton solve of Y = E + h (A kron I) F(Y) for every column.
/// E and the initial guess are (s d) x S. Throws NewtonDiverged naming the
/// first failing column.
struct StageSolution {
  Mat stages;    // (s d) x S
  Mat stage_f;   // f at each stage, (s d) x S
  BatchDiagnostics diag;
};
StageSolution solve_stages(const VectorField &f, const DenseMatrix &A, double h, const Mat &E, const Mat &guess,
                           const NewtonOptions &opt);

Mat step_batch(Scheme s, const VectorField &f, const Mat &Y, double h, const NewtonOptions &opt = {},
               BatchDiagnostics *diag = nullptr);

/// Options for steps recorded on a tape.
struct RecordOptions {
  NewtonOptions newton;
  /// Treat the IF Euler linearization L as a constant (no gradient through L).
  bool freeze_linearization = false;
};

/// Records one step of every column of Yn on the tape. Implicit schemes solve
/// by Newton off the tape and re-enter through an implicit-function node whose
/// backward rule is one transposed linear solve per column.
ad::Var record_step(Scheme s, const TapedField &field, ad::Var Yn, double h, const RecordOptions &opt = {},
                    BatchDiagnostics *diag = nullptr);

/// Gradient contributions of one step for a cotangent on y_{n+1}.
struct StepGradient {
  StateVector y_next;
  ParamVector d_theta;
  StateVector d_y;
};
StepGradient ift_step_gradient(Scheme s, const PiNet &net, const StateVector &y, double h, const StateVector &cotangent,
                               const RecordOptions &opt = {});

// ---------------------------------------------------------------------------
// Trajectories

struct Trajectory {
  std::vector<double> times;
  Mat states;  // d x n
  long f_evals = 0;
  long jac_evals = 0;
  long accepted = 0;
  long rejected = 0;
};

/// One step of the scheme per grid interval. Step errors are rethrown as
/// StepFailure carrying the interval index.
Trajectory integrate_fixed(Scheme s, const VectorField &f, const StateVector &y0, const std::vector<double> &t_grid,
                           const NewtonOptions &opt = {});

/// Runge-Kutta-Fehlberg 4(5) with local extrapolation: the fifth-order
/// solution is propagated, the difference to the fourth-order one sets the step.
Trajectory integrate_rkf45_adaptive(const VectorField &f, const StateVector &y0, double t0, double t1, double rtol,
                                    double atol);

}  // namespace stiffnode

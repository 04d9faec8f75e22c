#include "stiffnode/odeint.hpp"

#include "stiffnode/matexp.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>

namespace stiffnode {

// ---------------------------------------------------------------------------
// VectorField

VectorField::VectorField(int dim, Eval eval, Jacobian jacobian, bool autonomous)
    : dim_(dim), eval_(std::move(eval)), jacobian_(std::move(jacobian)) {
  if (!autonomous) throw std::invalid_argument("VectorField: only autonomous fields are supported");
  if (dim < 1) throw std::invalid_argument("VectorField: dimension must be >= 1");
  if (!eval_) throw std::invalid_argument("VectorField: missing evaluation callable");
}

StateVector VectorField::operator()(const StateVector &y) const { return eval(y); }

Mat VectorField::eval(const Mat &Y) const {
  if (Y.rows() != dim_) throw ShapeMismatch("VectorField: state dimension mismatch");
  return eval_(Y);
}

DenseMatrix VectorField::jacobian(const StateVector &y) const {
  if (jacobian_) return jacobian_(y);
  // Central differences, one pair of batched evaluations.
  Mat probes(dim_, 2 * dim_);
  std::vector<double> steps(static_cast<std::size_t>(dim_));
  for (int j = 0; j < dim_; ++j) {
    const double hj = 1e-7 * std::max(1.0, std::abs(y(j)));
    steps[static_cast<std::size_t>(j)] = hj;
    probes.col(2 * j) = y;
    probes.col(2 * j + 1) = y;
    probes(j, 2 * j) += hj;
    probes(j, 2 * j + 1) -= hj;
  }
  const Mat values = eval(probes);
  DenseMatrix J(dim_, dim_);
  for (int j = 0; j < dim_; ++j) {
    J.col(j) = (values.col(2 * j) - values.col(2 * j + 1)) / (2.0 * steps[static_cast<std::size_t>(j)]);
  }
  return J;
}

std::vector<DenseMatrix> VectorField::jacobian_batch(const Mat &Y) const {
  if (batch_jacobian_) return batch_jacobian_(Y);
  std::vector<DenseMatrix> out;
  out.reserve(static_cast<std::size_t>(Y.cols()));
  for (Index k = 0; k < Y.cols(); ++k) out.push_back(jacobian(Y.col(k)));
  return out;
}

VectorField &VectorField::with_batch_jacobian(BatchJacobian jac) {
  batch_jacobian_ = std::move(jac);
  return *this;
}

namespace {

std::vector<DenseMatrix> split_columns(const std::vector<Mat> &columns, Index rows) {
  const Index samples = columns.front().cols();
  const auto dim = static_cast<Index>(columns.size());
  std::vector<DenseMatrix> out(static_cast<std::size_t>(samples), DenseMatrix(rows, dim));
  for (Index j = 0; j < dim; ++j) {
    const Mat &cj = columns[static_cast<std::size_t>(j)];
    for (Index s = 0; s < samples; ++s) out[static_cast<std::size_t>(s)].col(j) = cj.col(s);
  }
  return out;
}

}  // namespace

VectorField make_field(const PiNet &net) {
  auto weights = std::make_shared<const NetWeights<Mat>>(net.weights());
  const KnownDynamics *known_ptr = net.known();
  std::optional<KnownDynamics> known;
  if (known_ptr) known = *known_ptr;
  const int dim = net.shape().inputs;
  if (net.shape().outputs != dim) throw ShapeMismatch("make_field: network is not square (m_out != m)");

  auto eval = [weights, known](const Mat &Y) -> Mat {
    Mat out = pinet_forward(*weights, Y);
    if (known) out += known->value(Y);
    return out;
  };
  auto jac = [weights, known](const StateVector &y) -> DenseMatrix {
    const auto fj = pinet_forward_jacobian(*weights, Mat(y));
    DenseMatrix J(y.size(), y.size());
    for (Index j = 0; j < y.size(); ++j) J.col(j) = fj.columns[static_cast<std::size_t>(j)].col(0);
    if (known) J += known->jacobian(y);
    return J;
  };
  VectorField f(dim, eval, jac);
  f.with_batch_jacobian([weights, known](const Mat &Y) {
    const auto fj = pinet_forward_jacobian(*weights, Y);
    auto out = split_columns(fj.columns, Y.rows());
    if (known) {
      for (Index s = 0; s < Y.cols(); ++s) out[static_cast<std::size_t>(s)] += known->jacobian(Y.col(s));
    }
    return out;
  });
  return f;
}

namespace {

// Known term recorded with a vector-Jacobian product from its Jacobian.
ad::Var record_known(const KnownDynamics &known, ad::Var X) {
  const int ix = X.id();
  return X.tape()->record(known.value(X.value()), {ix}, [ix, known](ad::Tape &tp, int self) {
    const Mat &g = tp.upstream(self);
    const Mat &x = tp.value(ix);
    Mat delta(x.rows(), x.cols());
    for (Index s = 0; s < x.cols(); ++s) delta.col(s) = known.jacobian(x.col(s)).transpose() * g.col(s);
    tp.accumulate(ix, delta);
  });
}

}  // namespace

TapedField make_taped_field(const PiNet &net, ad::Var theta) {
  PiNet at_theta(net.shape(), theta.value().col(0),
                 net.known() ? std::optional<KnownDynamics>(*net.known()) : std::nullopt);
  TapedField field;
  field.numeric = make_field(at_theta);
  auto weights = std::make_shared<const NetWeights<ad::Var>>(unflatten(net.shape(), theta));
  std::optional<KnownDynamics> known;
  if (net.known()) known = *net.known();

  field.eval = [weights, known](ad::Var X) {
    ad::Var out = pinet_forward(*weights, X);
    if (known) out = out + record_known(*known, X);
    return out;
  };
  field.eval_with_jacobian = [weights, known](ad::Var X) {
    auto fj = pinet_forward_jacobian(*weights, X);
    if (known) {
      fj.value = fj.value + record_known(*known, X);
      const Mat x = X.value();
      for (Index j = 0; j < x.rows(); ++j) {
        Mat cj(x.rows(), x.cols());
        for (Index s = 0; s < x.cols(); ++s) cj.col(s) = known->jacobian(x.col(s)).col(j);
        fj.columns[static_cast<std::size_t>(j)] = ad::plus_constant(fj.columns[static_cast<std::size_t>(j)], cj);
      }
    }
    return fj;
  };
  return field;
}

// ---------------------------------------------------------------------------
// Tableaus

bool ButcherTableau::stiffly_accurate() const {
  return (A.row(A.rows() - 1).transpose() - b).cwiseAbs().maxCoeff() == 0.0;
}

void ButcherTableau::validate() const {
  if (A.rows() != A.cols() || A.rows() != b.size() || b.size() != c.size()) {
    throw std::logic_error("ButcherTableau " + name + ": inconsistent sizes");
  }
  if (std::abs(b.sum() - 1.0) > 1e-15) throw std::logic_error("ButcherTableau " + name + ": weights do not sum to 1");
  if ((A.rowwise().sum() - c).cwiseAbs().maxCoeff() > 1e-15) {
    throw std::logic_error("ButcherTableau " + name + ": row sums differ from nodes");
  }
}

namespace {

ButcherTableau make_radau3() {
  ButcherTableau t;
  t.name = "radau3";
  t.order = 3;
  t.A.resize(2, 2);
  t.A << 5.0 / 12.0, -1.0 / 12.0,  //
      3.0 / 4.0, 1.0 / 4.0;
  t.b = t.A.row(1).transpose();
  t.c.resize(2);
  t.c << 1.0 / 3.0, 1.0;
  t.validate();
  return t;
}

ButcherTableau make_radau5() {
  ButcherTableau t;
  t.name = "radau5";
  t.order = 5;
  t.A.resize(3, 3);
  t.A << 0.1968154772236604258684, -0.06553542585019838810852, 0.02377097434822015242041,  //
      0.3944243147390872769974, 0.2920734116652284630205, -0.04154875212599793019819,      //
      0.3764030627004672750501, 0.5124858261884216138388, 0.1111111111111111111111;
  t.b = t.A.row(2).transpose();
  t.c.resize(3);
  t.c << 0.1550510257216821901803, 0.6449489742783178098197, 1.0;
  t.validate();
  return t;
}

const DenseMatrix &unit_tableau(double a) {
  static const DenseMatrix one = DenseMatrix::Constant(1, 1, 1.0);
  static const DenseMatrix half = DenseMatrix::Constant(1, 1, 0.5);
  return a == 1.0 ? one : half;
}

}  // namespace

const ButcherTableau &radau3() {
  static const ButcherTableau t = make_radau3();
  return t;
}

const ButcherTableau &radau5() {
  static const ButcherTableau t = make_radau5();
  return t;
}

std::string_view scheme_name(Scheme s) {
  switch (s) {
    case Scheme::ExplicitEuler: return "explicit-euler";
    case Scheme::RK4: return "rk4";
    case Scheme::BackwardEuler: return "backward-euler";
    case Scheme::Trapezoid: return "trapezoid";
    case Scheme::Radau3: return "radau3";
    case Scheme::Radau5: return "radau5";
    case Scheme::IFEuler: return "if-euler";
  }
  return "unknown";
}

const std::vector<Scheme> &all_schemes() {
  static const std::vector<Scheme> all = {Scheme::ExplicitEuler, Scheme::RK4,    Scheme::BackwardEuler, Scheme::Trapezoid,
                                          Scheme::Radau3,        Scheme::Radau5, Scheme::IFEuler};
  return all;
}

std::optional<Scheme> parse_scheme(std::string_view name) {
  for (Scheme s : all_schemes()) {
    if (scheme_name(s) == name) return s;
  }
  return std::nullopt;
}

bool is_implicit(Scheme s) {
  return s == Scheme::BackwardEuler || s == Scheme::Trapezoid || s == Scheme::Radau3 || s == Scheme::Radau5;
}

StepDiagnostics &StepDiagnostics::operator+=(const StepDiagnostics &o) {
  newton_iterations += o.newton_iterations;
  residual_norm = std::max(residual_norm, o.residual_norm);
  f_evals += o.f_evals;
  jac_evals += o.jac_evals;
  converged = converged && o.converged;
  return *this;
}

// ---------------------------------------------------------------------------
// Newton on the stacked stage system

namespace {

// Stacks stage blocks (s d) x k into d x (s k) for one batched evaluation.
Mat stages_to_states(const Mat &Y, Index s, Index d) {
  const Index k = Y.cols();
  Mat out(d, s * k);
  for (Index j = 0; j < s; ++j) out.middleCols(j * k, k) = Y.middleRows(j * d, d);
  return out;
}

Mat states_to_stages(const Mat &X, Index s, Index d) {
  const Index k = X.cols() / s;
  Mat out(s * d, k);
  for (Index j = 0; j < s; ++j) out.middleRows(j * d, d) = X.middleCols(j * k, k);
  return out;
}

Mat gather(const Mat &M, const std::vector<Index> &cols) {
  Mat out(M.rows(), static_cast<Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Index>(k)) = M.col(cols[k]);
  return out;
}

// Stage residual G = Y - E - h (A kron I) F.
Mat stage_residual(const Mat &Y, const Mat &E, const Mat &F, const DenseMatrix &A, double h, Index d) {
  const Index s = A.rows();
  Mat G = Y - E;
  for (Index i = 0; i < s; ++i) {
    for (Index j = 0; j < s; ++j) {
      if (A(i, j) != 0.0) G.middleRows(i * d, d) -= (h * A(i, j)) * F.middleRows(j * d, d);
    }
  }
  return G;
}

// I - h (A kron J_j), block (i, j) = delta_ij I - h a_ij J(Y_j).
DenseMatrix stage_jacobian(const DenseMatrix &A, double h, const std::vector<const DenseMatrix *> &J) {
  const Index s = A.rows();
  const Index d = J.front()->rows();
  DenseMatrix M = DenseMatrix::Identity(s * d, s * d);
  for (Index i = 0; i < s; ++i) {
    for (Index j = 0; j < s; ++j) {
      if (A(i, j) != 0.0) M.block(i * d, j * d, d, d) -= (h * A(i, j)) * *J[static_cast<std::size_t>(j)];
    }
  }
  return M;
}

double column_norm(const Mat &G, Index k) {
  const double n = G.col(k).cwiseAbs().maxCoeff();
  return std::isnan(n) ? std::numeric_limits<double>::infinity() : n;
}

}  // namespace

StageSolution solve_stages(const VectorField &f, const DenseMatrix &A, double h, const Mat &E, const Mat &guess,
                           const NewtonOptions &opt) {
  const Index s = A.rows();
  const Index d = f.dim();
  const Index S = E.cols();
  if (E.rows() != s * d || guess.rows() != s * d || guess.cols() != S) {
    throw ShapeMismatch("solve_stages: stage block shapes do not match");
  }

  StageSolution sol;
  sol.stages = guess;
  sol.stage_f.resize(s * d, S);

  auto eval_f = [&](const Mat &Y) {
    sol.diag.f_evals += s * Y.cols();
    return states_to_stages(f.eval(stages_to_states(Y, s, d)), s, d);
  };

  {
    sol.stage_f = eval_f(sol.stages);
  }
  Mat G = stage_residual(sol.stages, E, sol.stage_f, A, h, d);
  std::vector<double> norms(static_cast<std::size_t>(S));
  std::vector<int> increases(static_cast<std::size_t>(S), 0);
  std::vector<Index> active;
  for (Index k = 0; k < S; ++k) norms[static_cast<std::size_t>(k)] = column_norm(G, k);

  int iter = 0;
  for (;; ++iter) {
    active.clear();
    for (Index k = 0; k < S; ++k) {
      if (!(norms[static_cast<std::size_t>(k)] < opt.tol)) active.push_back(k);
    }
    if (active.empty()) break;
    if (iter >= opt.max_iter) {
      const Index bad = active.front();
      throw NewtonDiverged("Newton did not converge in " + std::to_string(opt.max_iter) + " iterations",
                           bad, iter, norms[static_cast<std::size_t>(bad)]);
    }

    const Mat Ya = gather(sol.stages, active);
    const auto jacs = f.jacobian_batch(stages_to_states(Ya, s, d));
    sol.diag.jac_evals += static_cast<long>(jacs.size());
    const auto na = static_cast<Index>(active.size());
    Mat delta(s * d, na);
    for (Index k = 0; k < na; ++k) {
      std::vector<const DenseMatrix *> Jk;
      for (Index j = 0; j < s; ++j) Jk.push_back(&jacs[static_cast<std::size_t>(j * na + k)]);
      const Index col = active[static_cast<std::size_t>(k)];
      try {
        const auto lu = lu_factor(stage_jacobian(A, h, Jk));
        delta.col(k) = -lu.solve(G.col(col));
      } catch (const SingularMatrix &) {
        throw NewtonDiverged("Newton matrix is singular", col, iter, norms[static_cast<std::size_t>(col)]);
      }
    }

    // Backtracking on the residual norm, batched over pending columns.
    std::vector<Index> pending(static_cast<std::size_t>(na));
    for (Index k = 0; k < na; ++k) pending[static_cast<std::size_t>(k)] = k;
    double alpha = 1.0;
    for (int bt = 0; !pending.empty(); ++bt, alpha *= 0.5) {
      const auto np = static_cast<Index>(pending.size());
      Mat trial(s * d, np);
      Mat Ep(s * d, np);
      for (Index p = 0; p < np; ++p) {
        const Index k = pending[static_cast<std::size_t>(p)];
        const Index col = active[static_cast<std::size_t>(k)];
        trial.col(p) = sol.stages.col(col) + alpha * delta.col(k);
        Ep.col(p) = E.col(col);
      }
      const Mat Ft = eval_f(trial);
      const Mat Gt = stage_residual(trial, Ep, Ft, A, h, d);
      std::vector<Index> still;
      for (Index p = 0; p < np; ++p) {
        const Index k = pending[static_cast<std::size_t>(p)];
        const Index col = active[static_cast<std::size_t>(k)];
        const double nt = column_norm(Gt, p);
        const double old = norms[static_cast<std::size_t>(col)];
        const bool last = bt >= opt.max_backtracks;
        if (nt < old || last) {
          if (!std::isfinite(nt)) {
            throw NewtonDiverged("Newton produced a non-finite residual", col, iter + 1, nt);
          }
          auto &inc = increases[static_cast<std::size_t>(col)];
          inc = nt < old ? 0 : inc + 1;
          if (inc >= opt.max_consecutive_increases) {
            throw NewtonDiverged("Newton residual increased " + std::to_string(inc) + " times in a row", col, iter + 1,
                                 nt);
          }
          sol.stages.col(col) = trial.col(p);
          sol.stage_f.col(col) = Ft.col(p);
          G.col(col) = Gt.col(p);
          norms[static_cast<std::size_t>(col)] = nt;
        } else {
          still.push_back(k);
        }
      }
      pending.swap(still);
    }
  }

  sol.diag.max_newton_iterations = iter;
  for (double n : norms) sol.diag.max_residual = std::max(sol.diag.max_residual, n);
  return sol;
}

// ---------------------------------------------------------------------------
// Numeric steps

namespace {

Mat repeat_rows(const Mat &Y, Index s) { return Y.replicate(s, 1); }

Mat combine_weighted(const Mat &Yn, const Mat &F, const StateVector &b, double h, Index d) {
  Mat out = Yn;
  for (Index j = 0; j < b.size(); ++j) out += (h * b(j)) * F.middleRows(j * d, d);
  return out;
}

void check_positive_step(double h) {
  if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("step size must be positive and finite");
}

Mat if_euler_batch(const VectorField &f, const Mat &Y, double h, BatchDiagnostics *diag) {
  const Mat F = f.eval(Y);
  const auto jacs = f.jacobian_batch(Y);
  Mat out(Y.rows(), Y.cols());
  for (Index k = 0; k < Y.cols(); ++k) {
    const DenseMatrix &L = jacs[static_cast<std::size_t>(k)];
    const StateVector u = Y.col(k) + h * (F.col(k) - L * Y.col(k));
    out.col(k) = expm_dense(h * L) * u;
  }
  if (diag) {
    diag->f_evals += Y.cols();
    diag->jac_evals += Y.cols();
  }
  return out;
}

}  // namespace

Mat step_batch(Scheme s, const VectorField &f, const Mat &Y, double h, const NewtonOptions &opt,
               BatchDiagnostics *diag) {
  check_positive_step(h);
  const Index d = f.dim();
  BatchDiagnostics local;
  Mat out;
  switch (s) {
    case Scheme::ExplicitEuler:
      out = Y + h * f.eval(Y);
      local.f_evals = Y.cols();
      break;
    case Scheme::RK4: {
      const Mat k1 = f.eval(Y);
      const Mat k2 = f.eval(Y + 0.5 * h * k1);
      const Mat k3 = f.eval(Y + 0.5 * h * k2);
      const Mat k4 = f.eval(Y + h * k3);
      out = Y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      local.f_evals = 4 * Y.cols();
      break;
    }
    case Scheme::BackwardEuler: {
      auto sol = solve_stages(f, unit_tableau(1.0), h, Y, Y, opt);
      out = Y + h * sol.stage_f;
      local = sol.diag;
      break;
    }
    case Scheme::Trapezoid: {
      const Mat E = Y + 0.5 * h * f.eval(Y);
      auto sol = solve_stages(f, unit_tableau(0.5), h, E, Y, opt);
      out = sol.stages;
      local = sol.diag;
      local.f_evals += Y.cols();
      break;
    }
    case Scheme::Radau3:
    case Scheme::Radau5: {
      const auto &tab = s == Scheme::Radau3 ? radau3() : radau5();
      const Mat E = repeat_rows(Y, tab.stages());
      auto sol = solve_stages(f, tab.A, h, E, E, opt);
      out = combine_weighted(Y, sol.stage_f, tab.b, h, d);
      local = sol.diag;
      break;
    }
    case Scheme::IFEuler:
      out = if_euler_batch(f, Y, h, &local);
      break;
  }
  if (diag) {
    diag->f_evals += local.f_evals;
    diag->jac_evals += local.jac_evals;
    diag->max_newton_iterations = std::max(diag->max_newton_iterations, local.max_newton_iterations);
    diag->max_residual = std::max(diag->max_residual, local.max_residual);
  }
  return out;
}

namespace {

StepResult single(Scheme s, const VectorField &f, const StateVector &y, double h, const NewtonOptions &opt) {
  BatchDiagnostics bd;
  StepResult r;
  r.y_next = step_batch(s, f, y, h, opt, &bd);
  r.diag.f_evals = bd.f_evals;
  r.diag.jac_evals = bd.jac_evals;
  r.diag.newton_iterations = bd.max_newton_iterations;
  r.diag.residual_norm = bd.max_residual;
  r.diag.converged = true;
  return r;
}

}  // namespace

StepResult step_explicit_euler(const VectorField &f, const StateVector &y, double h) {
  return single(Scheme::ExplicitEuler, f, y, h, {});
}
StepResult step_rk4(const VectorField &f, const StateVector &y, double h) { return single(Scheme::RK4, f, y, h, {}); }
StepResult step_backward_euler(const VectorField &f, const StateVector &y, double h, const NewtonOptions &opt) {
  return single(Scheme::BackwardEuler, f, y, h, opt);
}
StepResult step_trapezoid(const VectorField &f, const StateVector &y, double h, const NewtonOptions &opt) {
  return single(Scheme::Trapezoid, f, y, h, opt);
}
StepResult step_if_euler(const VectorField &f, const StateVector &y, double h) {
  return single(Scheme::IFEuler, f, y, h, {});
}

StepResult step_radau(const ButcherTableau &tab, const VectorField &f, const StateVector &y, double h,
                      const NewtonOptions &opt) {
  check_positive_step(h);
  const Mat E = repeat_rows(y, tab.stages());
  auto sol = solve_stages(f, tab.A, h, E, E, opt);
  StepResult r;
  r.y_next = combine_weighted(y, sol.stage_f, tab.b, h, f.dim());
  r.diag.f_evals = sol.diag.f_evals;
  r.diag.jac_evals = sol.diag.jac_evals;
  r.diag.newton_iterations = sol.diag.max_newton_iterations;
  r.diag.residual_norm = sol.diag.max_residual;
  return r;
}

StepResult step(Scheme s, const VectorField &f, const StateVector &y, double h, const NewtonOptions &opt) {
  return single(s, f, y, h, opt);
}

// ---------------------------------------------------------------------------
// Steps on the tape

namespace {

// Root Y* of Y = E + h (A kron I) F with F = f(Y*; theta) recorded as inputs.
// Backward: lambda = (I - h A kron J)^-T Ybar per column, then
// Ebar = lambda and Fbar_j = h sum_i a_ij lambda_i.
ad::Var record_implicit(const VectorField &numeric, const DenseMatrix &A, double h, ad::Var E,
                        const std::vector<ad::Var> &F, Mat Ystar) {
  ad::Tape &tape = *E.tape();
  std::vector<int> ids{E.id()};
  for (const auto &v : F) ids.push_back(v.id());
  const Index s = A.rows();
  const Index d = numeric.dim();
  return tape.record(std::move(Ystar), ids, [ids, numeric, A, h, s, d](ad::Tape &tp, int self) {
    const Mat &Ybar = tp.upstream(self);
    const Mat &Y = tp.value(self);
    const Index S = Y.cols();
    const auto jacs = numeric.jacobian_batch(stages_to_states(Y, s, d));
    Mat lambda(s * d, S);
    for (Index k = 0; k < S; ++k) {
      std::vector<const DenseMatrix *> Jk;
      for (Index j = 0; j < s; ++j) Jk.push_back(&jacs[static_cast<std::size_t>(j * S + k)]);
      try {
        lambda.col(k) = lu_factor(stage_jacobian(A, h, Jk)).solve_transpose(Ybar.col(k));
      } catch (const SingularMatrix &e) {
        throw SingularJacobian(std::string("implicit-function gradient: ") + e.what());
      }
    }
    tp.accumulate(ids[0], lambda);
    for (Index j = 0; j < s; ++j) {
      Mat Fbar = Mat::Zero(d, S);
      for (Index i = 0; i < s; ++i) {
        if (A(i, j) != 0.0) Fbar += (h * A(i, j)) * lambda.middleRows(i * d, d);
      }
      tp.accumulate(ids[static_cast<std::size_t>(j + 1)], Fbar);
    }
  });
}

// y+ = expm(h L_k) u_k per column, L_k assembled from Jacobian column nodes.
ad::Var record_exp_apply(const std::vector<ad::Var> &Lcols, ad::Var U, double h) {
  ad::Tape &tape = *U.tape();
  const Index d = U.rows();
  const Index S = U.cols();
  std::vector<int> ids;
  for (const auto &c : Lcols) ids.push_back(c.id());
  ids.push_back(U.id());

  auto assemble = [d](const ad::Tape &tp, const std::vector<int> &ids, Index k) {
    DenseMatrix L(d, d);
    for (Index j = 0; j < d; ++j) L.col(j) = tp.value(ids[static_cast<std::size_t>(j)]).col(k);
    return L;
  };

  auto cache = std::make_shared<std::vector<DenseMatrix>>();
  cache->reserve(static_cast<std::size_t>(S));
  Mat value(d, S);
  for (Index k = 0; k < S; ++k) {
    cache->push_back(expm_dense(h * assemble(tape, ids, k)));
    value.col(k) = cache->back() * U.value().col(k);
  }
  return tape.record(std::move(value), ids, [ids, cache, assemble, h, d](ad::Tape &tp, int self) {
    const Mat &g = tp.upstream(self);
    const int iu = ids.back();
    const Mat &u = tp.value(iu);
    const Index S = g.cols();
    Mat ubar(d, S);
    for (Index k = 0; k < S; ++k) ubar.col(k) = (*cache)[static_cast<std::size_t>(k)].transpose() * g.col(k);
    tp.accumulate(iu, ubar);

    bool any_l = false;
    for (Index j = 0; j < d; ++j) any_l = any_l || tp.needs_grad(ids[static_cast<std::size_t>(j)]);
    if (!any_l) return;
    std::vector<Mat> Lbar(static_cast<std::size_t>(d), Mat(d, S));
    for (Index k = 0; k < S; ++k) {
      const DenseMatrix W = g.col(k) * u.col(k).transpose();
      const DenseMatrix G = h * expm_frechet_adjoint_dense(h * assemble(tp, ids, k), W);
      for (Index j = 0; j < d; ++j) Lbar[static_cast<std::size_t>(j)].col(k) = G.col(j);
    }
    for (Index j = 0; j < d; ++j) tp.accumulate(ids[static_cast<std::size_t>(j)], Lbar[static_cast<std::size_t>(j)]);
  });
}

std::vector<ad::Var> split_stage_rows(ad::Var Y, Index s, Index d) {
  std::vector<ad::Var> out;
  for (Index j = 0; j < s; ++j) out.push_back(ad::row_block(Y, j * d, d));
  return out;
}

}  // namespace

ad::Var record_step(Scheme s, const TapedField &field, ad::Var Yn, double h, const RecordOptions &opt,
                    BatchDiagnostics *diag) {
  check_positive_step(h);
  ad::Tape &tape = *Yn.tape();
  const Index d = Yn.rows();
  const Mat y = Yn.value();
  BatchDiagnostics local;

  auto implicit_rk = [&](const DenseMatrix &A, ad::Var E, const Mat &guess) {
    auto sol = solve_stages(field.numeric, A, h, E.value(), guess, opt.newton);
    local = sol.diag;
    const Index stages = A.rows();
    std::vector<ad::Var> F;
    for (Index j = 0; j < stages; ++j) {
      F.push_back(field.eval(tape.constant(sol.stages.middleRows(j * d, d))));
    }
    return std::make_pair(record_implicit(field.numeric, A, h, E, F, sol.stages), std::move(sol));
  };

  ad::Var out;
  switch (s) {
    case Scheme::ExplicitEuler:
      out = Yn + h * field.eval(Yn);
      local.f_evals = y.cols();
      break;
    case Scheme::RK4: {
      const ad::Var k1 = field.eval(Yn);
      const ad::Var k2 = field.eval(Yn + (0.5 * h) * k1);
      const ad::Var k3 = field.eval(Yn + (0.5 * h) * k2);
      const ad::Var k4 = field.eval(Yn + h * k3);
      out = Yn + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      local.f_evals = 4 * y.cols();
      break;
    }
    case Scheme::BackwardEuler: {
      auto [Y, sol] = implicit_rk(unit_tableau(1.0), Yn, y);
      // Stiffly accurate: y+ is the stage; shift its value to y + h f(Y*).
      out = ad::plus_constant(Y, y + h * sol.stage_f - sol.stages);
      break;
    }
    case Scheme::Trapezoid: {
      const ad::Var E = Yn + (0.5 * h) * field.eval(Yn);
      auto [Y, sol] = implicit_rk(unit_tableau(0.5), E, y);
      out = Y;
      local.f_evals += y.cols();
      break;
    }
    case Scheme::Radau3:
    case Scheme::Radau5: {
      const auto &tab = s == Scheme::Radau3 ? radau3() : radau5();
      const Index stages = tab.stages();
      std::vector<ad::Var> reps(static_cast<std::size_t>(stages), Yn);
      const ad::Var E = ad::vstack(reps);
      auto [Y, sol] = implicit_rk(tab.A, E, E.value());
      const ad::Var last = split_stage_rows(Y, stages, d).back();
      const Mat combined = combine_weighted(y, sol.stage_f, tab.b, h, d);
      out = ad::plus_constant(last, combined - sol.stages.middleRows((stages - 1) * d, d));
      break;
    }
    case Scheme::IFEuler: {
      auto fj = field.eval_with_jacobian(Yn);
      std::vector<ad::Var> Lcols = fj.columns;
      if (opt.freeze_linearization) {
        for (auto &c : Lcols) c = ad::stop_gradient(c);
      }
      ad::Var LY = ad::mul_rowwise(Lcols[0], ad::row_block(Yn, 0, 1));
      for (Index j = 1; j < d; ++j) LY = LY + ad::mul_rowwise(Lcols[static_cast<std::size_t>(j)], ad::row_block(Yn, j, 1));
      const ad::Var U = Yn + h * (fj.value - LY);
      out = record_exp_apply(Lcols, U, h);
      local.f_evals = y.cols();
      local.jac_evals = y.cols();
      break;
    }
  }
  if (diag) {
    diag->f_evals += local.f_evals;
    diag->jac_evals += local.jac_evals;
    diag->max_newton_iterations = std::max(diag->max_newton_iterations, local.max_newton_iterations);
    diag->max_residual = std::max(diag->max_residual, local.max_residual);
  }
  return out;
}

StepGradient ift_step_gradient(Scheme s, const PiNet &net, const StateVector &y, double h, const StateVector &cotangent,
                               const RecordOptions &opt) {
  ad::Tape tape;
  const ad::Var theta = tape.variable(net.params());
  const ad::Var Yn = tape.variable(y);
  const TapedField field = make_taped_field(net, theta);
  const ad::Var out = record_step(s, field, Yn, h, opt);
  if (cotangent.size() != y.size()) throw ShapeMismatch("ift_step_gradient: cotangent dimension mismatch");
  tape.backward(out, cotangent);
  StepGradient g;
  g.y_next = out.value().col(0);
  g.d_theta = tape.adjoint(theta).col(0);
  g.d_y = tape.adjoint(Yn).col(0);
  return g;
}

// ---------------------------------------------------------------------------
// Trajectories

Trajectory integrate_fixed(Scheme s, const VectorField &f, const StateVector &y0, const std::vector<double> &t_grid,
                           const NewtonOptions &opt) {
  if (t_grid.size() < 2) throw std::invalid_argument("integrate_fixed: need at least two grid points");
  for (std::size_t i = 1; i < t_grid.size(); ++i) {
    if (!(t_grid[i] > t_grid[i - 1])) throw std::invalid_argument("integrate_fixed: grid is not strictly increasing");
  }
  Trajectory traj;
  traj.times = t_grid;
  traj.states.resize(y0.size(), static_cast<Index>(t_grid.size()));
  traj.states.col(0) = y0;
  StateVector y = y0;
  for (std::size_t i = 0; i + 1 < t_grid.size(); ++i) {
    BatchDiagnostics bd;
    try {
      y = step_batch(s, f, y, t_grid[i + 1] - t_grid[i], opt, &bd);
    } catch (const std::exception &e) {
      throw StepFailure("interval " + std::to_string(i) + ": " + e.what(), i);
    }
    if (!y.allFinite()) throw StepFailure("interval " + std::to_string(i) + ": non-finite state", i);
    traj.states.col(static_cast<Index>(i + 1)) = y;
    traj.f_evals += bd.f_evals;
    traj.jac_evals += bd.jac_evals;
    ++traj.accepted;
  }
  return traj;
}

Trajectory integrate_rkf45_adaptive(const VectorField &f, const StateVector &y0, double t0, double t1, double rtol,
                                    double atol) {
  if (!(rtol > 0.0) || !(atol > 0.0)) throw std::invalid_argument("rkf45: tolerances must be positive");
  if (!(t1 > t0)) throw std::invalid_argument("rkf45: empty time span");

  static constexpr double a21 = 1.0 / 4.0;
  static constexpr double a31 = 3.0 / 32.0, a32 = 9.0 / 32.0;
  static constexpr double a41 = 1932.0 / 2197.0, a42 = -7200.0 / 2197.0, a43 = 7296.0 / 2197.0;
  static constexpr double a51 = 439.0 / 216.0, a52 = -8.0, a53 = 3680.0 / 513.0, a54 = -845.0 / 4104.0;
  static constexpr double a61 = -8.0 / 27.0, a62 = 2.0, a63 = -3544.0 / 2565.0, a64 = 1859.0 / 4104.0,
                          a65 = -11.0 / 40.0;
  static constexpr std::array<double, 6> b4 = {25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -1.0 / 5.0, 0.0};
  static constexpr std::array<double, 6> b5 = {16.0 / 135.0,       0.0,          6656.0 / 12825.0,
                                               28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0};

  const double span = t1 - t0;
  const double min_step = 1e-14 * span;
  Trajectory traj;
  std::vector<StateVector> states{y0};
  traj.times.push_back(t0);

  StateVector y = y0;
  double t = t0;
  StateVector k1 = f(y);
  traj.f_evals = 1;

  auto scaled_norm = [&](const StateVector &v, const StateVector &ya, const StateVector &yb) {
    const StateVector sc = (atol + rtol * ya.cwiseAbs().cwiseMax(yb.cwiseAbs()).array()).matrix();
    return std::sqrt((v.cwiseQuotient(sc)).squaredNorm() / static_cast<double>(v.size()));
  };

  // Starting step from the size of y and f(y).
  double h;
  {
    const double d0 = scaled_norm(y, y, y);
    const double d1 = scaled_norm(k1, y, y);
    h = d1 == 0.0 ? span : std::min(span, (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1);
  }

  while (t < t1) {
    if (t + h > t1) h = t1 - t;
    if (h < min_step) throw MinStepReached("rkf45: step size fell below 1e-14 of the span", t);
    const StateVector k2 = f(y + h * (a21 * k1));
    const StateVector k3 = f(y + h * (a31 * k1 + a32 * k2));
    const StateVector k4 = f(y + h * (a41 * k1 + a42 * k2 + a43 * k3));
    const StateVector k5 = f(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
    const StateVector k6 = f(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
    traj.f_evals += 5;
    const std::array<const StateVector *, 6> k = {&k1, &k2, &k3, &k4, &k5, &k6};
    StateVector y5 = y, err = StateVector::Zero(y.size());
    for (std::size_t i = 0; i < 6; ++i) {
      y5 += (h * b5[i]) * *k[i];
      err += (h * (b5[i] - b4[i])) * *k[i];
    }
    const double e = scaled_norm(err, y, y5);
    if (e <= 1.0 && y5.allFinite()) {
      t = (t1 - (t + h) <= min_step) ? t1 : t + h;
      y = y5;
      states.push_back(y);
      traj.times.push_back(t);
      ++traj.accepted;
      if (t < t1) {
        k1 = f(y);
        ++traj.f_evals;
      }
      const double grow = e == 0.0 ? 5.0 : std::min(5.0, std::max(0.2, 0.9 * std::pow(e, -0.2)));
      h *= grow;
    } else {
      ++traj.rejected;
      const double shrink = std::isfinite(e) ? std::max(0.2, 0.9 * std::pow(e, -0.25)) : 0.2;
      h *= std::min(shrink, 0.9);
    }
  }

  traj.states.resize(y0.size(), static_cast<Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) traj.states.col(static_cast<Index>(i)) = states[i];
  return traj;
}

}  // namespace stiffnode

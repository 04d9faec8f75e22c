#include "stiffnode/bench.hpp"

#include "stiffnode/matexp.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace stiffnode {

namespace {

Exponents mono(std::initializer_list<int> e) { return Exponents(e); }

RecoveredModel make_model(int variables, int degree, std::vector<Polynomial> equations, std::string provenance) {
  RecoveredModel m;
  m.variables = variables;
  m.degree = degree;
  m.equations = std::move(equations);
  m.provenance = std::move(provenance);
  return m;
}

RecoveredModel linear_model(const DenseMatrix &A, std::string provenance) {
  const auto d = static_cast<int>(A.rows());
  std::vector<Polynomial> eqs(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      if (A(i, j) == 0.0) continue;
      Exponents e(static_cast<std::size_t>(d), 0);
      e[static_cast<std::size_t>(j)] = 1;
      eqs[static_cast<std::size_t>(i)][e] = A(i, j);
    }
  }
  return make_model(d, 1, std::move(eqs), std::move(provenance));
}

VectorField linear_field(const DenseMatrix &A) {
  return VectorField(
      static_cast<int>(A.rows()), [A](const Mat &Y) -> Mat { return A * Y; },
      [A](const StateVector &) -> DenseMatrix { return A; });
}

BenchmarkProblem make_linear1d() {
  BenchmarkProblem p;
  p.name = "linear1d";
  p.dim = 1;
  const DenseMatrix A = DenseMatrix::Constant(1, 1, -10000.0);
  p.linear = A;
  p.field = linear_field(A);
  p.truth = linear_model(A, "truth: linear1d");
  p.y0 = StateVector::Constant(1, 1000.0);
  p.t0 = 0.0;
  p.t1 = 0.01;
  p.degree = 1;
  p.variables = {"y"};
  p.default_n = {5, 10, 25, 50, 100, 200, 1000, 10000};
  p.training = {3.0, 1e-5, 100000};
  return p;
}

DenseMatrix tridiagonal10() {
  DenseMatrix A = DenseMatrix::Zero(10, 10);
  const double diag[] = {-10, -20, -50, -100, -500, -1000, -5000, -10000, -20000, -50000};
  for (Index i = 0; i < 10; ++i) {
    A(i, i) = diag[i];
    if (i > 0) A(i, i - 1) = 5.0;
    if (i < 9) A(i, i + 1) = 5.0;
  }
  return A;
}

BenchmarkProblem make_linear10d() {
  BenchmarkProblem p;
  p.name = "linear10d";
  p.dim = 10;
  const DenseMatrix A = tridiagonal10();
  p.linear = A;
  p.field = linear_field(A);
  p.truth = linear_model(A, "truth: linear10d");
  p.y0 = StateVector::Constant(10, 20.0);
  p.t0 = 0.0;
  p.t1 = 0.4;
  p.degree = 1;
  for (int i = 1; i <= 10; ++i) p.variables.push_back("y" + std::to_string(i));
  p.default_n = {10, 17, 32, 100, 316, 1000};
  p.training = {0.1, 1e-5, 20000};
  return p;
}

BenchmarkProblem make_nonlinear3d() {
  BenchmarkProblem p;
  p.name = "nonlinear3d";
  p.dim = 3;
  p.field = VectorField(
      3,
      [](const Mat &Y) -> Mat {
        Mat out(3, Y.cols());
        for (Index k = 0; k < Y.cols(); ++k) {
          const double a = Y(0, k), b = Y(1, k), c = Y(2, k);
          out(0, k) = -500.0 * a + 3.8 * b * b + 1.35 * c;
          out(1, k) = 0.82 * a - 24.0 * b + 7.5 * c * c;
          out(2, k) = -0.5 * a * a + 1.85 * b - 6.5 * c * c;
        }
        return out;
      },
      [](const StateVector &y) -> DenseMatrix {
        DenseMatrix J(3, 3);
        J << -500.0, 7.6 * y(1), 1.35,  //
            0.82, -24.0, 15.0 * y(2),   //
            -y(0), 1.85, -13.0 * y(2);
        return J;
      });
  p.truth = make_model(3, 2,
                       {{{mono({1, 0, 0}), -500.0}, {mono({0, 2, 0}), 3.8}, {mono({0, 0, 1}), 1.35}},
                        {{mono({1, 0, 0}), 0.82}, {mono({0, 1, 0}), -24.0}, {mono({0, 0, 2}), 7.5}},
                        {{mono({2, 0, 0}), -0.5}, {mono({0, 1, 0}), 1.85}, {mono({0, 0, 2}), -6.5}}},
                       "truth: nonlinear3d");
  p.y0 = StateVector(3);
  p.y0 << 15.0, 7.0, 10.0;
  p.t0 = 0.0;
  p.t1 = 5.0;
  p.degree = 2;
  p.variables = {"y1", "y2", "y3"};
  p.default_n = {48, 94, 369, 1467};
  p.training = {0.1, 1e-4, 20000};
  return p;
}

}  // namespace

BenchmarkProblem van_der_pol(double mu, double span) {
  BenchmarkProblem p;
  p.name = mu == 1000.0 ? "vanderpol" : "vanderpol-mu" + std::to_string(mu);
  p.dim = 2;
  p.field = VectorField(
      2,
      [mu](const Mat &Y) -> Mat {
        Mat out(2, Y.cols());
        for (Index k = 0; k < Y.cols(); ++k) {
          const double x = Y(0, k), y = Y(1, k);
          out(0, k) = y;
          out(1, k) = mu * y - mu * x * x * y - x;
        }
        return out;
      },
      [mu](const StateVector &s) -> DenseMatrix {
        DenseMatrix J(2, 2);
        J << 0.0, 1.0,  //
            -2.0 * mu * s(0) * s(1) - 1.0, mu - mu * s(0) * s(0);
        return J;
      });
  p.truth = make_model(2, 3,
                       {{{mono({0, 1}), 1.0}},
                        {{mono({0, 1}), mu}, {mono({2, 1}), -mu}, {mono({1, 0}), -1.0}}},
                       "truth: " + p.name);
  p.y0 = StateVector(2);
  p.y0 << 1.0, 0.0;
  p.t0 = 0.0;
  p.t1 = span;
  p.degree = 3;
  p.variables = {"x", "y"};
  p.default_n = {100, 391, 1555, 6213, 24849};
  p.training = {1e-2, 1e-5, 20000};
  return p;
}

double van_der_pol_period(double mu) {
  // (3 - 2 ln 2) mu + 3 a mu^(-1/3), a the magnitude of the first Airy zero
  constexpr double airy = 2.338107410459767;
  return (3.0 - 2.0 * std::numbers::ln2) * mu + 3.0 * airy * std::cbrt(1.0 / mu);
}

const std::vector<std::string> &problem_names() {
  static const std::vector<std::string> names = {"linear1d", "linear10d", "nonlinear3d", "vanderpol"};
  return names;
}

const BenchmarkProblem &get_problem(const std::string &name) {
  static const std::map<std::string, BenchmarkProblem> registry = [] {
    std::map<std::string, BenchmarkProblem> r;
    for (auto p : {make_linear1d(), make_linear10d(), make_nonlinear3d(), van_der_pol(1000.0, 1300.0)}) {
      r.emplace(p.name, std::move(p));
    }
    return r;
  }();
  const auto it = registry.find(name);
  if (it == registry.end()) throw UnknownProblem(name);
  return it->second;
}

VectorField field_from_model(const RecoveredModel &model) {
  const int d = model.variables;
  if (static_cast<int>(model.equations.size()) != d) throw ShapeMismatch("field_from_model: model is not square");
  auto eval = [model](const Mat &Y) -> Mat {
    Mat out(Y.rows(), Y.cols());
    for (Index k = 0; k < Y.cols(); ++k) out.col(k) = model.evaluate(Y.col(k));
    return out;
  };
  auto jac = [model, d](const StateVector &y) -> DenseMatrix {
    DenseMatrix J = DenseMatrix::Zero(d, d);
    for (int i = 0; i < d; ++i) {
      for (const auto &[e, c] : model.equations[static_cast<std::size_t>(i)]) {
        for (int j = 0; j < d; ++j) {
          const int pj = e[static_cast<std::size_t>(j)];
          if (pj == 0) continue;
          double term = c * pj;
          for (int l = 0; l < d; ++l) {
            const int p = e[static_cast<std::size_t>(l)] - (l == j ? 1 : 0);
            for (int q = 0; q < p; ++q) term *= y(l);
          }
          J(i, j) += term;
        }
      }
    }
    return J;
  };
  return VectorField(d, eval, jac);
}

std::vector<double> uniform_times(double t0, double t1, Index n) {
  if (n < 2) throw std::invalid_argument("uniform_times: n must be >= 2");
  std::vector<double> t(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    t[static_cast<std::size_t>(i)] = t0 + (t1 - t0) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  t.back() = t1;
  return t;
}

namespace {

// Radau5 over [0, span] in m equal substeps.
StateVector radau_substeps(const VectorField &f, StateVector y, double span, long m, ReferenceStats &stats) {
  const double h = span / static_cast<double>(m);
  for (long k = 0; k < m; ++k) {
    const auto r = step_radau(radau5(), f, y, h);
    stats.f_evals += r.diag.f_evals;
    stats.jac_evals += r.diag.jac_evals;
    y = r.y_next;
    if (!y.allFinite()) throw NewtonDiverged("non-finite substep", 0, 0, 0.0);
  }
  return y;
}

bool levels_agree(const StateVector &coarse, const StateVector &fine, double tol) {
  for (Index i = 0; i < fine.size(); ++i) {
    if (!(std::abs(fine(i) - coarse(i)) <= tol * std::max(std::abs(fine(i)), 1.0))) return false;
  }
  return true;
}

}  // namespace

TrajectoryDataset radau_reference(const VectorField &f, const StateVector &y0, const std::vector<double> &times,
                                  const ReferenceOptions &opt, ReferenceStats *stats) {
  ReferenceStats local;
  TrajectoryDataset data;
  data.times = times;
  data.states.resize(y0.size(), static_cast<Index>(times.size()));
  data.states.col(0) = y0;
  StateVector y = y0;
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    const double span = times[i + 1] - times[i];
    std::optional<StateVector> coarse;
    bool done = false;
    for (int depth = 0; depth <= opt.max_halvings && !done; ++depth) {
      const long m = 1L << depth;
      std::optional<StateVector> fine;
      try {
        fine = radau_substeps(f, y, span, m, local);
      } catch (const NewtonDiverged &) {
        fine.reset();
      }
      if (fine && coarse && levels_agree(*coarse, *fine, opt.tol)) {
        y = *fine;
        local.substeps += m;
        local.max_depth = std::max(local.max_depth, depth);
        done = true;
      }
      coarse = fine;
    }
    if (!done) {
      throw RefinementFailure("reference: interval " + std::to_string(i) + " did not converge after " +
                                  std::to_string(opt.max_halvings) + " halvings",
                              static_cast<Index>(i));
    }
    data.states.col(static_cast<Index>(i + 1)) = y;
  }
  if (stats) *stats = local;
  return data;
}

TrajectoryDataset generate_reference(const BenchmarkProblem &problem, Index n, const ReferenceOptions &opt,
                                     ReferenceStats *stats) {
  const auto times = uniform_times(problem.t0, problem.t1, n);
  TrajectoryDataset data;
  nlohmann::json prov;
  if (problem.linear) {
    data.times = times;
    data.states.resize(problem.dim, n);
    for (Index i = 0; i < n; ++i) {
      const double dt = times[static_cast<std::size_t>(i)] - problem.t0;
      data.states.col(i) = expm_dense(*problem.linear * dt) * problem.y0;
    }
    prov["generator"] = "exact-expm";
    prov["tolerance"] = 0.0;
    prov["refinement_depth"] = 0;
    if (stats) *stats = ReferenceStats{};
  } else {
    ReferenceStats local;
    data = radau_reference(problem.field, problem.y0, times, opt, &local);
    prov["generator"] = "radau5-self-convergent";
    prov["tolerance"] = opt.tol;
    prov["refinement_depth"] = local.max_depth;
    prov["f_evals"] = local.f_evals;
    if (stats) *stats = local;
  }
  data.uniform = true;
  prov["problem"] = problem.name;
  prov["n"] = n;
  prov["t0"] = problem.t0;
  prov["t1"] = problem.t1;
  prov["uniform"] = true;
  data.provenance = prov;
  data.validate();
  return data;
}

std::string dataset_to_csv(const TrajectoryDataset &data) {
  std::string out = "t";
  for (int i = 0; i < data.dim(); ++i) out += ",y" + std::to_string(i);
  out += '\n';
  char buf[40];
  for (Index k = 0; k < data.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g", data.times[static_cast<std::size_t>(k)]);
    out += buf;
    for (int i = 0; i < data.dim(); ++i) {
      std::snprintf(buf, sizeof buf, ",%.17g", data.states(i, k));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

TrajectoryDataset dataset_from_csv(const std::string &text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw DatasetParseError("dataset: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header[0] != "t") throw DatasetParseError("dataset: header must be t,y0,...");
  for (std::size_t i = 1; i < header.size(); ++i) {
    if (header[i] != "y" + std::to_string(i - 1)) throw DatasetParseError("dataset: unexpected column " + header[i]);
  }
  const auto d = static_cast<Index>(header.size() - 1);
  std::vector<double> times;
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception &) {
        throw DatasetParseError("dataset: line " + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (static_cast<Index>(vals.size()) != d + 1) {
      throw DatasetParseError("dataset: line " + std::to_string(lineno) + " has " + std::to_string(vals.size()) +
                              " fields, expected " + std::to_string(d + 1));
    }
    times.push_back(vals[0]);
    rows.push_back(std::move(vals));
  }
  if (rows.size() < 2) throw DatasetParseError("dataset: need at least two rows");
  TrajectoryDataset data;
  data.times = times;
  data.states.resize(d, static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (Index i = 0; i < d; ++i) data.states(i, static_cast<Index>(k)) = rows[k][static_cast<std::size_t>(i + 1)];
  }
  // Uniform when spacing matches the endpoint interpolation.
  data.uniform = true;
  try {
    data.validate();
  } catch (const std::invalid_argument &) {
    data.uniform = false;
    try {
      data.validate();
    } catch (const std::exception &e) {
      throw DatasetParseError(e.what());
    }
  }
  return data;
}

namespace {

std::string sidecar_path(const std::string &csv_path) {
  std::filesystem::path p(csv_path);
  p.replace_extension(".json");
  return p.string();
}

}  // namespace

void write_dataset(const std::string &csv_path, const TrajectoryDataset &data) {
  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + csv_path);
  csv << dataset_to_csv(data);
  std::ofstream side(sidecar_path(csv_path), std::ios::binary);
  if (!side) throw std::runtime_error("cannot write " + sidecar_path(csv_path));
  side << data.provenance.dump(2) << '\n';
}

TrajectoryDataset read_dataset(const std::string &csv_path) {
  std::ifstream csv(csv_path, std::ios::binary);
  if (!csv) throw std::runtime_error("cannot read " + csv_path);
  std::stringstream buf;
  buf << csv.rdbuf();
  TrajectoryDataset data = dataset_from_csv(buf.str());
  std::ifstream side(sidecar_path(csv_path));
  if (side) {
    try {
      data.provenance = nlohmann::json::parse(side);
    } catch (const nlohmann::json::exception &e) {
      throw DatasetParseError(std::string("dataset sidecar: ") + e.what());
    }
  }
  return data;
}

StiffnessDemo stiffness_demo(const BenchmarkProblem &problem, double rtol, double span, Index intervals) {
  if (!(rtol > 0.0)) throw std::invalid_argument("stiffness_demo: rtol must be positive");
  StiffnessDemo demo;
  demo.problem = problem.name;
  demo.span = span;
  demo.rtol = rtol;
  demo.intervals = intervals;

  const auto rkf = integrate_rkf45_adaptive(problem.field, problem.y0, problem.t0, problem.t0 + span, rtol, rtol);
  demo.rkf_points = static_cast<long>(rkf.times.size());
  demo.rkf_evals = rkf.f_evals;
  demo.rkf_rejected = rkf.rejected;

  ReferenceOptions opt;
  opt.tol = rtol;
  ReferenceStats stats;
  radau_reference(problem.field, problem.y0, uniform_times(problem.t0, problem.t0 + span, intervals + 1), opt, &stats);
  demo.radau_points = stats.substeps + 1;
  demo.radau_evals = stats.f_evals;
  demo.radau_jac_evals = stats.jac_evals;
  demo.ratio = static_cast<double>(demo.rkf_evals) / static_cast<double>(demo.radau_evals);
  return demo;
}

nlohmann::json stiffness_demo_to_json(const StiffnessDemo &demo) {
  return {{"problem", demo.problem},
          {"span", demo.span},
          {"rtol", demo.rtol},
          {"intervals", demo.intervals},
          {"rkf45", {{"points", demo.rkf_points}, {"f_evals", demo.rkf_evals}, {"rejected", demo.rkf_rejected}}},
          {"radau5",
           {{"points", demo.radau_points}, {"f_evals", demo.radau_evals}, {"jac_evals", demo.radau_jac_evals}}},
          {"ratio", demo.ratio}};
}

}  // namespace stiffnode

#pragma once

#include "stiffnode/odeint.hpp"
#include "stiffnode/pinet.hpp"
#include "stiffnode/train.hpp"

#include <json.hpp>

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiffnode {

class UnknownProblem : public std::invalid_argument {
public:
  explicit UnknownProblem(const std::string &name) : std::invalid_argument("unknown problem: " + name) {}
};

class RefinementFailure : public std::runtime_error {
public:
  RefinementFailure(const std::string &what, Index interval) : std::runtime_error(what), interval(interval) {}
  Index interval;
};

class DatasetParseError : public std::runtime_error {
public:
  explicit DatasetParseError(const std::string &what) : std::runtime_error(what) {}
};

/// Training settings a problem ships with.
struct TrainDefaults {
  double lr = 1e-2;
  double lr_min = 1e-4;
  int epochs = 20000;
};

struct BenchmarkProblem {
  std::string name;
  int dim = 1;
  VectorField field;  // with analytic Jacobian
  RecoveredModel truth;
  StateVector y0;
  double t0 = 0.0;
  double t1 = 1.0;
  int degree = 1;
  std::vector<std::string> variables;
  std::optional<DenseMatrix> linear;  // y' = linear * y when set
  std::vector<int> default_n;
  TrainDefaults training;

  PiNetShape shape() const { return PiNetShape::with_default_width(dim, degree); }
};

/// linear1d, linear10d, nonlinear3d, vanderpol.
const std::vector<std::string> &problem_names();
const BenchmarkProblem &get_problem(const std::string &name);

/// x' = y, y' = mu y - mu x^2 y - x from (1, 0). mu = 1000 is "vanderpol".
BenchmarkProblem van_der_pol(double mu, double span);
/// Leading terms of the relaxation-oscillation period for large mu.
double van_der_pol_period(double mu);

/// Field and model built from a polynomial coefficient map.
VectorField field_from_model(const RecoveredModel &model);

struct ReferenceOptions {
  double tol = 1e-10;     // per component, relative to max(|y|, 1)
  int max_halvings = 24;  // substeps per interval up to 2^24
};

struct ReferenceStats {
  long f_evals = 0;
  long jac_evals = 0;
  long substeps = 0;  // accepted substeps of the emitted (finer) levels
  int max_depth = 0;  // largest halving count over intervals
};

/// Uniform grid of n points on [t0, t1].
std::vector<double> uniform_times(double t0, double t1, Index n);

/// Exact matrix exponential solution for linear problems; per-interval
/// self-convergent Radau5 sub-stepping otherwise.
TrajectoryDataset generate_reference(const BenchmarkProblem &problem, Index n, const ReferenceOptions &opt = {},
                                     ReferenceStats *stats = nullptr);

/// Radau5 sub-stepping of an arbitrary field over a grid (no exact path).
TrajectoryDataset radau_reference(const VectorField &f, const StateVector &y0, const std::vector<double> &times,
                                  const ReferenceOptions &opt, ReferenceStats *stats = nullptr);

/// CSV with header t,y0,...,y{d-1}; 17 significant digits.
std::string dataset_to_csv(const TrajectoryDataset &data);
TrajectoryDataset dataset_from_csv(const std::string &text);
void write_dataset(const std::string &csv_path, const TrajectoryDataset &data);
/// Reads the CSV and, when present, the ".json" sidecar next to it.
TrajectoryDataset read_dataset(const std::string &csv_path);

struct StiffnessDemo {
  std::string problem;
  double span = 0.0;
  double rtol = 0.0;
  Index intervals = 0;
  long rkf_points = 0;
  long rkf_evals = 0;
  long rkf_rejected = 0;
  long radau_points = 0;  // accepted substeps of the emitted levels
  long radau_evals = 0;
  long radau_jac_evals = 0;
  double ratio = 0.0;  // rkf_evals / radau_evals
};

/// RKF45 against the Radau5 reference generator (tolerance rtol) over
/// [t0, t0 + span] split into `intervals` output intervals.
StiffnessDemo stiffness_demo(const BenchmarkProblem &problem, double rtol, double span, Index intervals);

nlohmann::json stiffness_demo_to_json(const StiffnessDemo &demo);

}  // namespace stiffnode

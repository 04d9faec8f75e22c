#pragma once

// Discretize-then-optimize training: every pair of adjacent samples is an
// independent one-step initial value problem under the chosen scheme.

#include "stiffnode/odeint.hpp"
#include "stiffnode/pinet.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace stiffnode {

class NonFiniteLoss : public std::runtime_error {
public:
  explicit NonFiniteLoss(const std::string &what) : std::runtime_error(what) {}
};

struct TrajectoryDataset {
  std::vector<double> times;  // strictly increasing, n >= 2
  Mat states;                 // d x n
  bool uniform = true;
  nlohmann::json provenance = nlohmann::json::object();

  Index size() const { return static_cast<Index>(times.size()); }
  int dim() const { return static_cast<int>(states.rows()); }
  /// Step of segment i; on uniform grids the common spacing.
  double step(Index i) const;
  void validate() const;
};

struct TrainConfig {
  Scheme method = Scheme::IFEuler;
  PiNetShape shape;
  double lr = 1e-2;
  double lr_min = 1e-4;  // end of the cosine schedule
  int epochs = 20000;
  std::uint64_t seed = 0;
  double init_scale = 1e-3;
  NewtonOptions newton;
  bool freeze_linearization = false;
  /// Divide each segment's squared error by 1 + |y_{i+1}|^2.
  bool segment_weights = true;
  /// On divergence: halve lr, restore the best parameters, continue. 0..5.
  int retries = 0;
  std::optional<KnownDynamics> known;
  /// Starting parameters; init_params(shape, seed, init_scale) when empty.
  std::optional<ParamVector> initial_params;
  /// Called once per epoch with (epoch, loss).
  std::function<void(int, double)> on_epoch;

  void validate() const;
};

/// Learning rate at an epoch under cosine decay from lr to lr_min.
double cosine_lr(const TrainConfig &config, int epoch);

struct LossEvaluation {
  double loss = 0.0;
  ParamVector gradient;  // empty when not requested
  BatchDiagnostics diag;
};

/// Per-segment weights 1 / ((n - 1) w_i), w_i = 1 + |y_{i+1}|^2 (or 1).
Eigen::VectorXd segment_weights(const TrajectoryDataset &data, bool weighted);

/// Mean weighted squared one-step prediction error over all n - 1 segments.
/// NewtonDiverged carries the failing segment index in its column field.
LossEvaluation segment_loss(const PiNet &net, const TrajectoryDataset &data, const TrainConfig &config,
                            bool with_gradient = true);

struct ErrorEntry {
  std::size_t equation = 0;
  Exponents exponents;
  double truth = 0.0;
  double recovered = 0.0;
  double value = 0.0;  // relative error, or |recovered| for zero-truth terms
};

struct ErrorTable {
  std::vector<ErrorEntry> relative;  // truth != 0
  std::vector<ErrorEntry> spurious;  // truth == 0, absolute magnitude
  double max_relative() const;
  double max_spurious() const;
};

/// |c_hat - c| / |c| for nonzero truth; |c_hat| listed separately otherwise.
ErrorTable fractional_relative_error(const RecoveredModel &recovered, const RecoveredModel &truth);

struct Divergence {
  int epoch = 0;
  Index segment = -1;  // -1 when not tied to one segment
  int iterations = 0;
  double residual = 0.0;
  std::string kind;  // newton, singular-jacobian, expm-overflow, non-finite
  std::string message;
};

struct TrainReport {
  std::string method;
  PiNetShape shape;
  std::uint64_t seed = 0;
  double final_loss = 0.0;  // best loss seen
  int best_epoch = -1;
  int epochs_run = 0;
  std::vector<double> loss_history;
  std::vector<int> loss_epochs;  // epoch of each history entry
  ParamVector params;  // best-loss parameters
  RecoveredModel recovered;
  std::optional<ErrorTable> errors;
  std::vector<Divergence> divergences;
  int retries_used = 0;
  bool converged = false;
  bool segment_weights = true;
  bool freeze_linearization = false;
  double lr = 0.0;
  double lr_min = 0.0;
  double wall_seconds = 0.0;
  long f_evals = 0;
  long jac_evals = 0;

  bool diverged() const { return !converged; }
};

/// Adam (no weight decay), cosine schedule, full batch. Returns the
/// best-loss parameters. Numerical failures end training unless retries remain.
TrainReport fit(const TrajectoryDataset &data, const TrainConfig &config,
                const std::optional<RecoveredModel> &truth = std::nullopt);

nlohmann::json report_to_json(const TrainReport &report);
nlohmann::json error_table_to_json(const ErrorTable &table);
/// "epoch,loss" rows.
std::string loss_history_csv(const TrainReport &report);

}  // namespace stiffnode

#include "stiffnode/train.hpp"

#include "stiffnode/matexp.hpp"

#include <chrono>
#include <cstdio>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

namespace stiffnode {

double TrajectoryDataset::step(Index i) const {
  if (uniform) return (times.back() - times.front()) / static_cast<double>(size() - 1);
  return times[static_cast<std::size_t>(i + 1)] - times[static_cast<std::size_t>(i)];
}

void TrajectoryDataset::validate() const {
  if (times.size() < 2) throw std::invalid_argument("dataset: need at least two samples");
  if (states.cols() != size()) throw ShapeMismatch("dataset: states and times differ in length");
  if (states.rows() < 1) throw ShapeMismatch("dataset: empty state dimension");
  if (!states.allFinite()) throw std::invalid_argument("dataset: non-finite state");
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (!(times[i] > times[i - 1])) throw std::invalid_argument("dataset: times are not strictly increasing");
  }
  if (uniform) {
    const double h = step(0);
    for (std::size_t i = 1; i < times.size(); ++i) {
      const double expected = times.front() + h * static_cast<double>(i);
      if (std::abs(times[i] - expected) > 1e-12 * std::max(std::abs(times.back() - times.front()), 1e-300)) {
        throw std::invalid_argument("dataset: flagged uniform but spacing varies");
      }
    }
  }
}

void TrainConfig::validate() const {
  shape.validate();
  if (!(lr > 0.0) || !(lr_min > 0.0) || lr_min > lr) throw std::invalid_argument("config: need 0 < lr_min <= lr");
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (!(init_scale >= 0.0)) throw std::invalid_argument("config: init scale must be >= 0");
  if (!(newton.tol > 0.0) || newton.max_iter < 1) throw std::invalid_argument("config: Newton tolerance must be > 0");
  if (retries < 0 || retries > 5) throw std::invalid_argument("config: retries must be in [0, 5]");
  if (shape.outputs != shape.inputs) throw std::invalid_argument("config: network output must match state dimension");
  if (initial_params && initial_params->size() != shape.param_count()) {
    throw std::invalid_argument("config: initial parameter count does not match the shape");
  }
}

double cosine_lr(const TrainConfig &config, int epoch) {
  if (config.epochs <= 1) return config.lr;
  const double progress = static_cast<double>(epoch) / static_cast<double>(config.epochs - 1);
  return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

Eigen::VectorXd segment_weights(const TrajectoryDataset &data, bool weighted) {
  const Index segments = data.size() - 1;
  Eigen::VectorXd w(segments);
  for (Index i = 0; i < segments; ++i) {
    const double wi = weighted ? 1.0 + data.states.col(i + 1).squaredNorm() : 1.0;
    w(i) = 1.0 / (static_cast<double>(segments) * wi);
  }
  return w;
}

namespace {

// Segments sharing one step size, stepped as one batch.
struct SegmentGroup {
  double h = 0.0;
  std::vector<Index> index;
};

std::vector<SegmentGroup> group_segments(const TrajectoryDataset &data) {
  const Index segments = data.size() - 1;
  if (data.uniform) {
    SegmentGroup g{data.step(0), {}};
    for (Index i = 0; i < segments; ++i) g.index.push_back(i);
    return {g};
  }
  std::map<double, std::vector<Index>> by_step;
  for (Index i = 0; i < segments; ++i) by_step[data.step(i)].push_back(i);
  std::vector<SegmentGroup> out;
  for (auto &[h, idx] : by_step) out.push_back({h, std::move(idx)});
  return out;
}

Mat gather_cols(const Mat &M, const std::vector<Index> &idx, Index offset) {
  Mat out(M.rows(), static_cast<Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Index>(k)) = M.col(idx[k] + offset);
  return out;
}

void accumulate(BatchDiagnostics &into, const BatchDiagnostics &d) {
  into.f_evals += d.f_evals;
  into.jac_evals += d.jac_evals;
  into.max_newton_iterations = std::max(into.max_newton_iterations, d.max_newton_iterations);
  into.max_residual = std::max(into.max_residual, d.max_residual);
}

}  // namespace

LossEvaluation segment_loss(const PiNet &net, const TrajectoryDataset &data, const TrainConfig &config,
                            bool with_gradient) {
  if (data.dim() != net.shape().inputs) throw ShapeMismatch("segment_loss: dataset and network dimensions differ");
  const Eigen::VectorXd weights = segment_weights(data, config.segment_weights);
  const auto groups = group_segments(data);
  LossEvaluation out;

  auto rethrow_segment = [](const NewtonDiverged &e, const SegmentGroup &g) {
    const Index seg = g.index[static_cast<std::size_t>(e.column)];
    throw NewtonDiverged("segment " + std::to_string(seg) + ": " + e.what(), seg, e.iterations, e.residual);
  };

  if (!with_gradient) {
    const VectorField f = make_field(net);
    double loss = 0.0;
    for (const auto &g : groups) {
      const Mat Yn = gather_cols(data.states, g.index, 0);
      Mat pred;
      try {
        pred = step_batch(config.method, f, Yn, g.h, config.newton, &out.diag);
      } catch (const NewtonDiverged &e) {
        rethrow_segment(e, g);
      }
      const Mat r = pred - gather_cols(data.states, g.index, 1);
      const Eigen::RowVectorXd sq = r.colwise().squaredNorm();
      for (std::size_t k = 0; k < g.index.size(); ++k) loss += weights(g.index[k]) * sq(static_cast<Index>(k));
    }
    if (!std::isfinite(loss)) throw NonFiniteLoss("segment_loss: loss is not finite");
    out.loss = loss;
    return out;
  }

  ad::Tape tape;
  const ad::Var theta = tape.variable(net.params());
  const TapedField field = make_taped_field(net, theta);
  RecordOptions opt;
  opt.newton = config.newton;
  opt.freeze_linearization = config.freeze_linearization;

  ad::Var total;
  for (const auto &g : groups) {
    const ad::Var Yn = tape.constant(gather_cols(data.states, g.index, 0));
    ad::Var pred;
    BatchDiagnostics diag;
    try {
      pred = record_step(config.method, field, Yn, g.h, opt, &diag);
    } catch (const NewtonDiverged &e) {
      rethrow_segment(e, g);
    }
    accumulate(out.diag, diag);
    const ad::Var r = pred - tape.constant(gather_cols(data.states, g.index, 1));
    Eigen::VectorXd gw(static_cast<Index>(g.index.size()));
    for (std::size_t k = 0; k < g.index.size(); ++k) gw(static_cast<Index>(k)) = weights(g.index[k]);
    const ad::Var part = ad::col_weighted_sum(ad::hadamard(r, r), gw);
    total = total.valid() ? total + part : part;
  }
  out.loss = total.value()(0, 0);
  if (!std::isfinite(out.loss)) throw NonFiniteLoss("segment_loss: loss is not finite");
  tape.backward(total);
  out.gradient = tape.adjoint(theta).col(0);
  if (!out.gradient.allFinite()) throw ad::NonFiniteGradient("segment_loss: gradient is not finite");
  return out;
}

double ErrorTable::max_relative() const {
  double m = 0.0;
  for (const auto &e : relative) m = std::max(m, e.value);
  return m;
}

double ErrorTable::max_spurious() const {
  double m = 0.0;
  for (const auto &e : spurious) m = std::max(m, e.value);
  return m;
}

ErrorTable fractional_relative_error(const RecoveredModel &recovered, const RecoveredModel &truth) {
  if (recovered.variables != truth.variables || recovered.equations.size() != truth.equations.size()) {
    throw ShapeMismatch("fractional_relative_error: models have different dimensions");
  }
  ErrorTable table;
  for (std::size_t eq = 0; eq < truth.equations.size(); ++eq) {
    // Union of monomials present in either model.
    std::map<Exponents, std::pair<double, double>> terms;
    for (const auto &[e, c] : truth.equations[eq]) terms[e].first = c;
    for (const auto &[e, c] : recovered.equations[eq]) terms[e].second = c;
    for (const auto &[e, tc] : terms) {
      ErrorEntry entry{eq, e, tc.first, tc.second, 0.0};
      if (tc.first != 0.0) {
        entry.value = std::abs(tc.second - tc.first) / std::abs(tc.first);
        table.relative.push_back(entry);
      } else {
        entry.value = std::abs(tc.second);
        table.spurious.push_back(entry);
      }
    }
  }
  return table;
}

namespace {

std::optional<Divergence> classify_failure(int epoch) {
  Divergence d;
  d.epoch = epoch;
  try {
    throw;
  } catch (const NewtonDiverged &e) {
    d.kind = "newton";
    d.segment = e.column;
    d.iterations = e.iterations;
    d.residual = e.residual;
    d.message = e.what();
  } catch (const SingularJacobian &e) {
    d.kind = "singular-jacobian";
    d.message = e.what();
  } catch (const ExpmOverflow &e) {
    d.kind = "expm-overflow";
    d.message = e.what();
  } catch (const NonFiniteLoss &e) {
    d.kind = "non-finite";
    d.message = e.what();
  } catch (const ad::NonFiniteGradient &e) {
    d.kind = "non-finite";
    d.message = e.what();
  } catch (const NonFiniteValue &e) {
    d.kind = "non-finite";
    d.message = e.what();
  } catch (const SingularMatrix &e) {
    d.kind = "singular-jacobian";
    d.message = e.what();
  } catch (const std::domain_error &e) {
    d.kind = "non-finite";
    d.message = e.what();
  } catch (...) {
    return std::nullopt;
  }
  return d;
}

}  // namespace

TrainReport fit(const TrajectoryDataset &data, const TrainConfig &config, const std::optional<RecoveredModel> &truth) {
  data.validate();
  config.validate();
  if (data.dim() != config.shape.inputs) throw ShapeMismatch("fit: dataset and network dimensions differ");

  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.method = std::string(scheme_name(config.method));
  report.shape = config.shape;
  report.seed = config.seed;
  report.segment_weights = config.segment_weights;
  report.freeze_linearization = config.freeze_linearization;
  report.lr = config.lr;
  report.lr_min = config.lr_min;

  ParamVector params = config.initial_params ? *config.initial_params
                                             : init_params(config.shape, config.seed, config.init_scale);
  ParamVector best = params;
  double best_loss = std::numeric_limits<double>::infinity();

  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ParamVector m = ParamVector::Zero(params.size()), v = ParamVector::Zero(params.size());
  int t = 0;
  double lr_scale = 1.0;
  PiNet net(config.shape, params, config.known);

  int epoch = 0;
  for (; epoch < config.epochs; ++epoch) {
    LossEvaluation ev;
    try {
      net.set_params(params);
      ev = segment_loss(net, data, config, true);
    } catch (...) {
      auto d = classify_failure(epoch);
      if (!d) throw;
      report.divergences.push_back(*d);
      if (report.retries_used >= config.retries) break;
      ++report.retries_used;
      lr_scale *= 0.5;
      params = best;
      m.setZero();
      v.setZero();
      t = 0;
      continue;
    }
    report.f_evals += ev.diag.f_evals;
    report.jac_evals += ev.diag.jac_evals;
    report.loss_history.push_back(ev.loss);
    report.loss_epochs.push_back(epoch);
    if (config.on_epoch) config.on_epoch(epoch, ev.loss);
    if (ev.loss < best_loss) {
      best_loss = ev.loss;
      best = params;
      report.best_epoch = epoch;
    }

    ++t;
    const double lr = lr_scale * cosine_lr(config, epoch);
    m = beta1 * m + (1.0 - beta1) * ev.gradient;
    v = beta2 * v + (1.0 - beta2) * ev.gradient.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
    params -= (lr / c1) * (m.array() / ((v.array() / c2).sqrt() + eps)).matrix();
  }

  report.epochs_run = epoch;
  report.converged = epoch == config.epochs && report.best_epoch >= 0;
  report.final_loss = best_loss;
  report.params = best;
  report.recovered = extract_polynomial(PiNet(config.shape, best));
  std::ostringstream prov;
  prov << report.method << " n=" << data.size() << " seed=" << config.seed;
  if (data.provenance.contains("problem")) prov << " problem=" << data.provenance["problem"].get<std::string>();
  report.recovered.provenance = prov.str();
  if (truth) report.errors = fractional_relative_error(report.recovered, *truth);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

nlohmann::json error_table_to_json(const ErrorTable &table) {
  auto rows = [](const std::vector<ErrorEntry> &entries) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto &e : entries) {
      arr.push_back({{"equation", e.equation},
                     {"monomial", exponent_key(e.exponents)},
                     {"truth", e.truth},
                     {"recovered", e.recovered},
                     {"value", e.value}});
    }
    return arr;
  };
  return {{"relative", rows(table.relative)},
          {"spurious_absolute", rows(table.spurious)},
          {"max_relative", table.max_relative()},
          {"max_spurious", table.max_spurious()}};
}

nlohmann::json report_to_json(const TrainReport &report) {
  nlohmann::json j;
  j["method"] = report.method;
  j["shape"] = {{"m", report.shape.inputs}, {"D", report.shape.degree}, {"w", report.shape.width},
                {"m_out", report.shape.outputs}};
  j["seed"] = report.seed;
  j["converged"] = report.converged;
  j["final_loss"] = report.final_loss;
  j["best_epoch"] = report.best_epoch;
  j["epochs_run"] = report.epochs_run;
  j["lr"] = report.lr;
  j["lr_min"] = report.lr_min;
  j["segment_weights"] = report.segment_weights ? "1+|y_next|^2" : "none";
  j["freeze_linearization"] = report.freeze_linearization;
  j["retries_used"] = report.retries_used;
  j["wall_seconds"] = report.wall_seconds;
  j["f_evals"] = report.f_evals;
  j["jac_evals"] = report.jac_evals;
  nlohmann::json div = nlohmann::json::array();
  for (const auto &d : report.divergences) {
    div.push_back({{"epoch", d.epoch},
                   {"segment", d.segment},
                   {"iterations", d.iterations},
                   {"residual", d.residual},
                   {"kind", d.kind},
                   {"message", d.message}});
  }
  j["divergences"] = div;
  j["recovered"] = recovered_to_json(report.recovered);
  j["provenance"] = report.recovered.provenance;
  if (report.errors) j["errors"] = error_table_to_json(*report.errors);
  j["loss_history"] = report.loss_history;
  return j;
}

std::string loss_history_csv(const TrainReport &report) {
  std::string out = "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < report.loss_history.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%d,%.17g\n", report.loss_epochs[i], report.loss_history[i]);
    out += buf;
  }
  return out;
}

}  // namespace stiffnode

#include <stiffnode/bench.hpp>
#include <stiffnode/train.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace stiffnode;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kDiverged = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainFlags {
  std::string problem;
  std::string data;
  std::string method;
  int n = 0;
  std::optional<int> degree;
  std::optional<int> width;
  std::optional<double> lr;
  std::optional<double> lr_min;
  std::optional<int> epochs;
  std::uint64_t seed = 0;
  double newton_tol = 1e-10;
  bool freeze = false;
  bool no_weights = false;
  int retries = 0;
  std::string out = ".";
};

std::vector<std::string> method_names() {
  std::vector<std::string> names;
  for (Scheme s : all_schemes()) names.emplace_back(scheme_name(s));
  return names;
}

void write_text(const fs::path &path, const std::string &text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

void write_json(const fs::path &path, const nlohmann::json &j) { write_text(path, j.dump(2) + "\n"); }

std::string cell_prefix(const std::string &problem, const std::string &method, Index n, std::uint64_t seed) {
  return problem + "_" + method + "_n" + std::to_string(n) + "_seed" + std::to_string(seed);
}

void add_train_options(CLI::App *cmd, TrainFlags &f) {
  cmd->add_option("--degree", f.degree, "Polynomial degree D of the network")->check(CLI::PositiveNumber);
  cmd->add_option("--width", f.width, "Hidden width w (default: number of monomials)")->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.lr, "Initial Adam learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--lr-min", f.lr_min, "Final learning rate of the cosine schedule")->check(CLI::PositiveNumber);
  cmd->add_option("--epochs", f.epochs, "Full-batch epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.seed, "Initialization seed")->capture_default_str();
  cmd->add_option("--newton-tol", f.newton_tol, "Newton residual tolerance")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_flag("--freeze-linearization", f.freeze, "IF Euler: treat the linearization as a constant");
  cmd->add_flag("--no-segment-weights", f.no_weights, "Unweighted squared error per segment");
  cmd->add_option("--retries", f.retries, "Halve lr and restore the best parameters on divergence")
      ->check(CLI::Range(0, 5))
      ->capture_default_str();
  cmd->add_option("--out", f.out, "Output directory")->capture_default_str();
}

TrainConfig build_config(const TrainFlags &f, const BenchmarkProblem *problem, int dim) {
  TrainConfig c;
  c.method = *parse_scheme(f.method);
  const int degree = f.degree.value_or(problem ? problem->degree : 1);
  c.shape = PiNetShape::with_default_width(dim, degree);
  if (f.width) c.shape.width = *f.width;
  if (problem) {
    c.lr = problem->training.lr;
    c.lr_min = problem->training.lr_min;
    c.epochs = problem->training.epochs;
  }
  if (f.lr) c.lr = *f.lr;
  if (f.lr_min) c.lr_min = *f.lr_min;
  if (f.lr && !f.lr_min) c.lr_min = std::min(c.lr_min, *f.lr);
  if (f.epochs) c.epochs = *f.epochs;
  c.seed = f.seed;
  c.newton.tol = f.newton_tol;
  c.freeze_linearization = f.freeze;
  c.segment_weights = !f.no_weights;
  c.retries = f.retries;
  try {
    c.validate();
  } catch (const std::invalid_argument &e) {
    throw UsageError(e.what());
  }
  return c;
}

struct CellResult {
  TrainReport report;
  fs::path report_path;
};

// Trains one cell and writes report, model, loss history and checkpoint.
CellResult train_cell(const TrajectoryDataset &data, const TrainConfig &config, const BenchmarkProblem *problem,
                      const std::string &problem_name, const fs::path &out) {
  std::optional<RecoveredModel> truth;
  if (problem && problem->dim == data.dim()) truth = problem->truth;
  CellResult cell;
  cell.report = fit(data, config, truth);
  const auto &r = cell.report;
  const std::string prefix = cell_prefix(problem_name, r.method, data.size(), config.seed);
  auto report_json = report_to_json(r);
  report_json["problem"] = problem_name;
  report_json["n"] = data.size();
  report_json["data_provenance"] = data.provenance;
  cell.report_path = out / (prefix + ".report.json");
  write_json(cell.report_path, report_json);
  write_json(out / (prefix + ".model.json"), recovered_to_json(r.recovered));
  write_text(out / (prefix + ".loss.csv"), loss_history_csv(r));
  write_json(out / (prefix + ".ckpt.json"), checkpoint_to_json(Checkpoint{r.shape, config.seed, r.params}));
  return cell;
}

void print_outcome(const TrainReport &r, const BenchmarkProblem *problem) {
  if (!r.converged) {
    for (const auto &d : r.divergences) {
      std::printf("diverged at epoch %d (%s, segment %ld): %s\n", d.epoch, d.kind.c_str(),
                  static_cast<long>(d.segment), d.message.c_str());
    }
  }
  std::printf("best loss %.6e at epoch %d of %d\n", r.final_loss, r.best_epoch, r.epochs_run);
  std::vector<std::string> names;
  if (problem) names = problem->variables;
  for (int i = static_cast<int>(names.size()); i < r.recovered.variables; ++i) names.push_back("y" + std::to_string(i));
  for (std::size_t i = 0; i < r.recovered.equations.size(); ++i) {
    std::printf("d%s/dt = %s\n", names[i].c_str(), to_string(r.recovered.equations[i], names).c_str());
  }
  if (r.errors) {
    std::printf("max relative error %.3e, max spurious %.3e\n", r.errors->max_relative(), r.errors->max_spurious());
  }
}

int cmd_generate(const std::string &problem_name, int n, const std::string &out) {
  if (n < 2) throw UsageError("--n must be at least 2");
  const auto &problem = get_problem(problem_name);
  const auto data = generate_reference(problem, n);
  const fs::path path = fs::path(out) / (problem_name + "_n" + std::to_string(n) + ".csv");
  fs::create_directories(path.parent_path());
  write_dataset(path.string(), data);
  std::printf("wrote %ld rows on [%g, %g] to %s\n", static_cast<long>(data.size()), data.times.front(),
              data.times.back(), path.string().c_str());
  return kOk;
}

int cmd_train(const TrainFlags &f) {
  const BenchmarkProblem *problem = f.problem.empty() ? nullptr : &get_problem(f.problem);
  TrajectoryDataset data;
  std::string name = f.problem;
  if (!f.data.empty()) {
    data = read_dataset(f.data);
    if (name.empty()) name = data.provenance.value("problem", std::string("custom"));
  } else {
    if (!problem) throw UsageError("train needs --problem or --data");
    if (f.n < 2) throw UsageError("--n must be at least 2");
    data = generate_reference(*problem, f.n);
  }
  if (problem && problem->dim != data.dim()) throw UsageError("dataset dimension does not match the problem");
  const auto config = build_config(f, problem, data.dim());
  const auto cell = train_cell(data, config, problem, name, f.out);
  print_outcome(cell.report, problem);
  std::printf("report: %s\n", cell.report_path.string().c_str());
  return cell.report.converged ? kOk : kDiverged;
}

int cmd_sweep(TrainFlags f, const std::vector<std::string> &methods, std::vector<int> n_list) {
  const auto &problem = get_problem(f.problem);
  if (n_list.empty()) n_list = problem.default_n;
  for (int n : n_list) {
    if (n < 2) throw UsageError("every --n-list entry must be at least 2");
  }
  std::map<int, TrajectoryDataset> datasets;
  nlohmann::json index = nlohmann::json::array();
  const fs::path out(f.out);
  for (const auto &method : methods) {
    f.method = method;
    const auto config = build_config(f, &problem, problem.dim);
    std::ostringstream csv;
    csv << "n,equation,monomial,truth,recovered,kind,value,status\n";
    char buf[256];
    for (int n : n_list) {
      auto it = datasets.find(n);
      if (it == datasets.end()) it = datasets.emplace(n, generate_reference(problem, n)).first;
      const auto cell = train_cell(it->second, config, &problem, problem.name, out);
      const auto &r = cell.report;
      nlohmann::json entry = {{"method", method},
                              {"n", n},
                              {"seed", f.seed},
                              {"status", r.converged ? "ok" : "diverged"},
                              {"report", cell.report_path.filename().string()}};
      if (!r.converged) {
        csv << n << ",,,,,,,diverged\n";
        entry["divergence"] = r.divergences.empty() ? "" : r.divergences.back().message;
      } else {
        for (const auto *group : {&r.errors->relative, &r.errors->spurious}) {
          const char *kind = group == &r.errors->relative ? "relative" : "spurious";
          for (const auto &e : *group) {
            // exponents space-separated so the row keeps eight fields
            std::string mono = exponent_key(e.exponents);
            std::replace(mono.begin(), mono.end(), ',', ' ');
            std::snprintf(buf, sizeof buf, "%d,%zu,%s,%.17g,%.17g,%s,%.17g,ok\n", n, e.equation, mono.c_str(),
                          e.truth, e.recovered, kind, e.value);
            csv << buf;
          }
        }
        entry["max_relative"] = r.errors->max_relative();
        entry["max_spurious"] = r.errors->max_spurious();
      }
      std::printf("%s n=%d: %s\n", method.c_str(), n, r.converged ? "ok" : "diverged");
      index.push_back(entry);
    }
    write_text(out / (problem.name + "_" + method + "_seed" + std::to_string(f.seed) + ".sweep.csv"), csv.str());
  }
  const fs::path index_path = out / (problem.name + "_seed" + std::to_string(f.seed) + ".sweep_index.json");
  write_json(index_path, index);
  std::printf("index: %s\n", index_path.string().c_str());
  return kOk;
}

int cmd_extract(const std::string &checkpoint, const std::string &out) {
  std::ifstream in(checkpoint);
  if (!in) throw UsageError("cannot read " + checkpoint);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw UsageError(std::string("checkpoint: ") + e.what());
  }
  const auto ckpt = checkpoint_from_json(j);
  const auto model = extract_polynomial(PiNet(ckpt.shape, ckpt.params));
  const auto model_json = recovered_to_json(model);
  if (out.empty()) {
    std::cout << model_json.dump(2) << "\n";
  } else {
    write_json(out, model_json);
    std::printf("wrote %s\n", out.c_str());
  }
  return kOk;
}

int cmd_stiffness_demo(const std::string &problem_name, double rtol, std::optional<double> span, int intervals,
                       const std::string &out) {
  const auto &problem = get_problem(problem_name);
  const double t_span = span.value_or(problem_name == "vanderpol" ? van_der_pol_period(1000.0) : problem.t1 - problem.t0);
  const auto demo = stiffness_demo(problem, rtol, t_span, intervals);
  const fs::path path = fs::path(out) / ("stiffness_" + problem_name + ".json");
  write_json(path, stiffness_demo_to_json(demo));
  std::printf("rkf45:  %ld points, %ld evaluations\n", demo.rkf_points, demo.rkf_evals);
  std::printf("radau5: %ld points, %ld evaluations\n", demo.radau_points, demo.radau_evals);
  std::printf("ratio %.1f, written to %s\n", demo.ratio, path.string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Stiff neural ODE training with pi-networks"};
  app.require_subcommand(1);
  const auto problems = problem_names();
  const auto methods = method_names();

  std::string gen_problem, gen_out = ".";
  int gen_n = 0;
  auto *gen = app.add_subcommand("generate", "Write a reference dataset (CSV plus JSON sidecar)");
  gen->add_option("--problem", gen_problem, "Benchmark problem")->required()->check(CLI::IsMember(problems));
  gen->add_option("--n", gen_n, "Number of uniformly spaced samples")->required();
  gen->add_option("--out", gen_out, "Output directory")->capture_default_str();

  TrainFlags train_flags;
  auto *train = app.add_subcommand("train", "Fit a pi-network to one dataset");
  train->add_option("--problem", train_flags.problem, "Benchmark problem (data and ground truth)")
      ->check(CLI::IsMember(problems));
  train->add_option("--data", train_flags.data, "Dataset CSV instead of generating one");
  train->add_option("--method", train_flags.method, "Integrator")->required()->check(CLI::IsMember(methods));
  train->add_option("--n", train_flags.n, "Samples when generating data");
  add_train_options(train, train_flags);

  TrainFlags sweep_flags;
  std::vector<std::string> sweep_methods;
  std::vector<int> n_list;
  auto *sweep = app.add_subcommand("sweep", "Train every (method, n) cell and tabulate errors");
  sweep->add_option("--problem", sweep_flags.problem, "Benchmark problem")->required()->check(CLI::IsMember(problems));
  sweep->add_option("--method", sweep_methods, "Integrators, comma separated")
      ->required()
      ->delimiter(',')
      ->check(CLI::IsMember(methods));
  sweep->add_option("--n-list", n_list, "Sample counts, comma separated (default: the problem's list)")
      ->delimiter(',');
  add_train_options(sweep, sweep_flags);

  std::string ckpt_path, extract_out;
  auto *extract = app.add_subcommand("extract", "Expand a checkpoint into its polynomial");
  extract->add_option("--checkpoint", ckpt_path, "Checkpoint JSON written by train")->required();
  extract->add_option("--out", extract_out, "Model JSON path (default: stdout)");

  std::string demo_problem = "vanderpol", demo_out = ".";
  double demo_rtol = 1e-3;
  std::optional<double> demo_span;
  int demo_intervals = 1000;
  auto *demo = app.add_subcommand("stiffness-demo", "Compare RKF45 and Radau5 evaluation counts");
  demo->add_option("--problem", demo_problem, "Benchmark problem")->check(CLI::IsMember(problems))->capture_default_str();
  demo->add_option("--rtol", demo_rtol, "Tolerance for both integrators")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  demo->add_option("--span", demo_span, "Time span (default: one relaxation period for vanderpol)")
      ->check(CLI::PositiveNumber);
  demo->add_option("--intervals", demo_intervals, "Output intervals of the Radau5 reference")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  demo->add_option("--out", demo_out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_generate(gen_problem, gen_n, gen_out);
    if (*train) return cmd_train(train_flags);
    if (*sweep) return cmd_sweep(sweep_flags, sweep_methods, n_list);
    if (*extract) return cmd_extract(ckpt_path, extract_out);
    if (*demo) return cmd_stiffness_demo(demo_problem, demo_rtol, demo_span, demo_intervals, demo_out);
  } catch (const UsageError &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const DatasetParseError &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const UnknownProblem &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const RefinementFailure &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kDiverged;
  } catch (const NewtonDiverged &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kDiverged;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  return kUsage;
}

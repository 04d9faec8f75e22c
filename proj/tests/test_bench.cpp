#include "oracles.hpp"

#include <stiffnode/bench.hpp>

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace stiffnode;

namespace {

StateVector random_state(std::mt19937_64 &rng, int d, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  StateVector y(d);
  for (int i = 0; i < d; ++i) y(i) = u(rng);
  return y;
}

BenchmarkProblem decay_problem() {
  BenchmarkProblem p;
  p.name = "decay";
  p.dim = 1;
  p.field = VectorField(
      1, [](const Mat &Y) -> Mat { return -Y; },
      [](const StateVector &) -> DenseMatrix { return DenseMatrix::Constant(1, 1, -1.0); });
  p.y0 = StateVector::Constant(1, 1.0);
  return p;
}

}  // namespace

TEST_SUITE("bench") {
  TEST_CASE("registry lists the four problems and rejects others") {
    CHECK(problem_names() == std::vector<std::string>{"linear1d", "linear10d", "nonlinear3d", "vanderpol"});
    for (const auto &name : problem_names()) CHECK(get_problem(name).name == name);
    CHECK_THROWS_AS(get_problem("robertson"), UnknownProblem);
  }

  TEST_CASE("problem metadata") {
    const auto &vdp = get_problem("vanderpol");
    CHECK(vdp.t1 == 1300.0);
    CHECK(vdp.default_n == std::vector<int>{100, 391, 1555, 6213, 24849});
    CHECK(get_problem("nonlinear3d").default_n == std::vector<int>{48, 94, 369, 1467});
    const auto &l10 = get_problem("linear10d").default_n;
    CHECK(std::find(l10.begin(), l10.end(), 17) != l10.end());
    CHECK(get_problem("nonlinear3d").shape().width == 10);
    CHECK(vdp.shape().width == 10);
  }

  TEST_CASE("field, Jacobian and stored truth agree") {
    std::mt19937_64 rng(7);
    for (const auto &name : problem_names()) {
      CAPTURE(name);
      const auto &p = get_problem(name);
      const VectorField from_truth = field_from_model(p.truth);
      for (int k = 0; k < 100; ++k) {
        const StateVector y = random_state(rng, p.dim, 3.0);
        const StateVector a = p.field(y);
        const StateVector b = p.truth.evaluate(y);
        CHECK((a - b).norm() <= 1e-12 * std::max(1.0, a.norm()));
        CHECK((from_truth(y) - a).norm() <= 1e-12 * std::max(1.0, a.norm()));
        if (k % 10 == 0) {
          const auto fd = oracle::fd_jacobian([&](const Eigen::VectorXd &x) -> Eigen::VectorXd { return p.field(x); }, y);
          const DenseMatrix J = p.field.jacobian(y);
          CHECK((J - fd).norm() <= 1e-6 * std::max(1.0, J.norm()));
          CHECK((from_truth.jacobian(y) - J).norm() <= 1e-12 * std::max(1.0, J.norm()));
        }
      }
    }
  }

  TEST_CASE("stored truth round-trips through the model file format") {
    for (const auto &name : problem_names()) {
      const auto &p = get_problem(name);
      const auto j = recovered_to_json(p.truth);
      const auto back = recovered_from_json(j, p.degree);
      CHECK(recovered_to_json(back) == j);
      CHECK(back.equations == p.truth.equations);
    }
  }

  TEST_CASE("ten-dimensional linear problem spans four decades of negative eigenvalues") {
    const auto [values, vectors] = oracle::jacobi_eigen(*get_problem("linear10d").linear);
    CHECK(values.maxCoeff() < 0.0);
    CHECK(-values.maxCoeff() < 20.0);
    CHECK(-values.minCoeff() > 4e4);
    CHECK(-values.minCoeff() < 6e4);
  }

  TEST_CASE("scalar decay reference at three points") {
    const auto d = generate_reference(get_problem("linear1d"), 3);
    CHECK(d.times == std::vector<double>{0.0, 0.005, 0.01});
    CHECK(d.states(0, 0) == 1000.0);
    CHECK(d.states(0, 1) == doctest::Approx(1000.0 * std::exp(-50.0)).epsilon(1e-13));
    CHECK(d.states(0, 2) == doctest::Approx(1000.0 * std::exp(-100.0)).epsilon(1e-13));
    CHECK(d.provenance.at("generator") == "exact-expm");
  }

  TEST_CASE("ten-dimensional reference matches the eigendecomposition oracle") {
    const auto &p = get_problem("linear10d");
    for (int n : {5, 17}) {
      const auto d = generate_reference(p, n);
      for (Index k = 0; k < n; ++k) {
        const Eigen::VectorXd expected = oracle::expm_symmetric(*p.linear * d.times[static_cast<std::size_t>(k)]) * p.y0;
        for (Index i = 0; i < 10; ++i) {
          CHECK(std::abs(d.states(i, k) - expected(i)) <= 1e-10 * std::max(std::abs(expected(i)), 1e-300) + 1e-300);
        }
      }
    }
  }

  TEST_CASE("references are bit-identical on regeneration") {
    const auto &p = get_problem("nonlinear3d");
    const auto a = generate_reference(p, 48);
    const auto b = generate_reference(p, 48);
    CHECK(a.states == b.states);
    CHECK(a.times == b.times);
    CHECK(a.provenance == b.provenance);
    CHECK(a.provenance.at("generator") == "radau5-self-convergent");
    CHECK(a.provenance.at("tolerance") == 1e-10);
  }

  TEST_CASE("nonlinear reference agrees with a tight explicit solve") {
    const auto &p = get_problem("nonlinear3d");
    const auto d = generate_reference(p, 48);
    for (Index k : {Index{1}, Index{10}, Index{47}}) {
      const auto r = integrate_rkf45_adaptive(p.field, p.y0, 0.0, d.times[static_cast<std::size_t>(k)], 1e-12, 1e-12);
      const StateVector y = r.states.col(r.states.cols() - 1);
      for (Index i = 0; i < 3; ++i) CHECK(std::abs(y(i) - d.states(i, k)) < 1e-8 * std::max(1.0, std::abs(y(i))));
    }
  }

  TEST_CASE("Van der Pol reference is self-convergent across the relaxation cycle") {
    const auto &p = get_problem("vanderpol");
    ReferenceStats stats;
    const auto fine = radau_reference(p.field, p.y0, uniform_times(0.0, 1300.0, 1555), {}, &stats);
    CHECK(stats.max_depth < 24);
    const auto coarse = radau_reference(p.field, p.y0, uniform_times(0.0, 1300.0, 519), {});
    for (Index k = 0; k < 519; ++k) {
      for (Index i = 0; i < 2; ++i) {
        CHECK(std::abs(coarse.states(i, k) - fine.states(i, 3 * k)) <= 1e-8 * std::max(1.0, std::abs(fine.states(i, 3 * k))));
      }
    }
    // Slow branch near |x| = 2 followed by a fast jump to the other branch.
    const Eigen::VectorXd x = fine.states.row(0).transpose();
    CHECK(x.cwiseAbs().maxCoeff() > 1.95);
    CHECK(x.cwiseAbs().maxCoeff() < 2.05);
    int sign_changes = 0;
    for (Index k = 1; k < x.size(); ++k) sign_changes += (x(k) > 0) != (x(k - 1) > 0);
    CHECK(sign_changes >= 1);
    CHECK(van_der_pol_period(1000.0) == doctest::Approx(1614.4).epsilon(1e-4));
  }

  TEST_CASE("refinement failure names the interval") {
    ReferenceOptions opt;
    opt.max_halvings = 1;
    const auto &p = get_problem("nonlinear3d");
    try {
      radau_reference(p.field, p.y0, uniform_times(0.0, 5.0, 3), opt);
      FAIL("expected RefinementFailure");
    } catch (const RefinementFailure &e) {
      CHECK(e.interval == 0);
    }
  }

  TEST_CASE("dataset CSV round trip") {
    const auto d = generate_reference(get_problem("nonlinear3d"), 10);
    const std::string csv = dataset_to_csv(d);
    CHECK(csv.rfind("t,y0,y1,y2\n", 0) == 0);
    const auto back = dataset_from_csv(csv);
    CHECK(back.times == d.times);
    CHECK(back.states == d.states);
    CHECK(back.uniform);

    const auto dir = std::filesystem::temp_directory_path() / "stiffnode_bench_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "data.csv").string();
    write_dataset(path, d);
    const auto read = read_dataset(path);
    CHECK(read.states == d.states);
    CHECK(read.provenance == d.provenance);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("malformed datasets are rejected") {
    CHECK_THROWS_AS(dataset_from_csv(""), DatasetParseError);
    CHECK_THROWS_AS(dataset_from_csv("t,y0\n"), DatasetParseError);
    CHECK_THROWS_AS(dataset_from_csv("t,y0\n0,1\n1,abc\n"), DatasetParseError);
    CHECK_THROWS_AS(dataset_from_csv("t,y0\n0,1\n1,2,3\n"), DatasetParseError);
    CHECK_THROWS_AS(dataset_from_csv("x,y0\n0,1\n1,2\n"), DatasetParseError);
    CHECK_THROWS_AS(dataset_from_csv("t,y0\n1,1\n0,2\n"), DatasetParseError);
    CHECK_FALSE(dataset_from_csv("t,y0\n0,1\n0.1,2\n0.5,3\n").uniform);
  }

  TEST_CASE("stiffness demonstration controls") {
    const auto decay = stiffness_demo(decay_problem(), 1e-6, 10.0, 10);
    CHECK(decay.ratio < 2.0);
    const auto mild = van_der_pol(1.0, 10.0);
    const auto demo = stiffness_demo(mild, 1e-6, 10.0, 10);
    CHECK(demo.rkf_evals < 10000);
    const auto j = stiffness_demo_to_json(demo);
    CHECK(j.at("rkf45").at("f_evals") == demo.rkf_evals);
  }
}

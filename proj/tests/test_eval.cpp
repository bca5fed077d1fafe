#include <doctest.h>

#include <atomic>
#include <cmath>

#include "dmlcmr/error.hpp"
#include "dmlcmr/eval.hpp"
#include "dmlcmr/generators.hpp"
#include "dmlcmr/rng.hpp"

using namespace dmlcmr;

namespace {

double expected_g() {
  const int m = 20000;
  double acc = 0.0;
  for (int k = 0; k <= m; ++k) {
    const double w = (k == 0 || k == m) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    acc += w * pcl_g(10.0 * k / m);
  }
  return acc * (10.0 / m) / 3.0 / 10.0;
}

std::vector<std::uint64_t> seeds(int n) {
  std::vector<std::uint64_t> s;
  for (int i = 1; i <= n; ++i) s.push_back(static_cast<std::uint64_t>(i));
  return s;
}

MethodSpec toy_method(const std::string& method) {
  MethodSpec m = default_method(method, "linear_toy");
  m.name = method;
  m.fit.k_folds = 5;
  m.fit.mc_draws = 20;
  return m;
}

}  // namespace

TEST_CASE("mse against the truth") {
  const auto f0 = [](std::span<const double> x) { return std::sin(x[0]) + x[1]; };
  const TruthOracle oracle = TruthOracle::analytic(2, f0);
  Rng rng(1);
  Matrix x(100, 2);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  auto exact = [&](const Matrix& m) { return oracle.eval(m); };
  auto shifted = [&](const Matrix& m) { return Vector(oracle.eval(m).array() + 1.0); };
  CHECK(mse_vs_truth(exact, oracle, x) == 0.0);
  CHECK(mse_vs_truth(shifted, oracle, x) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(mse_vs_truth(exact, oracle, Matrix::Zero(3, 3)), ShapeError);
}

TEST_CASE("pcl do-oracle: clamp region equals 5a - 5 E[g(U)]") {
  Vector grid(2);
  grid << 0.0, 1.0;
  const auto r = pcl_do_oracle(grid, 200000, 3);
  const double eg = expected_g();
  CHECK(std::abs(r.value(0) - (-5.0 * eg)) <= 3.0 * r.std_error(0));
  // W >= 45 + 7 min g - noise stays above a + 10 ln 5 for small a, so the
  // factor is clamped at 5 on (almost) every draw.
  CHECK(r.value(1) - r.value(0) == doctest::Approx(5.0).epsilon(1e-4));
  CHECK(std::log(5.0) * 10.0 == doctest::Approx(16.094).epsilon(1e-4));
}

TEST_CASE("pcl do-oracle agrees with an independent Monte Carlo") {
  Vector grid(3);
  grid << 25.0, 32.0, 40.0;
  const auto r = pcl_do_oracle(grid, 400000, 4);
  Rng rng(77);
  const int n = 400000;
  for (Eigen::Index k = 0; k < grid.size(); ++k) {
    const double a = grid(k);
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double u = 10.0 * rng.uniform();
      const double g = 2.0 * (std::pow(u - 5.0, 4) / 600.0 + std::exp(-4.0 * (u - 5.0) * (u - 5.0)) + u / 10.0 - 2.0);
      const double w = 7.0 * g + 45.0 + rng.normal();
      const double v = a * std::min(std::exp((w - a) / 10.0), 5.0) - 5.0 * g;
      s += v;
      s2 += v * v;
    }
    const double m = s / n, se = std::sqrt((s2 / n - m * m) / n);
    CHECK(std::abs(r.value(k) - m) <= 4.0 * std::hypot(se, r.std_error(k)));
  }
}

TEST_CASE("pcl do-oracle: variance scaling and reproducibility") {
  Vector grid(1);
  grid << 30.0;
  for (std::uint64_t rep = 0; rep < 5; ++rep) {
    const auto a = pcl_do_oracle(grid, 50000, 10 + rep);
    const auto b = pcl_do_oracle(grid, 100000, 20 + rep);
    const double ratio = std::pow(b.std_error(0), 2) / std::pow(a.std_error(0), 2);
    CHECK(ratio >= 0.4);
    CHECK(ratio <= 0.6);
  }
  const Vector g50 = pcl_evaluation_grid(0);
  const auto s1 = pcl_do_oracle(g50, 1000000, 1);
  const auto s2 = pcl_do_oracle(g50, 1000000, 2);
  for (Eigen::Index k = 0; k < g50.size(); ++k) {
    CHECK(std::abs(s1.value(k) - s2.value(k)) <= 4.0 * std::hypot(s1.std_error(k), s2.std_error(k)));
  }
  CHECK(pcl_do_oracle(grid, 10000, 5).value == pcl_do_oracle(grid, 10000, 5).value);
  CHECK_THROWS_AS(pcl_do_oracle(Vector(0), 10000, 1), ArgumentError);
  CHECK_THROWS_AS(pcl_do_oracle(grid, 9999, 1), ArgumentError);
}

TEST_CASE("pcl evaluation grid spans the central 90 percent of A") {
  const Vector grid = pcl_evaluation_grid(0);
  REQUIRE(grid.size() == 50);
  const Dataset d = gen_pcl_demand({100000, 0});
  std::vector<double> a(d.x.col(0).data(), d.x.col(0).data() + d.x.rows());
  CHECK(grid(0) == percentile(a, 0.05));
  CHECK(grid(49) == percentile(a, 0.95));
  for (Eigen::Index k = 1; k < 50; ++k) CHECK(grid(k) > grid(k - 1));
}

TEST_CASE("percentile") {
  CHECK(percentile({3.0, 1.0, 2.0}, 0.5) == 2.0);
  CHECK(percentile({1.0, 2.0, 3.0, 4.0}, 0.25) == doctest::Approx(1.75));
  CHECK(percentile({5.0}, 0.9) == 5.0);
  CHECK_THROWS_AS(percentile({}, 0.5), ArgumentError);
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(static_cast<std::size_t>(rng.uniform_int(1, 40)));
    for (auto& x : v) x = rng.normal();
    CHECK(percentile(v, 0.25) <= percentile(v, 0.5));
    CHECK(percentile(v, 0.5) <= percentile(v, 0.75));
  }
}

TEST_CASE("benchmark: three seeds, ordering, outputs") {
  BenchmarkConfig cfg;
  cfg.methods = {toy_method("dml-cmr"), toy_method("naive-two-stage")};
  cfg.problem.generator = "linear_toy";
  cfg.problem.n_test = 2000;
  cfg.n_grid = {500, 1000};
  cfg.seeds = {1, 2, 3};
  cfg.seed = 9;
  const auto reports = benchmark(cfg, "abc");
  REQUIRE(reports.size() == 4);
  for (const auto& r : reports) {
    CHECK(r.mse.size() == 3);
    CHECK(r.failures.empty());
    CHECK(r.q25 <= r.median);
    CHECK(r.median <= r.q75);
    CHECK(r.q25_standardised <= r.median_standardised);
    CHECK(r.median_standardised <= r.q75_standardised);
    for (double m : r.mse) CHECK(m >= 0.0);
    CHECK(r.audit_passed);
    CHECK_FALSE(r.runtime_s.has_value());
    const Json j = r.to_json();
    for (const char* key : {"method", "generator", "params", "n", "seeds", "mse", "median", "q25", "q75", "runtime_s",
                            "config_hash"}) {
      CHECK(j.contains(key));
    }
    CHECK(j.at("config_hash") == "abc");
    CHECK(j.at("runtime_s").is_null());
  }
  const std::string csv = benchmark_csv(reports);
  CHECK(csv.rfind("method,n,seed,mse\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
  const std::string svg = benchmark_svg(reports, "toy");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("benchmark determinism: duplicate seeds, repeated runs, thread count") {
  BenchmarkConfig cfg;
  cfg.methods = {toy_method("dml-cmr")};
  cfg.problem.generator = "linear_toy";
  cfg.problem.n_test = 1000;
  cfg.n_grid = {400};
  cfg.seeds = {4, 4, 5};
  const auto a = benchmark(cfg, "h");
  CHECK(a[0].mse[0] == a[0].mse[1]);
  CHECK(a[0].mse[0] != a[0].mse[2]);
  cfg.jobs = 3;
  const auto b = benchmark(cfg, "h");
  CHECK(benchmark_json(a).dump() == benchmark_json(b).dump());
  CHECK(benchmark_csv(a) == benchmark_csv(b));
}

TEST_CASE("benchmark records failing cells without aborting") {
  BenchmarkConfig cfg;
  MethodSpec bad = toy_method("dml-cmr");
  bad.fit.k_folds = 50;
  cfg.methods = {bad, toy_method("ce-dml-cmr")};
  cfg.problem.generator = "linear_toy";
  cfg.problem.n_test = 500;
  cfg.n_grid = {30};
  cfg.seeds = {1, 2};
  const auto r = benchmark(cfg, "x");
  REQUIRE(r.size() == 2);
  CHECK(r[0].failures.size() == 2);
  CHECK(r[0].mse.empty());
  CHECK(r[1].failures.empty());
  CHECK(r[1].mse.size() == 2);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<std::atomic<int>> hits(101);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (auto& h : hits) CHECK(h.load() == 1);
}

TEST_CASE("evaluation is invariant to standardisation for affine-equivariant estimators") {
  const Dataset raw = gen_linear_toy({3000, 31, 2.0, 1.0});
  Dataset shifted = raw;
  // Move the toy away from zero mean and unit scale so standardisation matters.
  shifted.y = 50.0 + 7.0 * raw.y.array();
  shifted.x = -3.0 + 0.2 * raw.x.array();
  const auto f_true = [](double a) { return 50.0 + 7.0 * 2.0 * (a + 3.0) / 0.2; };

  NuisanceSpecs specs;
  specs.s.kind = "ridge";
  specs.density.kind = "gaussian-location";
  specs.density.location.kind = "ridge";
  FitConfig cfg;
  cfg.solver = "closed-form";
  cfg.lambda = 0.0;
  cfg.k_folds = 5;
  cfg.mc_draws = 10;
  cfg.seed = 3;
  const StructuralModel init = StructuralModel::linear(BasisMap::polynomial(1, 1));

  const FittedCMR fit_raw = fit_dml_cmr(shifted, crossfit_nuisances(shifted, cfg, specs), cfg, init);
  const Standardiser stdz = fit_standardiser(shifted, {"Y", "A"});
  const Dataset s = stdz.apply(shifted);
  const FittedCMR fit_std = fit_dml_cmr(s, crossfit_nuisances(s, cfg, specs), cfg, init);

  Matrix grid = Matrix(Vector::LinSpaced(200, -4.0, -2.0));
  const TruthOracle oracle = TruthOracle::analytic(1, [&](std::span<const double> x) { return f_true(x[0]); });
  const double mse_raw = mse_vs_truth([&](const Matrix& x) { return predict_structural(fit_raw, x); }, oracle, grid);
  const double mse_std = mse_vs_truth(
      [&](const Matrix& x) {
        Matrix xs = x;
        for (Eigen::Index i = 0; i < xs.rows(); ++i) xs(i, 0) = stdz.apply_value("A", x(i, 0));
        Vector p = predict_structural(fit_std, xs);
        for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = stdz.invert_value("Y", p(i));
        return p;
      },
      oracle, grid);
  CHECK(mse_raw > 0.0);
  CHECK(std::abs(mse_raw - mse_std) <= 1e-8 * std::max(1.0, mse_raw));
}

TEST_CASE("run_method on the toy and on demand") {
  ProblemSpec toy;
  toy.generator = "linear_toy";
  toy.n_test = 2000;
  const RunResult r = run_method(toy, toy_method("dml-cmr"), 2000, 5);
  CHECK(r.ok);
  CHECK(r.audit_passed);
  CHECK(r.nuisance_fits == 5);
  // f = theta a, so mse = (theta - 2)^2 E[A^2] and is small at n = 2000.
  CHECK(r.mse < 0.05);
  CHECK(run_method(toy, toy_method("dml-cmr"), 2000, 5).mse == r.mse);

  ProblemSpec demand;
  demand.generator = "demand_iv";
  demand.n_test = 1000;
  MethodSpec m = default_method("ce-dml-cmr", "demand_iv");
  m.nuisances.s.n_trees = 50;
  m.nuisances.density.location.n_trees = 50;
  m.fit.mc_draws = 5;
  m.structural = {{"arch", "boosted-trees"}, {"n_trees", 50}};
  const RunResult d = run_method(demand, m, 1000, 6);
  CHECK(d.ok);
  CHECK(d.nuisance_fits == 1);
  CHECK(d.mse > 0.0);
  CHECK(d.mse_standardised > 0.0);
  CHECK(d.mse_standardised < d.mse);
}

TEST_CASE("log-log fit") {
  double slope = 0.0, icpt = 0.0;
  fit_log_log({100, 200, 400, 800}, {1.0, 1.0 / std::sqrt(2.0), 0.5, 0.5 / std::sqrt(2.0)}, slope, icpt);
  CHECK(slope == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(icpt == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK_THROWS_AS(fit_log_log({100, 200}, {1.0, 0.5}, slope, icpt), ArgumentError);
  CHECK_THROWS_AS(fit_log_log({100, 100, 400}, {1.0, 0.5, 0.2}, slope, icpt), ArgumentError);
}

TEST_CASE("rate study with exact nuisances recovers theta0 to rounding") {
  RateStudyConfig cfg;
  cfg.analytic_nuisances = true;
  cfg.seeds = seeds(20);
  cfg.fit.solver = "closed-form";
  cfg.fit.lambda = 0.0;
  cfg.fit.mc_draws = 10;
  cfg.bootstrap = 20;
  const auto exact = rate_study(cfg);
  for (double e : exact.error) CHECK(e <= 1e-12);
  CHECK(exact.audit_passed);

  cfg.analytic_nuisances = false;
  cfg.n_grid = {250, 500, 1000};
  cfg.seeds = seeds(5);
  const auto fitted = rate_study(cfg);
  CHECK(exact.intercept < fitted.intercept);
  for (double e : fitted.error) {
    CHECK(e > 0.0);
    CHECK(std::isfinite(e));
  }
  CHECK(std::isfinite(fitted.slope));
  CHECK(fitted.slope_ci_low <= fitted.slope_ci_high);
  cfg.n_grid = {500, 1000};
  CHECK_THROWS_AS(rate_study(cfg), ArgumentError);
}

TEST_CASE("nuisance rate flags") {
  NuisanceRateConfig cfg;
  cfg.seeds = seeds(20);
  cfg.estimator.kind = "ridge";
  cfg.bootstrap = 50;
  const auto ridge = nuisance_rate_study(cfg);
  CHECK(ridge.flag == "PASS");
  CHECK(ridge.slope == doctest::Approx(-0.5).epsilon(0.3));
  cfg.estimator.kind = "constant";
  const auto constant = nuisance_rate_study(cfg);
  CHECK(constant.flag == "FAIL");
  CHECK(std::abs(constant.slope) < 0.1);
}

TEST_CASE("analytic outcome regressions") {
  const auto toy = analytic_s0("linear_toy", Json::object());
  CHECK(toy(std::vector<double>{1.5}) == 3.0);
  // Demand: E[r | z, t, s] = f0 at the mean price plus rho * E[omega | z, t, s] = 0.
  const auto dem = analytic_s0("demand_iv", {{"rho", 0.9}, {"iv_strength", 1.0}});
  const double z = 0.3, t = 4.0, s = 2.0;
  const double p_mean = 25.0 + (z + 3.0) * demand_psi(t);
  CHECK(dem(std::vector<double>{z, t, s}) == doctest::Approx(demand_f0(t, s, p_mean)).epsilon(1e-12));
}

TEST_CASE("bias injection matches the population limits") {
  BiasInjectionConfig cfg;
  cfg.seeds = seeds(5);
  cfg.fit.solver = "closed-form";
  cfg.fit.lambda = 0.0;
  cfg.fit.mc_draws = 10;
  cfg.fit.k_folds = 5;
  const auto r = bias_injection_study(cfg);
  REQUIRE(r.error_dml.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    const double b = cfg.b_grid[k];
    CHECK(r.error_dml[k] == doctest::Approx(b * b / (1.0 + b * b)).epsilon(0.05));
    CHECK(r.error_naive[k] == doctest::Approx(2.0 * b * b / (1.0 + b * b)).epsilon(0.05));
  }
  CHECK(r.audit_passed);
  CHECK(std::isfinite(r.slope_dml));
}

TEST_CASE("ill-posedness on the toy is sqrt(3)") {
  const auto r = ill_posedness_estimate({"linear_toy", 1.0, Json::object()}, 200, 100000, 1);
  CHECK(r.nu == doctest::Approx(std::sqrt(3.0)).epsilon(0.05));
  CHECK(r.excluded == 0);
  Vector t0(1);
  t0 << 2.0;
  const auto with_truth = ill_posedness_estimate({"linear_toy", 1.0, Json::object()}, 100, 20000, 2, {t0});
  CHECK(with_truth.excluded >= 1);
  CHECK_FALSE(with_truth.warnings.empty());
  CHECK_THROWS_AS(ill_posedness_estimate({"linear_toy", 1.0, Json::object()}, 99, 20000, 2), ArgumentError);
}

TEST_CASE("ill-posedness grows as the instrument weakens") {
  double prev = 0.0;
  for (double kappa : {2.0, 1.0, 0.5, 0.25}) {
    const auto r = ill_posedness_estimate({"linear_toy", kappa, Json::object()}, 100, 50000, 3);
    // nu = sqrt(E[A^2] / E[E[A | Z]^2]) = sqrt((kappa^2 + 2) / kappa^2).
    CHECK(r.nu == doctest::Approx(std::sqrt((kappa * kappa + 2.0) / (kappa * kappa))).epsilon(0.05));
    CHECK(r.nu > prev);
    prev = r.nu;
  }
  const auto strong = ill_posedness_estimate({"demand_iv", 1.0, Json::object()}, 100, 5000, 4);
  const auto weak = ill_posedness_estimate({"demand_iv", 0.2, Json::object()}, 100, 5000, 4);
  CHECK(weak.nu > strong.nu);
}

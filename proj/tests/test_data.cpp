#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "dmlcmr/dataset.hpp"
#include "dmlcmr/error.hpp"
#include "dmlcmr/generators.hpp"
#include "dmlcmr/io.hpp"
#include "dmlcmr/rng.hpp"

using namespace dmlcmr;

namespace {

// Test-side copies of the generating formulas.
double psi_ref(double t) {
  return 2.0 * (std::pow(t - 5.0, 4) / 600.0 + std::exp(-4.0 * (t - 5.0) * (t - 5.0)) + t / 10.0 - 2.0);
}
double f0_ref(double t, double s, double p) { return 100.0 + (10.0 + p) * s * psi_ref(t) - 2.0 * p; }

double mean(const Vector& v) { return v.mean(); }
double corr(const Vector& a, const Vector& b) {
  const Vector da = a.array() - a.mean();
  const Vector db = b.array() - b.mean();
  return da.dot(db) / std::sqrt(da.squaredNorm() * db.squaredNorm());
}

std::string temp_csv(const std::string& name, const std::string& body) {
  const auto path = std::filesystem::temp_directory_path() / ("dmlcmr_" + name + ".csv");
  std::ofstream(path) << body;
  return path.string();
}

bool same(const Dataset& a, const Dataset& b) {
  return a.y == b.y && a.x == b.x && a.c == b.c && a.x_names == b.x_names && a.c_names == b.c_names;
}

}  // namespace

TEST_CASE("demand psi and f0 at t = 5") {
  CHECK(demand_psi(5.0) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(demand_f0(5.0, 1.0, 25.0) == doctest::Approx(15.0).epsilon(1e-14));
  for (double t : {0.0, 1.3, 7.7, 10.0}) {
    CHECK(demand_psi(t) == doctest::Approx(psi_ref(t)).epsilon(1e-13));
    CHECK(demand_f0(t, 3.0, 20.0) == doctest::Approx(f0_ref(t, 3.0, 20.0)).epsilon(1e-13));
  }
}

TEST_CASE("demand generator moments at n = 200000") {
  DemandIVParams p;
  p.n = 200000;
  p.seed = 11;
  const Dataset d = gen_demand_iv(p);
  REQUIRE(d.size() == p.n);
  REQUIRE(d.x_names == std::vector<std::string>{"p", "t", "s"});
  REQUIRE(d.c_names == std::vector<std::string>{"z", "t", "s"});
  const auto n = static_cast<Eigen::Index>(p.n);
  Vector eps(n), omega(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double price = d.x(i, 0), t = d.x(i, 1), s = d.x(i, 2), z = d.c(i, 0);
    omega(i) = price - 25.0 - (z + 3.0) * psi_ref(t);
    eps(i) = d.y(i) - f0_ref(t, s, price);
    CHECK_FALSE(s < 1.0);
  }
  CHECK(std::abs(mean(d.c.col(0))) <= 0.01);
  CHECK(corr(eps, omega) == doctest::Approx(0.9).epsilon(0.01 / 0.9));
  const double se = std::sqrt((eps.array() - eps.mean()).square().mean() / static_cast<double>(n));
  CHECK(std::abs(eps.mean()) <= 3.0 * se);
  CHECK(d.x.col(1).minCoeff() >= 0.0);
  CHECK(d.x.col(1).maxCoeff() < 10.0);
  std::set<double> levels(d.x.col(2).data(), d.x.col(2).data() + n);
  CHECK(levels == std::set<double>{1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("demand generator with iv_strength 0 ignores the instrument") {
  DemandIVParams p;
  p.n = 50000;
  p.seed = 3;
  p.iv_strength = 0.0;
  const Dataset d = gen_demand_iv(p);
  const auto n = static_cast<Eigen::Index>(p.n);
  Vector omega(n);
  for (Eigen::Index i = 0; i < n; ++i) omega(i) = d.x(i, 0) - 25.0 - 3.0 * psi_ref(d.x(i, 1));
  CHECK(std::abs(omega.mean()) < 0.03);
  CHECK(std::sqrt((omega.array() - omega.mean()).square().mean()) == doctest::Approx(1.0).epsilon(0.02));
  CHECK(std::abs(corr(omega, d.c.col(0))) < 0.02);
}

TEST_CASE("demand generator out-of-distribution time and argument checks") {
  DemandIVParams p;
  p.n = 20000;
  p.ood_time = true;
  const Dataset d = gen_demand_iv(p);
  CHECK(d.x.col(1).minCoeff() >= 1.0);
  CHECK(d.x.col(1).maxCoeff() < 11.0);
  CHECK(d.x.col(1).maxCoeff() > 10.0);
  p.n = 0;
  CHECK_THROWS_AS(gen_demand_iv(p), ArgumentError);
  p.n = 10;
  p.rho = 1.5;
  CHECK_THROWS_AS(gen_demand_iv(p), ArgumentError);
  p.rho = -0.1;
  CHECK_THROWS_AS(gen_demand_iv(p), ArgumentError);
}

TEST_CASE("pcl g and the proxy equations at U = 5") {
  CHECK(pcl_g(5.0) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(7.0 * pcl_g(5.0) + 45.0 == doctest::Approx(38.0).epsilon(1e-14));
  CHECK(35.0 + (0.0 + 3.0) * pcl_g(5.0) + 0.0 == doctest::Approx(32.0).epsilon(1e-14));
  CHECK(pcl_g(2.0) == doctest::Approx(psi_ref(2.0)).epsilon(1e-14));
  // exp((w - a) / 10) clamps at 5 once w - a >= 10 ln 5.
  CHECK(pcl_outcome_mean(10.0, 40.0, 5.0) == doctest::Approx(10.0 * 5.0 + 5.0).epsilon(1e-14));
  CHECK(pcl_outcome_mean(30.0, 30.0, 5.0) == doctest::Approx(30.0 + 5.0).epsilon(1e-14));
}

TEST_CASE("pcl generator: E[W] matches 7 E[g(U)] + 45 over 1e6 draws") {
  PCLDemandParams p;
  p.n = 1000000;
  p.seed = 5;
  const Dataset d = gen_pcl_demand(p);
  REQUIRE(d.x_names == std::vector<std::string>{"A", "W"});
  REQUIRE(d.c_names == std::vector<std::string>{"A", "V1", "V2"});
  CHECK(d.x.col(0) == d.c.col(0));
  const Vector w = d.x.col(1);
  const double se = std::sqrt((w.array() - w.mean()).square().mean() / static_cast<double>(w.size()));
  // E[g(U)] for U ~ Unif(0, 10) by composite Simpson on a fine grid.
  const int m = 20000;
  double acc = 0.0;
  for (int k = 0; k <= m; ++k) {
    const double u = 10.0 * k / m;
    const double wk = (k == 0 || k == m) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    acc += wk * pcl_g(u);
  }
  const double eg = acc * (10.0 / m) / 3.0 / 10.0;
  CHECK(std::abs(w.mean() - (7.0 * eg + 45.0)) <= 3.0 * se);
  CHECK_THROWS_AS(gen_pcl_demand(PCLDemandParams{0, 1}), ArgumentError);
}

TEST_CASE("semi-synthetic structural function") {
  const std::vector<double> zero3{0.0, 0.0, 0.0};
  CHECK(semi_synthetic_f0(0.0, zero3) == doctest::Approx(-std::sin(10.0)).epsilon(1e-14));
  CHECK(semi_synthetic_f0(0.0, zero3) == doctest::Approx(0.5440).epsilon(1e-4));
  CHECK(semi_synthetic_f0(1.0, zero3) == doctest::Approx(8.0440).epsilon(1e-5));
  const std::vector<double> cov{1.0, -2.0, 0.5};
  CHECK(semi_synthetic_f0(2.0, cov) ==
        doctest::Approx(36.0 - 3.0 + (1.0 - 2.0 + 0.5) / 3.0 + 2.0 - std::sin(10.0 - 1.0)).epsilon(1e-13));
}

TEST_CASE("semi-synthetic instrument frequencies over 1e6 draws") {
  SemiSyntheticParams p;
  Rng rng(2);
  p.covariates.resize(1000000, 3);
  for (Eigen::Index i = 0; i < p.covariates.size(); ++i) p.covariates.data()[i] = rng.normal();
  p.seed = 4;
  const Dataset d = gen_semi_synthetic(p);
  REQUIRE(d.x_names.size() == 4);
  std::vector<double> count(3, 0.0);
  for (Eigen::Index i = 0; i < d.c.rows(); ++i) count[static_cast<std::size_t>(d.c(i, 0)) - 1] += 1.0;
  for (double c : count) CHECK(c / 1e6 == doctest::Approx(1.0 / 3.0).epsilon(0.002 * 3.0));
  CHECK(d.x.rightCols(3) == p.covariates);

  SemiSyntheticParams bad;
  bad.covariates = Matrix::Zero(10, 2);
  CHECK_THROWS_AS(gen_semi_synthetic(bad), ArgumentError);
  bad.covariates = Matrix::Zero(10, 3);
  bad.covariates(4, 1) = std::nan("");
  CHECK_THROWS_AS(gen_semi_synthetic(bad), ArgumentError);
}

TEST_CASE("generators are deterministic given the seed") {
  DemandIVParams dp;
  dp.n = 500;
  dp.seed = 7;
  CHECK(same(gen_demand_iv(dp), gen_demand_iv(dp)));
  dp.seed = 8;
  CHECK_FALSE(gen_demand_iv(dp).y == gen_demand_iv(DemandIVParams{0.9, 1.0, 500, 7, false}).y);
  CHECK(same(gen_pcl_demand({300, 9}), gen_pcl_demand({300, 9})));
  CHECK(same(gen_linear_toy({300, 9, 2.0, 1.0}), gen_linear_toy({300, 9, 2.0, 1.0})));
  SemiSyntheticParams sp;
  sp.covariates = Matrix::Random(200, 4);
  sp.seed = 1;
  CHECK(same(gen_semi_synthetic(sp), gen_semi_synthetic(sp)));
}

TEST_CASE("linear toy moments") {
  const Dataset d = gen_linear_toy({200000, 1, 2.0, 1.0});
  const Vector a = d.x.col(0), z = d.c.col(0);
  CHECK(a.squaredNorm() / 2e5 == doctest::Approx(3.0).epsilon(0.02));
  CHECK(z.dot(a) / z.squaredNorm() == doctest::Approx(1.0).epsilon(0.01));
  // Y - 2A = U, with Cov(U, A) = 1.
  const Vector u = d.y - 2.0 * a;
  CHECK(u.dot(a) / 2e5 == doctest::Approx(1.0).epsilon(0.03));
  CHECK(std::abs(u.dot(z) / 2e5) < 0.01);
}

TEST_CASE("rng: determinism and derived seeds") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
  CHECK(derive_seed(1, 2) != derive_seed(2, 1));
  Rng r(3);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK_FALSE((u < 0.0 || u >= 1.0));
    s += u;
    s2 += u * u;
    const auto k = r.uniform_int(-2, 2);
    CHECK_FALSE((k < -2 || k > 2));
  }
  CHECK(s / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(s2 / n - (s / n) * (s / n) == doctest::Approx(1.0 / 12.0).epsilon(0.02));
}

TEST_CASE("csv ingest: three rows with roles") {
  const auto path = temp_csv("ok", "y,a,z\n1.5,2,3\n-4,5e-1,6\n7,8,9.25\n");
  const Dataset d = ingest_csv(path, {"y", {"a"}, {"z"}});
  CHECK(d.size() == 3);
  CHECK(d.y(1) == -4.0);
  CHECK(d.x(1, 0) == 0.5);
  CHECK(d.c(2, 0) == 9.25);
  CHECK(d.x_source == std::vector<int>{-1});
}

TEST_CASE("csv ingest: pass-through columns") {
  const auto path = temp_csv("pass", "Y,A,W,V\n1,2,3,4\n5,6,7,8\n");
  const Dataset d = ingest_csv(path, {"Y", {"A", "W"}, {"A", "V"}});
  CHECK(d.x_source == std::vector<int>{0, -1});
  CHECK(d.endogenous_column() == 1);
}

TEST_CASE("csv ingest: NaN literal is a parse error at its coordinates") {
  const auto path = temp_csv("nan", "y,a,z\n1,2,3\n4,NaN,6\n");
  try {
    ingest_csv(path, {"y", {"a"}, {"z"}});
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.row() == 2);
    CHECK(e.col() == 2);
  }
  const auto path2 = temp_csv("text", "y,a,z\n1,2,abc\n");
  CHECK_THROWS_AS(ingest_csv(path2, {"y", {"a"}, {"z"}}), ParseError);
  const auto path3 = temp_csv("inf", "y,a,z\n1,inf,3\n");
  CHECK_THROWS_AS(ingest_csv(path3, {"y", {"a"}, {"z"}}), ParseError);
}

TEST_CASE("csv ingest: missing role column is a schema error naming it") {
  const auto path = temp_csv("schema", "y,a\n1,2\n");
  try {
    ingest_csv(path, {"y", {"a"}, {"z"}});
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(e.column() == "z");
  }
}

TEST_CASE("csv ingest: empty inputs") {
  CHECK_THROWS_AS(ingest_csv(temp_csv("empty", ""), {"y", {"a"}, {"z"}}), EmptyInputError);
  CHECK_THROWS_AS(ingest_csv(temp_csv("header", "y,a,z\n"), {"y", {"a"}, {"z"}}), EmptyInputError);
}

TEST_CASE("csv export round trips exactly") {
  const Dataset d = gen_demand_iv({0.9, 1.0, 50, 3, false});
  const auto path = temp_csv("roundtrip", dataset_to_csv(d));
  const Dataset back = ingest_csv(path, {"r", {"p", "t", "s"}, {"z", "t", "s"}});
  CHECK(back.y == d.y);
  CHECK(back.x == d.x);
  CHECK(back.c == d.c);
  const Json meta = dataset_sidecar(d);
  CHECK(meta.at("generator") == "demand_iv");
  CHECK(meta.at("seed") == 3);
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.123456789}) {
    CHECK(std::stod(format_double(v)) == v);
  }
}

TEST_CASE("fold plan examples") {
  const FoldPlan p = make_fold_plan(10, 5, 1);
  REQUIRE(p.k() == 5);
  std::vector<std::size_t> all;
  for (const auto& f : p.folds) {
    CHECK(f.size() == 2);
    all.insert(all.end(), f.begin(), f.end());
  }
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> want(10);
  std::iota(want.begin(), want.end(), 0);
  CHECK(all == want);

  const FoldPlan q = make_fold_plan(10, 3, 1);
  std::multiset<std::size_t> sizes;
  for (const auto& f : q.folds) sizes.insert(f.size());
  CHECK(sizes == std::multiset<std::size_t>{3, 3, 4});

  CHECK(make_fold_plan(10, 3, 9).folds == make_fold_plan(10, 3, 9).folds);
  CHECK_THROWS_AS(make_fold_plan(10, 11, 1), ArgumentError);
  CHECK_THROWS_AS(make_fold_plan(10, 1, 1), ArgumentError);
}

TEST_CASE("fold plan property: disjoint cover for random (n, k, seed)") {
  Rng rng(123);
  for (int trial = 0; trial < 300; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 200));
    const int k = static_cast<int>(rng.uniform_int(2, static_cast<std::int64_t>(n)));
    const FoldPlan p = make_fold_plan(n, k, rng.next_u64());
    std::vector<int> seen(n, 0);
    std::size_t smallest = n, largest = 0;
    for (const auto& f : p.folds) {
      smallest = std::min(smallest, f.size());
      largest = std::max(largest, f.size());
      for (auto i : f) seen[i] += 1;
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
    CHECK(largest - smallest <= 1);
    const auto asg = p.assignment();
    for (int f = 0; f < k; ++f) {
      for (auto i : p.complement(f)) CHECK(asg[i] != f);
      CHECK(p.complement(f).size() == n - p.folds[static_cast<std::size_t>(f)].size());
    }
  }
}

TEST_CASE("standardiser: [1, 2, 3] with population std") {
  Vector y(3);
  y << 1, 2, 3;
  Dataset d = make_dataset(y, y, y, "y", {"a"}, {"z"});
  const Standardiser s = fit_standardiser(d, {"y"});
  CHECK(s.means()[0] == doctest::Approx(2.0));
  CHECK(s.stds()[0] == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-14));
  const Dataset t = s.apply(d);
  CHECK(std::abs(t.y.mean()) < 1e-15);
  CHECK(t.x == d.x);
}

TEST_CASE("standardiser: zero variance column names the column") {
  Vector y = Vector::Constant(5, 3.0);
  Vector a = Vector::LinSpaced(5, 0, 1);
  Dataset d = make_dataset(a, y, a, "y", {"a"}, {"z"});
  try {
    fit_standardiser(d, {"y", "a"});
    FAIL("expected an error");
  } catch (const ArgumentError& e) {
    CHECK(std::string(e.what()).find("a") != std::string::npos);
  }
}

TEST_CASE("standardiser round trip and moments on random data") {
  const Dataset d = gen_pcl_demand({2000, 17});
  const Standardiser s = fit_standardiser(d, {"A", "Y", "W"});
  const Dataset t = s.apply(d);
  CHECK(std::abs(t.y.mean()) < 1e-10);
  CHECK(std::sqrt(t.y.array().square().mean()) == doctest::Approx(1.0).epsilon(1e-10));
  // A appears in both x and c and is transformed identically.
  CHECK((t.x.col(0) - t.c.col(0)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(std::abs(t.c.col(0).mean()) < 1e-10);
  const Dataset back = s.invert(t);
  CHECK((back.y - d.y).cwiseAbs().maxCoeff() <= 1e-12 * d.y.cwiseAbs().maxCoeff());
  CHECK((back.x - d.x).cwiseAbs().maxCoeff() <= 1e-12 * d.x.cwiseAbs().maxCoeff());
  CHECK((back.c - d.c).cwiseAbs().maxCoeff() <= 1e-12 * d.c.cwiseAbs().maxCoeff());
  const Standardiser again = Standardiser::from_json(s.to_json());
  CHECK(again.means() == s.means());
  CHECK(again.stds() == s.stds());
}

TEST_CASE("dataset validation and row selection") {
  const Dataset d = gen_linear_toy({20, 1, 2.0, 1.0});
  CHECK_NOTHROW(d.validate());
  const std::vector<std::size_t> idx{3, 1};
  const Dataset r = d.rows(idx);
  CHECK(r.size() == 2);
  CHECK(r.y(0) == d.y(3));
  Dataset bad = d;
  bad.y.resize(19);
  CHECK_THROWS(bad.validate());
}

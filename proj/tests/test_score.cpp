#include <doctest.h>

#include <cmath>

#include "dmlcmr/error.hpp"
#include "dmlcmr/generators.hpp"
#include "dmlcmr/rng.hpp"
#include "dmlcmr/score.hpp"

using namespace dmlcmr;

namespace {

// Toy nuisances at the truth: s0(z) = 2z, A | z ~ N(z, 2).
NuisancePair toy_truth(double theta0 = 2.0) {
  NuisancePair n;
  n.s = make_analytic_regressor(1, [theta0](std::span<const double> c) { return theta0 * c[0]; });
  n.density = make_analytic_gaussian(1, [](std::span<const double> c) { return c[0]; }, std::sqrt(2.0));
  return n;
}

StructuralModel slope_model(double theta) {
  Vector t(1);
  t << theta;
  return StructuralModel::linear(BasisMap::identity(1), t);
}

// E[h(Z)] for Z ~ N(0, 1) by Simpson on [-12, 12].
double gauss_expect(const std::function<double(double)>& h) {
  const int m = 4000;
  double acc = 0.0;
  for (int k = 0; k <= m; ++k) {
    const double z = -12.0 + 24.0 * k / m;
    const double w = (k == 0 || k == m) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    acc += w * h(z) * std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  }
  return acc * (24.0 / m) / 3.0;
}

}  // namespace

TEST_CASE("score values on scalars") {
  CHECK(score_value(ScoreKind::kOrthogonal, 100.0, 3.0, 1.0) == 4.0);
  CHECK(score_value(ScoreKind::kOrthogonal, -5.0, 1.25, 1.25) == 0.0);
  CHECK(score_value(ScoreKind::kNaive, 2.5, 99.0, 2.5) == 0.0);
  CHECK(score_value(ScoreKind::kNaive, 2.0, 0.0, -1.0) == 9.0);
}

TEST_CASE("score kinds parse and print") {
  CHECK(parse_score_kind("orthogonal") == ScoreKind::kOrthogonal);
  CHECK(parse_score_kind("naive") == ScoreKind::kNaive);
  CHECK(to_string(ScoreKind::kNaive) == "naive");
  CHECK_THROWS_AS(parse_score_kind("robust"), ArgumentError);
}

TEST_CASE("nonnegativity and scale equivariance on random inputs") {
  Rng rng(1);
  for (int t = 0; t < 2000; ++t) {
    const double y = rng.normal(0, 10), s = rng.normal(0, 10), g = rng.normal(0, 10), a = rng.normal(0, 3);
    CHECK(score_value(ScoreKind::kOrthogonal, y, s, g) >= 0.0);
    CHECK(score_value(ScoreKind::kNaive, y, s, g) >= 0.0);
    const double base = score_value(ScoreKind::kOrthogonal, y, s, g);
    CHECK(score_value(ScoreKind::kOrthogonal, y, a * s, a * g) == doctest::Approx(a * a * base).epsilon(1e-12));
  }
}

TEST_CASE("g_hat and the score with nuisance models") {
  const NuisancePair truth = toy_truth();
  const Dataset toy = gen_linear_toy({10, 1, 2.0, 1.0});
  const CmrLayout layout = CmrLayout::of(toy);
  const std::vector<double> c{0.7};
  const McConfig mc{100, 3};
  // Antithetic draws make the linear expectation exact.
  CHECK(g_hat(slope_model(2.0), layout, c, *truth.density, mc) == doctest::Approx(1.4).epsilon(1e-12));
  CHECK(score_value(ScoreKind::kOrthogonal, 9.0, c, slope_model(2.0), truth, layout, mc) < 1e-24);
  CHECK(score_value(ScoreKind::kOrthogonal, 9.0, c, slope_model(1.0), truth, layout, mc) ==
        doctest::Approx(0.49).epsilon(1e-10));
  CHECK(score_value(ScoreKind::kNaive, 1.4, c, slope_model(2.0), truth, layout, mc) < 1e-24);
  const StructuralModel seven = StructuralModel::constant(1, 7.0);
  CHECK(g_hat(seven, layout, c, *truth.density, mc) == doctest::Approx(7.0).epsilon(1e-14));
  // Quadratic f: E[A^2 | z] = z^2 + 2.
  const StructuralModel sq = StructuralModel::linear(BasisMap::polynomial(1, 2, false), Vector::Unit(2, 1));
  const double q = g_hat(sq, layout, c, *truth.density, McConfig{20000, 4});
  CHECK(q == doctest::Approx(0.49 + 2.0).epsilon(0.03));
}

TEST_CASE("nuisance validation") {
  NuisancePair n = toy_truth();
  CHECK_NOTHROW(n.validate(ScoreKind::kOrthogonal));
  n.s = nullptr;
  CHECK_THROWS_AS(n.validate(ScoreKind::kOrthogonal), ArgumentError);
  CHECK_NOTHROW(n.validate(ScoreKind::kNaive));
  n.s = make_constant_regressor(2, 0.0);
  CHECK_THROWS_AS(n.validate(ScoreKind::kOrthogonal), ArgumentError);
  n.density = nullptr;
  CHECK_THROWS_AS(n.validate(ScoreKind::kNaive), ArgumentError);
}

TEST_CASE("pointwise loss batch") {
  const Dataset toy = gen_linear_toy({50, 2, 2.0, 1.0});
  const CmrLayout layout = CmrLayout::of(toy);
  const NuisancePair truth = toy_truth();
  const McConfig mc{64, 5};
  const StructuralModel f = slope_model(1.3);

  const LossBatch one = pointwise_loss_batch(ScoreKind::kNaive, toy.y.head(1), toy.c.topRows(1), f, truth, layout, mc);
  REQUIRE(one.losses.size() == 1);
  const std::vector<double> c0{toy.c(0, 0)};
  const McConfig row0{mc.draws, derive_seed(mc.seed, 0)};
  CHECK(one.mean == score_value(ScoreKind::kNaive, toy.y(0), c0, f, truth, layout, row0));

  const LossBatch full = pointwise_loss_batch(ScoreKind::kOrthogonal, toy.y, toy.c, f, truth, layout, mc);
  CHECK(full.mean == doctest::Approx(full.losses.mean()).epsilon(1e-15));
  Vector y2(100);
  y2 << toy.y, toy.y;
  Matrix c2(100, 1);
  c2 << toy.c, toy.c;
  const LossBatch dup = pointwise_loss_batch(ScoreKind::kOrthogonal, y2, c2, f, truth, layout, mc);
  CHECK(dup.mean == doctest::Approx(full.mean).epsilon(1e-12));

  const LossBatch zero = pointwise_loss_batch(ScoreKind::kOrthogonal, toy.y, toy.c, slope_model(2.0), truth, layout, mc);
  CHECK(zero.mean < 1e-24);
  CHECK_THROWS_AS(pointwise_loss_batch(ScoreKind::kNaive, Vector(0), Matrix(0, 1), f, truth, layout, mc),
                  ArgumentError);
}

TEST_CASE("orthogonal score: zero derivative at the truth in every standard direction") {
  const ToyProblem toy;
  for (const auto& dir : standard_directions(toy, 7)) {
    const auto est = gateaux_derivative(ScoreKind::kOrthogonal, toy, dir, {-0.1, -0.03, -0.01, 0.01, 0.03, 0.1},
                                        100000, 11, 50);
    CAPTURE(dir.name);
    CHECK(std::abs(est.derivative) <= 3.0 * est.std_error + 1e-12);
    CHECK(est.verdict == "pass");
    CHECK(est.r_values == std::vector<double>{0.01, 0.03, 0.1});
    // Quadratic score: every step size gives the same (zero) slope.
    for (std::size_t q = 0; q < est.per_r.size(); ++q) {
      CHECK(std::abs(est.per_r[q]) <= 3.0 * est.per_r_stderr[q] + 1e-12);
    }
    CHECK(std::abs(est.mean_score_at_truth) <= 3.0 * est.mean_score_stderr + 1e-15);
    // Second derivative equals 2 E[(ds - dg)^2], dg = theta0 * dmean.
    const double oracle =
        2.0 * gauss_expect([&](double z) { return std::pow(dir.ds(z) - toy.theta0 * dir.dmean(z), 2); });
    CHECK(est.second_derivative == doctest::Approx(oracle).epsilon(0.05));
  }
}

TEST_CASE("naive score derivative matches the brute-force oracle -2 E[(Y - g0) dg]") {
  const ToyProblem toy;
  const auto dir = naive_confounded_direction(toy);
  const auto est = gateaux_derivative(ScoreKind::kNaive, toy, dir, {-0.01, 0.01}, 200000, 12, 100);
  // Independent Monte Carlo on fresh draws.
  Rng rng(99);
  const int n = 200000;
  double acc = 0.0, acc2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal(), u = rng.normal(), d = rng.normal();
    const double a = z + u + d, y = 2.0 * a + u;
    const double term = -2.0 * (y - 2.0 * z) * z;
    acc += term;
    acc2 += term * term;
  }
  const double oracle = acc / n;
  const double oracle_se = std::sqrt((acc2 / n - oracle * oracle) / n);
  CHECK(std::abs(est.derivative - oracle) <= 4.0 * std::hypot(est.std_error, oracle_se));
  // Naive second derivative: 2 E[dg^2] = 2 E[Z^2] = 2.
  CHECK(est.second_derivative == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("naive score ignores perturbations of s") {
  // Shifting only s leaves the naive score unchanged: derivative exactly 0.
  const ToyProblem toy;
  const PerturbationDirection only_s{"ds-only", [](double z) { return z; }, [](double) { return 0.0; }};
  const auto est = gateaux_derivative(ScoreKind::kNaive, toy, only_s, {-0.01, 0.01}, 1000, 1, 20);
  CHECK(est.derivative == 0.0);
  CHECK(est.second_derivative == 0.0);
}

TEST_CASE("derivative argument checks and report") {
  const ToyProblem toy;
  const auto dir = naive_confounded_direction(toy);
  CHECK_THROWS_AS(gateaux_derivative(ScoreKind::kNaive, toy, dir, {0.0, 0.01, -0.01}, 100, 1), ArgumentError);
  CHECK_THROWS_AS(gateaux_derivative(ScoreKind::kNaive, toy, dir, {0.01, -0.02}, 100, 1), ArgumentError);
  CHECK_THROWS_AS(gateaux_derivative(ScoreKind::kNaive, toy, dir, {}, 100, 1), ArgumentError);
  const auto a = gateaux_derivative(ScoreKind::kNaive, toy, dir, {-0.01, 0.01}, 5000, 3, 20);
  const auto b = gateaux_derivative(ScoreKind::kNaive, toy, dir, {-0.01, 0.01}, 5000, 3, 20);
  CHECK(a.derivative == b.derivative);
  CHECK(a.std_error == b.std_error);
  const Json rep = orthogonality_report(a);
  for (const char* key : {"kind", "direction", "r_grid", "derivative", "stderr", "verdict"}) CHECK(rep.contains(key));
  CHECK(rep.at("kind") == "naive");
  CHECK(rep.at("direction") == "dg=c");
}

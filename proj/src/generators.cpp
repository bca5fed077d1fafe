#include "dmlcmr/generators.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dmlcmr/error.hpp"
#include "dmlcmr/rng.hpp"

namespace dmlcmr {

double demand_psi(double t) {
  const double d = t - 5.0;
  return 2.0 * (d * d * d * d / 600.0 + std::exp(-4.0 * d * d) + t / 10.0 - 2.0);
}

double demand_f0(double t, double s, double p) {
  return 100.0 + (10.0 + p) * s * demand_psi(t) - 2.0 * p;
}

Dataset gen_demand_iv(const DemandIVParams& params) {
  if (params.n == 0) throw ArgumentError("gen_demand_iv: n must be >= 1");
  if (!(params.rho >= 0.0 && params.rho <= 1.0)) {
    throw ArgumentError("gen_demand_iv: rho must lie in [0, 1]");
  }
  if (!(params.iv_strength >= 0.0)) throw ArgumentError("gen_demand_iv: iv_strength must be >= 0");

  const auto n = static_cast<Eigen::Index>(params.n);
  Vector y(n);
  Matrix x(n, 3);
  Matrix c(n, 3);
  Rng rng(params.seed);
  const double t_lo = params.ood_time ? 1.0 : 0.0;
  const double noise_sd = std::sqrt(1.0 - params.rho * params.rho);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = static_cast<double>(rng.uniform_int(1, 7));
    const double t = rng.uniform(t_lo, t_lo + 10.0);
    const double z = rng.normal();
    const double omega = rng.normal();
    const double eps = params.rho * omega + noise_sd * rng.normal();
    const double p = 25.0 + (params.iv_strength * z + 3.0) * demand_psi(t) + omega;
    y(i) = demand_f0(t, s, p) + eps;
    x(i, 0) = p;
    x(i, 1) = t;
    x(i, 2) = s;
    c(i, 0) = z;
    c(i, 1) = t;
    c(i, 2) = s;
  }
  Dataset d = make_dataset(std::move(y), std::move(x), std::move(c), "r", {"p", "t", "s"},
                           {"z", "t", "s"});
  auto truth = std::make_shared<GroundTruth>();
  truth->kind = GroundTruth::Kind::kAnalyticF0;
  truth->f0 = [](std::span<const double> row) { return demand_f0(row[1], row[2], row[0]); };
  d.truth = std::move(truth);
  d.meta = {{"generator", "demand_iv"},
            {"params",
             {{"rho", params.rho},
              {"iv_strength", params.iv_strength},
              {"n", params.n},
              {"ood_time", params.ood_time}}},
            {"seed", params.seed}};
  return d;
}

double pcl_g(double u) { return demand_psi(u); }

double pcl_outcome_mean(double a, double w, double u) {
  return a * std::min(std::exp((w - a) / 10.0), 5.0) - 5.0 * pcl_g(u);
}

Dataset gen_pcl_demand(const PCLDemandParams& params) {
  if (params.n == 0) throw ArgumentError("gen_pcl_demand: n must be >= 1");
  const auto n = static_cast<Eigen::Index>(params.n);
  Vector y(n);
  Matrix x(n, 2);
  Matrix c(n, 3);
  Rng rng(params.seed);
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = rng.uniform(0.0, 10.0);
    const double e1 = rng.normal();
    const double e2 = rng.normal();
    const double e3 = rng.normal();
    const double e4 = rng.normal();
    const double e5 = rng.normal();
    const double gu = pcl_g(u);
    const double v1 = 2.0 * std::sin(kTwoPi * u / 10.0) + e1;
    const double v2 = 2.0 * std::cos(kTwoPi * u / 10.0) + e2;
    const double w = 7.0 * gu + 45.0 + e3;
    const double a = 35.0 + (v1 + 3.0) * gu + v2 + e4;
    y(i) = pcl_outcome_mean(a, w, u) + e5;
    x(i, 0) = a;
    x(i, 1) = w;
    c(i, 0) = a;
    c(i, 1) = v1;
    c(i, 2) = v2;
  }
  Dataset d = make_dataset(std::move(y), std::move(x), std::move(c), "Y", {"A", "W"},
                           {"A", "V1", "V2"});
  auto truth = std::make_shared<GroundTruth>();
  truth->kind = GroundTruth::Kind::kDoIntervention;
  d.truth = std::move(truth);
  d.meta = {{"generator", "pcl_demand"}, {"params", {{"n", params.n}}}, {"seed", params.seed}};
  return d;
}

double semi_synthetic_f0(double a, std::span<const double> cov) {
  const auto d = static_cast<double>(cov.size());
  double lin = 0.0;
  for (double v : cov) lin += v / d;
  return 9.0 * a * a - 1.5 * a + lin + std::abs(cov[0] * cov[1]) - std::sin(10.0 + cov[1] * cov[2]);
}

Dataset gen_semi_synthetic(const SemiSyntheticParams& params) {
  const Matrix& cov = params.covariates;
  if (cov.cols() < 3) throw ArgumentError("gen_semi_synthetic: covariates need at least 3 columns");
  if (cov.rows() < 1) throw ArgumentError("gen_semi_synthetic: covariates are empty");
  if (!cov.allFinite()) throw ArgumentError("gen_semi_synthetic: covariates contain non-finite entries");
  const int k = params.k_instruments;
  if (k < 2) throw ArgumentError("gen_semi_synthetic: k_instruments must be >= 2");
  std::vector<double> fz = params.fz_table;
  if (fz.empty()) {
    for (int z = 0; z < k; ++z) fz.push_back(static_cast<double>(z));
  }
  if (static_cast<int>(fz.size()) != k) {
    throw ArgumentError("gen_semi_synthetic: fz_table must have k_instruments entries");
  }

  const auto n = cov.rows();
  const auto dx = cov.cols();
  Rng rng(params.seed);
  Matrix w(dx, k);
  for (Eigen::Index i = 0; i < dx; ++i) {
    for (int z = 0; z < k; ++z) w(i, z) = rng.uniform(-1.0, 1.0);
  }

  Vector y(n);
  Matrix x(n, dx + 1);
  Matrix c(n, dx + 1);
  const double eps_sd = std::sqrt(0.1);
  std::vector<double> row(static_cast<std::size_t>(dx));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto z = static_cast<int>(rng.uniform_int(1, k));
    const double eps = eps_sd * rng.normal();
    const double delta_a = rng.normal();
    const double delta_y = rng.normal();
    double a = delta_a;
    for (Eigen::Index j = 0; j < dx; ++j) {
      a += w(j, z - 1) * (cov(i, j) + 0.2 * eps + fz[static_cast<std::size_t>(z - 1)]);
      row[static_cast<std::size_t>(j)] = cov(i, j);
    }
    y(i) = semi_synthetic_f0(a, row) + 2.0 * eps + delta_y;
    x(i, 0) = a;
    c(i, 0) = static_cast<double>(z);
    x.row(i).tail(dx) = cov.row(i);
    c.row(i).tail(dx) = cov.row(i);
  }
  std::vector<std::string> xn{"A"}, cn{"Z"};
  for (Eigen::Index j = 0; j < dx; ++j) {
    xn.push_back("X" + std::to_string(j + 1));
    cn.push_back("X" + std::to_string(j + 1));
  }
  Dataset d = make_dataset(std::move(y), std::move(x), std::move(c), "Y", xn, cn);
  auto truth = std::make_shared<GroundTruth>();
  truth->f0 = [](std::span<const double> r) { return semi_synthetic_f0(r[0], r.subspan(1)); };
  d.truth = std::move(truth);
  d.meta = {{"generator", "semi_synthetic"},
            {"params", {{"k_instruments", k}, {"fz_table", fz}, {"n", n}, {"d_x", dx}}},
            {"seed", params.seed}};
  return d;
}

Dataset gen_linear_toy(const LinearToyParams& params) {
  if (params.n == 0) throw ArgumentError("gen_linear_toy: n must be >= 1");
  const auto n = static_cast<Eigen::Index>(params.n);
  Vector y(n);
  Matrix x(n, 1);
  Matrix c(n, 1);
  Rng rng(params.seed);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = rng.normal();
    const double u = rng.normal();
    const double delta = rng.normal();
    const double a = params.instrument_strength * z + u + delta;
    y(i) = params.theta0 * a + u;
    x(i, 0) = a;
    c(i, 0) = z;
  }
  Dataset d = make_dataset(std::move(y), std::move(x), std::move(c), "Y", {"A"}, {"Z"});
  auto truth = std::make_shared<GroundTruth>();
  const double theta0 = params.theta0;
  truth->f0 = [theta0](std::span<const double> r) { return theta0 * r[0]; };
  d.truth = std::move(truth);
  d.meta = {{"generator", "linear_toy"},
            {"params",
             {{"n", params.n},
              {"theta0", params.theta0},
              {"instrument_strength", params.instrument_strength}}},
            {"seed", params.seed}};
  return d;
}

}  // namespace dmlcmr

#pragma once

#include <cstdint>
#include <vector>

#include "dmlcmr/dataset.hpp"

namespace dmlcmr {

// ---------------------------------------------------------------------------
// Ticket-demand IV benchmark.
//   p = 25 + (iv_strength * z + 3) psi(t) + omega
//   r = f0((t, s), p) + eps,  eps ~ N(rho * omega, 1 - rho^2)
// Roles: y = r, x = (p, t, s), c = (z, t, s).
// ---------------------------------------------------------------------------
struct DemandIVParams {
  double rho = 0.9;
  double iv_strength = 1.0;
  std::size_t n = 5000;
  std::uint64_t seed = 0;
  bool ood_time = false;  // t ~ Unif(1, 11) instead of Unif(0, 10)
};

double demand_psi(double t);
double demand_f0(double t, double s, double p);
Dataset gen_demand_iv(const DemandIVParams& params);

// ---------------------------------------------------------------------------
// Ticket-demand proxy benchmark. U is the hidden demand.
// Roles: y = Y, x = (A, W), c = (A, V1, V2). A is passed through.
// ---------------------------------------------------------------------------
struct PCLDemandParams {
  std::size_t n = 5000;
  std::uint64_t seed = 0;
};

double pcl_g(double u);
/// The structural outcome without noise: a * min(exp((w - a) / 10), 5) - 5 g(u).
double pcl_outcome_mean(double a, double w, double u);
Dataset gen_pcl_demand(const PCLDemandParams& params);

// ---------------------------------------------------------------------------
// Semi-synthetic IV on ingested covariates X (n x d_X, d_X >= 3).
// Roles: y = Y, x = (A, X1..Xd), c = (Z, X1..Xd).
// ---------------------------------------------------------------------------
struct SemiSyntheticParams {
  Matrix covariates;
  int k_instruments = 3;
  std::uint64_t seed = 0;
  /// Per-category constants f_z(z); defaults to 0, 1, ..., K-1 when empty.
  std::vector<double> fz_table;
};

double semi_synthetic_f0(double a, std::span<const double> covariates);
Dataset gen_semi_synthetic(const SemiSyntheticParams& params);

// ---------------------------------------------------------------------------
// Linear-Gaussian toy with closed-form nuisances:
//   Z, U, delta ~ N(0, 1);  A = Z + U + delta;  Y = theta0 * A + U
//   s0(z) = theta0 * z,  g0(f_theta, z) = theta * z,  A | Z=z ~ N(z, 2).
// Roles: y = Y, x = (A), c = (Z).
// ---------------------------------------------------------------------------
struct LinearToyParams {
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  double theta0 = 2.0;
  /// Multiplies Z in the action equation; 1 is the standard toy.
  double instrument_strength = 1.0;
};

Dataset gen_linear_toy(const LinearToyParams& params);

}  // namespace dmlcmr

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dmlcmr/estimators.hpp"
#include "dmlcmr/structural.hpp"

namespace dmlcmr {

enum class ScoreKind { kOrthogonal, kNaive };

std::string to_string(ScoreKind kind);
/// "orthogonal" or "naive"; anything else -> ArgumentError.
ScoreKind parse_score_kind(const std::string& s);

/// Nuisances (s, F): s(c) ~ E[Y|c] and the conditional law of the
/// endogenous x column given c. `s` may be null for the naive score.
struct NuisancePair {
  RegressorPtr s;
  DensityPtr density;

  /// Throws ArgumentError if a required part is missing or the conditioning
  /// widths disagree.
  void validate(ScoreKind kind) const;
};

struct McConfig {
  int draws = 100;
  std::uint64_t seed = 0;
};

/// (s - g)^2 for the orthogonal score, (y - g)^2 for the naive one.
double score_value(ScoreKind kind, double y, double s_hat, double g_hat);

/// g(f, c) = E_F[f(X) | c] using the density's expectation nodes.
double g_hat(const StructuralModel& f, const CmrLayout& layout, std::span<const double> c,
             const ConditionalDensity& density, const McConfig& mc);

double score_value(ScoreKind kind, double y, std::span<const double> c, const StructuralModel& f,
                   const NuisancePair& nuisance, const CmrLayout& layout, const McConfig& mc);

struct LossBatch {
  Vector losses;
  double mean = 0.0;
};

/// Row i uses the seed derive_seed(mc.seed, i). Empty batch -> ArgumentError.
LossBatch pointwise_loss_batch(ScoreKind kind, const Vector& y, const Matrix& c, const StructuralModel& f,
                               const NuisancePair& nuisance, const CmrLayout& layout, const McConfig& mc);

// ---------------------------------------------------------------------------
// Orthogonality check on the linear-Gaussian toy:
//   Z, U, delta ~ N(0,1);  A = kappa Z + U + delta;  Y = theta0 A + U
//   s0(z) = theta0 kappa z,  F0(A | z) = N(kappa z, 2),  f0(a) = theta0 a.
// ---------------------------------------------------------------------------

struct ToyProblem {
  double theta0 = 2.0;
  double kappa = 1.0;
};

/// A nuisance direction: ds shifts s(c); dmean shifts the location of F(.|c),
/// which moves g(f0, c) by theta0 * dmean(c) for the linear f0.
struct PerturbationDirection {
  std::string name;
  std::function<double(double)> ds;
  std::function<double(double)> dmean;
};

/// constant, linear, and fitted-delta (difference between nuisances fitted on
/// a toy sample of size n_fit and the truth).
std::vector<PerturbationDirection> standard_directions(const ToyProblem& problem, std::uint64_t seed,
                                                       std::size_t n_fit = 2000);
/// ds = 0, dmean(z) = z / theta0, i.e. dg(c) = c.
PerturbationDirection naive_confounded_direction(const ToyProblem& problem);

struct DerivativeEstimate {
  ScoreKind kind = ScoreKind::kOrthogonal;
  std::string direction;
  std::vector<double> r_grid;
  std::vector<double> r_values;       // positive step sizes, ascending
  std::vector<double> per_r;          // central difference per step size
  std::vector<double> per_r_stderr;
  double derivative = 0.0;            // at the smallest step
  double std_error = 0.0;
  double second_derivative = 0.0;     // (L(r) - 2 L(0) + L(-r)) / r^2 at the smallest step
  double mean_score_at_truth = 0.0;
  double mean_score_stderr = 0.0;
  std::string verdict;                // "pass" (|d| <= 3 se), "fail" (|d| > 5 se), "inconclusive"
};

/// Central-difference derivative of r -> E[score(eta0 + r * direction)] at
/// r = 0 with common random numbers across r and a bootstrap standard error.
/// r_grid must hold nonzero steps in +/- pairs.
DerivativeEstimate gateaux_derivative(ScoreKind kind, const ToyProblem& problem,
                                      const PerturbationDirection& direction, const std::vector<double>& r_grid,
                                      std::size_t mc_n, std::uint64_t seed, int bootstrap = 200);

/// {kind, direction, r_grid, derivative, stderr, verdict, ...} (JSON keys).
Json orthogonality_report(const DerivativeEstimate& est);

}  // namespace dmlcmr

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dmlcmr/dataset.hpp"
#include "dmlcmr/dml.hpp"

namespace dmlcmr {

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

/// analytic-f0: f0(x) in closed form. mc-do-intervention: E[Y | do(A = a)]
/// by Monte Carlo with a fixed budget and seed.
struct TruthOracle {
  enum class Kind { kAnalyticF0, kMcDoIntervention };
  Kind kind = Kind::kAnalyticF0;
  int input_dim = 1;
  std::function<double(std::span<const double>)> f0;
  std::size_t mc_n = 0;
  std::uint64_t seed = 0;

  static TruthOracle analytic(int input_dim, std::function<double(std::span<const double>)> f0);
  static TruthOracle pcl_do(std::size_t mc_n, std::uint64_t seed);

  Vector eval(const Matrix& x) const;
};

/// Mean of (fhat(x) - f0(x))^2 over the rows of x_test. Throws ShapeError on
/// a width mismatch.
double mse_vs_truth(const std::function<Vector(const Matrix&)>& fhat, const TruthOracle& oracle,
                    const Matrix& x_test);

struct DoOracleResult {
  Vector value;
  Vector std_error;
};

/// E[Y | do(A = a)] = E[a min(exp((W - a)/10), 5) - 5 g(U)] per grid point,
/// with U ~ Unif(0, 10), W = 7 g(U) + 45 + eps3. Requires mc_n >= 1e4 and a
/// nonempty grid.
DoOracleResult pcl_do_oracle(const Vector& a_grid, std::size_t mc_n, std::uint64_t seed);

/// 50 equally spaced points between the 5th and 95th percentiles of A in a
/// 1e5-sample draw.
Vector pcl_evaluation_grid(std::uint64_t seed = 0);

/// Linear interpolation between order statistics.
double percentile(std::vector<double> v, double q);

// ---------------------------------------------------------------------------
// Problems, methods, single runs
// ---------------------------------------------------------------------------

/// Generator name plus parameters, e.g. {"generator": "demand_iv",
/// "params": {"rho": 0.9, "iv_strength": 1.0}}.
struct ProblemSpec {
  std::string generator = "demand_iv";  // demand_iv | pcl_demand | linear_toy
  Json params = Json::object();
  std::size_t n_test = 10000;

  Json to_json() const;
  static ProblemSpec from_json(const Json& j);
};

struct MethodSpec {
  std::string name;                 // label in reports
  std::string method = "dml-cmr";   // dml-cmr | ce-dml-cmr | naive-two-stage
  NuisanceSpecs nuisances;
  FitConfig fit;
  Json structural = Json::object(); // {} selects the generator default

  Json to_json() const;
  static MethodSpec from_json(const Json& j);
};

/// Default nuisance estimators and structural family per generator. Demand
/// uses boosted trees for every stage; PCL and the toy use linear bases.
NuisanceSpecs default_nuisances(const std::string& generator);
Json default_structural(const std::string& generator);
MethodSpec default_method(const std::string& method, const std::string& generator);

/// Training sample of size n for the problem.
Dataset generate(const ProblemSpec& problem, std::size_t n, std::uint64_t seed);
/// Names of the variables standardised before fitting (action and outcome).
std::vector<std::string> standardised_variables(const ProblemSpec& problem);
/// Structural model for the (standardised) training data.
StructuralModel make_structural(const Json& spec, const Dataset& train, std::uint64_t seed);

struct RunResult {
  std::string method;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double mse = 0.0;               // original units
  double mse_standardised = 0.0;  // divided by the outcome variance
  bool audit_passed = false;
  int nuisance_fits = 0;
};

/// Generates, standardises, fits and scores one (method, n, seed) cell.
/// Failures are reported in the result, not thrown.
RunResult run_method(const ProblemSpec& problem, const MethodSpec& method, std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Benchmarks
// ---------------------------------------------------------------------------

struct BenchmarkReport {
  std::string method;
  ProblemSpec problem;
  std::size_t n = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> mse;
  std::vector<double> mse_standardised;
  std::vector<std::string> failures;  // per failed seed: "seed: message"
  double median = 0.0, q25 = 0.0, q75 = 0.0;
  double median_standardised = 0.0, q25_standardised = 0.0, q75_standardised = 0.0;
  bool audit_passed = true;
  std::optional<double> runtime_s;
  std::string config_hash;

  Json to_json() const;
};

struct BenchmarkConfig {
  std::vector<MethodSpec> methods;
  ProblemSpec problem;
  std::vector<std::size_t> n_grid{5000};
  std::vector<std::uint64_t> seeds;
  int jobs = 1;
  std::uint64_t seed = 0;  // global seed; cell seeds derive from it
  bool record_runtime = false;
};

/// Full factorial method x n x seed. Cell seed = derive_seed(cfg.seed, seed).
std::vector<BenchmarkReport> benchmark(const BenchmarkConfig& cfg, const std::string& config_hash);

/// One row per (method, n, seed): method,n,seed,mse
std::string benchmark_csv(const std::vector<BenchmarkReport>& reports);
Json benchmark_json(const std::vector<BenchmarkReport>& reports);
/// Median line and interquartile band per method against n.
std::string benchmark_svg(const std::vector<BenchmarkReport>& reports, const std::string& title);

/// Runs `fn(i)` for i in [0, count) on `jobs` threads.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// Rate studies
// ---------------------------------------------------------------------------

struct RateStudyResult {
  std::vector<std::size_t> n_grid;
  std::vector<double> error;            // RMS over seeds per n
  std::vector<std::vector<double>> per_seed;
  double slope = 0.0;
  double intercept = 0.0;
  double slope_ci_low = 0.0, slope_ci_high = 0.0;
  std::string flag;                     // nuisance study: PASS / FAIL
  bool audit_passed = true;

  Json to_json() const;
};

/// OLS of log(error) on log(n). Needs >= 3 strictly increasing points.
void fit_log_log(const std::vector<std::size_t>& n, const std::vector<double>& err, double& slope, double& intercept);

struct RateStudyConfig {
  std::vector<std::size_t> n_grid{500, 1000, 2000, 4000, 8000};
  std::vector<std::uint64_t> seeds;
  bool analytic_nuisances = false;
  double theta0 = 2.0;
  double kappa = 1.0;
  FitConfig fit;  // closed-form solver
  int bootstrap = 200;
};

/// |theta_hat - theta0| of DML on the linear toy per (n, seed).
RateStudyResult rate_study(const RateStudyConfig& cfg);

struct NuisanceRateConfig {
  RegressorSpec estimator;
  std::string generator = "linear_toy";  // linear_toy | demand_iv
  Json params = Json::object();
  std::vector<std::size_t> n_grid{500, 1000, 2000, 4000, 8000};
  std::vector<std::uint64_t> seeds;
  std::size_t n_test = 10000;
  int bootstrap = 200;
};

/// L2 error of s_hat against the analytic E[Y | C]; PASS when slope < -0.25.
RateStudyResult nuisance_rate_study(const NuisanceRateConfig& cfg);

struct BiasInjectionConfig {
  std::vector<double> b_grid{0.1, 0.2, 0.4};
  std::vector<std::uint64_t> seeds;
  std::size_t n = 10000;
  double theta0 = 2.0;
  double kappa = 1.0;
  FitConfig fit;  // closed-form solver
};

struct BiasInjectionResult {
  std::vector<double> b_grid;
  std::vector<double> error_dml, error_naive;  // RMS over seeds of |theta_b - theta_0|
  double slope_dml = 0.0, slope_naive = 0.0;
  bool audit_passed = true;

  Json to_json() const;
};

/// Analytic toy nuisances with both the outcome regression and the density
/// mean shifted by +b. The error at b is theta_hat(b) - theta_hat(0) on the
/// same sample, so sampling noise cancels; slopes are OLS on log-log scale.
BiasInjectionResult bias_injection_study(const BiasInjectionConfig& cfg);

/// E[Y | C = c] in closed form for the toy and the demand generators.
std::function<double(std::span<const double>)> analytic_s0(const std::string& generator, const Json& params);

// ---------------------------------------------------------------------------
// Ill-posedness
// ---------------------------------------------------------------------------

/// Tensor basis for demand: quadratic in p, radial in t (21 centres over the
/// range of t), indicators of s. Expects normalised p and t (adapt_to).
BasisMap demand_basis();

struct IllPosednessProblem {
  std::string family = "linear_toy";  // linear_toy | demand_iv
  double strength = 1.0;              // kappa (toy) or iv_strength (demand)
  Json basis = Json::object();        // {} selects identity (toy) / demand_basis()
};

struct IllPosednessResult {
  double nu = 0.0;
  Vector theta_argmax;
  int excluded = 0;
  std::vector<std::string> warnings;

  Json to_json() const;
};

/// Maximum over sampled theta of ||f0 - f_theta|| / ||E[f0 - f_theta | C]||,
/// both norms by Monte Carlo under the true law. theta_samples >= 100.
IllPosednessResult ill_posedness_estimate(const IllPosednessProblem& problem, int theta_samples, std::size_t mc_n,
                                          std::uint64_t seed, const std::vector<Vector>& extra_thetas = {});

}  // namespace dmlcmr

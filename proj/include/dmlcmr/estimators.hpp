#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmlcmr/basis.hpp"
#include "dmlcmr/dataset.hpp"
#include "dmlcmr/rng.hpp"

namespace dmlcmr {

inline constexpr int kModelFormatVersion = 1;

// ===========================================================================
// Regressors: s(c) ~ E[Y | c]
// ===========================================================================

/// Hyperparameters for every regressor kind. Only the fields of `kind` are
/// read. Kinds: "ridge", "gradient-boosted-trees", "feedforward-net",
/// "constant".
struct RegressorSpec {
  std::string kind = "ridge";

  // ridge (closed form on a basis, unpenalised intercept)
  double lambda = 0.0;
  std::optional<Json> basis;      // BasisMap JSON; identity when absent
  bool standardise_basis = false; // adapt basis centre/scale to the inputs

  // gradient-boosted-trees
  int n_trees = 500;
  double learning_rate = 0.1;
  int max_depth = 3;
  int min_leaf = 100;

  // feedforward-net
  std::vector<int> hidden{128, 64, 32};
  int epochs = 100;
  int batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  Json to_json() const;
  /// Unknown kind or out-of-range field -> ArgumentError naming the field.
  static RegressorSpec from_json(const Json& j);
};

class Regressor {
 public:
  virtual ~Regressor() = default;

  virtual std::string kind() const = 0;
  int input_dim() const { return input_dim_; }

  /// Throws ShapeError when the width differs from the training width.
  Vector predict(const Matrix& x) const;
  double predict_one(std::span<const double> x) const;

  /// Per-stage (trees) or per-epoch (nets) training MSE; one entry otherwise.
  const std::vector<double>& training_loss() const { return training_loss_; }

  /// Versioned document: {format, version, kind, hyperparams, state}.
  Json to_json() const;

 protected:
  virtual Vector predict_impl(const Matrix& x) const = 0;
  virtual Json hyperparams_json() const = 0;
  virtual Json state_json() const = 0;

  int input_dim_ = 0;
  std::vector<double> training_loss_;
};

using RegressorPtr = std::shared_ptr<const Regressor>;

/// Requires rows >= 1 (>= min_leaf for trees); FitError on degenerate designs.
RegressorPtr fit_regressor(const RegressorSpec& spec, const Matrix& x, const Vector& y);
RegressorPtr load_regressor(const Json& j);
/// Closed-form regressor wrapping a known function (not serialisable).
RegressorPtr make_analytic_regressor(int input_dim, std::function<double(std::span<const double>)> fn);
RegressorPtr make_constant_regressor(int input_dim, double value);

/// Ridge solution details, exposed for inspection.
struct RidgeView {
  const BasisMap* basis;
  double intercept;
  const Vector* coef;
};
/// Returns nullopt for non-ridge regressors.
std::optional<RidgeView> ridge_view(const Regressor& r);

/// Gradient of the mean squared error of a feedforward-net regressor with
/// respect to its flat parameter vector (for gradient checks).
struct NetGradient {
  double loss;
  Vector grad;
};
NetGradient feedforward_loss_gradient(const Regressor& r, const Vector& params, const Matrix& x,
                                      const Vector& y);
Vector feedforward_params(const Regressor& r);

// ===========================================================================
// Conditional densities: F(X | C) for the single endogenous x column
// ===========================================================================

struct GaussianMixtureParams {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> stds;

  std::size_t size() const { return weights.size(); }
  double mean() const;
  double variance() const;
  /// Weights nonnegative summing to 1 within 1e-8, stds >= sigma_min > 0.
  void validate(double sigma_min = 0.0) const;
  void sort_by_mean();
};

/// Points and weights approximating an expectation under a conditional law.
struct ExpectationNodes {
  std::vector<double> points;
  std::vector<double> weights;  // sum to 1
};

/// Draws from a Gaussian mixture: components chosen by systematic
/// (stratified) sampling, normals drawn in antithetic pairs. Each node has
/// weight 1 / count.
ExpectationNodes mixture_nodes(const GaussianMixtureParams& params, int count, Rng& rng);

/// Monte Carlo estimate of E[f(X)] for X ~ params.
double mixture_expectation(const GaussianMixtureParams& params,
                           const std::function<double(double)>& f, int mc_samples,
                           std::uint64_t seed);

/// Kinds: "gaussian-mixture-net", "binned-categorical", "gaussian-location".
struct DensitySpec {
  std::string kind = "gaussian-mixture-net";

  // gaussian-mixture-net
  int components = 10;
  std::vector<int> hidden{128, 64, 32};
  int epochs = 50;
  int batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  double sigma_min = 1e-3;  // standardised response units

  // binned-categorical
  int bins = 32;
  int c_bins = 8;

  // gaussian-location: mean regressor, homoscedastic spread
  RegressorSpec location{};

  Json to_json() const;
  static DensitySpec from_json(const Json& j);
};

class ConditionalDensity {
 public:
  virtual ~ConditionalDensity() = default;

  virtual std::string kind() const = 0;
  int input_dim() const { return input_dim_; }
  /// Lower bound on reported stds, in response units.
  double sigma_floor() const { return sigma_floor_; }

  GaussianMixtureParams query(std::span<const double> c) const;
  std::vector<GaussianMixtureParams> query_batch(const Matrix& c) const;

  /// Nodes for E[h(X) | c]. Mixture kinds draw `count` Monte Carlo nodes;
  /// atom kinds return their support with exact weights.
  virtual ExpectationNodes nodes(const GaussianMixtureParams& params, int count, Rng& rng) const;

  /// Mean negative log-likelihood of responses x given conditioning rows c.
  double nll(const Matrix& c, const Vector& x) const;

  /// Full-data NLL at each accepted epoch boundary (nets); one entry otherwise.
  const std::vector<double>& training_nll() const { return training_nll_; }

  Json to_json() const;

 protected:
  virtual std::vector<GaussianMixtureParams> query_impl(const Matrix& c) const = 0;
  virtual Json hyperparams_json() const = 0;
  virtual Json state_json() const = 0;

  int input_dim_ = 0;
  double sigma_floor_ = 0.0;
  std::vector<double> training_nll_;
};

using DensityPtr = std::shared_ptr<const ConditionalDensity>;

DensityPtr fit_conditional_density(const DensitySpec& spec, const Matrix& c, const Vector& x);
DensityPtr load_density(const Json& j);
/// X | c ~ N(mean_fn(c), sd^2). Not serialisable.
DensityPtr make_analytic_gaussian(int input_dim, std::function<double(std::span<const double>)> mean_fn,
                                  double sd);

/// Per-bin frequencies for the binned-categorical kind (testing aid).
struct BinnedView {
  std::vector<double> bin_means;
};
std::optional<BinnedView> binned_view(const ConditionalDensity& d);

}  // namespace dmlcmr

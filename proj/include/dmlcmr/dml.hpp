#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dmlcmr/dataset.hpp"
#include "dmlcmr/estimators.hpp"
#include "dmlcmr/score.hpp"
#include "dmlcmr/structural.hpp"

namespace dmlcmr {

struct FitConfig {
  int k_folds = 10;
  int mc_draws = 100;
  int batch_size = 128;
  int epochs = 200;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double early_stop_tol = 1e-5;
  int early_stop_window = 10;
  ScoreKind score = ScoreKind::kOrthogonal;
  std::string solver = "closed-form";  // or "gradient"
  /// Ridge penalty for the closed-form solver; negative selects it from
  /// lambda_grid by leave-one-fold-out validation.
  double lambda = -1.0;
  std::vector<double> lambda_grid{1e-8, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
  std::uint64_t seed = 0;

  void validate() const;
  Json to_json() const;
  static FitConfig from_json(const Json& j);
};

/// Estimator settings for the nuisances.
struct NuisanceSpecs {
  RegressorSpec s;
  DensitySpec density;

  Json to_json() const;
  static NuisanceSpecs from_json(const Json& j);
};

/// Builds the nuisance pair for one training subset. `task` is the fold id
/// (or -1 for a full-sample fit) and may be used to derive seeds.
using NuisanceFactory = std::function<NuisancePair(const Dataset& train, int task)>;

NuisanceFactory make_nuisance_factory(const NuisanceSpecs& specs, std::uint64_t seed);

struct CrossFitState {
  FoldPlan plan;
  /// Evaluation groups: rows whose score uses nuisances[g]. For K-fold
  /// cross-fitting these are the folds; for full-sample fits a single group.
  std::vector<std::vector<std::size_t>> groups;
  std::vector<NuisancePair> nuisances;
  std::vector<std::vector<std::size_t>> train_indices;
  bool cross_fitted = true;
  int fit_count = 0;

  /// Every cross-fitted pair g was trained on rows disjoint from group g, and
  /// its training rows are exactly the complement of the group.
  bool audit() const;
  Json audit_json() const;
};

/// Requires every complement to hold enough rows for the estimators;
/// otherwise FitError naming the fold.
CrossFitState crossfit_nuisances(const Dataset& data, const FitConfig& cfg, const NuisanceSpecs& specs);
CrossFitState crossfit_nuisances(const Dataset& data, const FitConfig& cfg, const NuisanceFactory& factory);
/// One pair trained on every row, a single evaluation group.
CrossFitState full_sample_nuisances(const Dataset& data, const FitConfig& cfg, const NuisanceFactory& factory);

struct FittedCMR {
  StructuralModel model;
  std::string method;
  ScoreKind score = ScoreKind::kOrthogonal;
  std::vector<double> trajectory;  // full objective, epoch 0 = init
  double objective = 0.0;          // objective at the returned model
  double lambda = 0.0;             // closed-form penalty used
  FitConfig config;
  Json seeds = Json::object();
  Json audit = Json::object();
  int nuisance_fits = 0;

  Json to_json() const;
  static FittedCMR from_json(const Json& j);
};

/// Second stage with score cfg.score (normally orthogonal) on cross-fitted
/// nuisances.
FittedCMR fit_dml_cmr(const Dataset& data, const CrossFitState& state, const FitConfig& cfg,
                      const StructuralModel& init);
/// Nuisances fitted once on the full sample, orthogonal score.
FittedCMR fit_ce_dml_cmr(const Dataset& data, const FitConfig& cfg, const StructuralModel& init,
                         const NuisanceFactory& factory);
FittedCMR fit_ce_dml_cmr(const Dataset& data, const FitConfig& cfg, const StructuralModel& init,
                         const NuisanceSpecs& specs);
/// Density fitted once on the full sample, targets y (naive score).
FittedCMR fit_naive_two_stage(const Dataset& data, const FitConfig& cfg, const StructuralModel& init,
                              const NuisanceFactory& factory);
FittedCMR fit_naive_two_stage(const Dataset& data, const FitConfig& cfg, const StructuralModel& init,
                              const NuisanceSpecs& specs);

/// Generic second stage on any nuisance state with any score kind.
FittedCMR fit_second_stage(const Dataset& data, const CrossFitState& state, const FitConfig& cfg,
                           const StructuralModel& init, ScoreKind kind, const std::string& method);

/// Eq.-7-style objective: sum over groups g of (1 / (G n_g)) sum_{i in g}
/// (t_i - g_g(f, c_i))^2 with t = s_g(c) (orthogonal) or y (naive). Node seeds
/// match those used by the solvers.
double empirical_objective(const Dataset& data, const CrossFitState& state, const StructuralModel& f,
                           const FitConfig& cfg, ScoreKind kind);

Vector predict_structural(const FittedCMR& fit, const Matrix& x_grid);

/// Seed of the expectation nodes for row i.
std::uint64_t node_seed(const FitConfig& cfg, std::size_t row);

}  // namespace dmlcmr

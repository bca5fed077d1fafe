#include "dmlcmr/score.hpp"

#include <algorithm>
#include <cmath>

#include "dmlcmr/error.hpp"
#include "dmlcmr/generators.hpp"
#include "dmlcmr/rng.hpp"

namespace dmlcmr {

std::string to_string(ScoreKind kind) { return kind == ScoreKind::kOrthogonal ? "orthogonal" : "naive"; }

ScoreKind parse_score_kind(const std::string& s) {
  if (s == "orthogonal") return ScoreKind::kOrthogonal;
  if (s == "naive") return ScoreKind::kNaive;
  throw ArgumentError("score: unknown kind '" + s + "'");
}

void NuisancePair::validate(ScoreKind kind) const {
  if (!density) throw ArgumentError("nuisance: conditional density missing");
  if (kind == ScoreKind::kOrthogonal) {
    if (!s) throw ArgumentError("nuisance: regressor s missing for the orthogonal score");
    if (s->input_dim() != density->input_dim()) {
      throw ArgumentError("nuisance: s and density use different conditioning widths");
    }
  }
}

double score_value(ScoreKind kind, double y, double s_hat, double g) {
  const double d = (kind == ScoreKind::kOrthogonal ? s_hat : y) - g;
  return d * d;
}

double g_hat(const StructuralModel& f, const CmrLayout& layout, std::span<const double> c,
             const ConditionalDensity& density, const McConfig& mc) {
  if (static_cast<int>(c.size()) != layout.dc || density.input_dim() != layout.dc) {
    throw ShapeError("g_hat: conditioning width mismatch");
  }
  if (f.input_dim() != layout.dx()) throw ShapeError("g_hat: structural model width mismatch");
  const GaussianMixtureParams p = density.query(c);
  Rng rng(mc.seed);
  const ExpectationNodes nodes = density.nodes(p, mc.draws, rng);
  Matrix xs(static_cast<Eigen::Index>(nodes.points.size()), layout.dx());
  std::vector<double> row(static_cast<std::size_t>(layout.dx()));
  for (std::size_t m = 0; m < nodes.points.size(); ++m) {
    layout.fill_x(c, nodes.points[m], row);
    for (int j = 0; j < layout.dx(); ++j) xs(static_cast<Eigen::Index>(m), j) = row[static_cast<std::size_t>(j)];
  }
  const Vector fx = f.predict(xs);
  double g = 0.0;
  for (std::size_t m = 0; m < nodes.points.size(); ++m) g += nodes.weights[m] * fx(static_cast<Eigen::Index>(m));
  return g;
}

double score_value(ScoreKind kind, double y, std::span<const double> c, const StructuralModel& f,
                   const NuisancePair& nuisance, const CmrLayout& layout, const McConfig& mc) {
  nuisance.validate(kind);
  const double g = g_hat(f, layout, c, *nuisance.density, mc);
  const double s = kind == ScoreKind::kOrthogonal ? nuisance.s->predict_one(c) : 0.0;
  return score_value(kind, y, s, g);
}

LossBatch pointwise_loss_batch(ScoreKind kind, const Vector& y, const Matrix& c, const StructuralModel& f,
                               const NuisancePair& nuisance, const CmrLayout& layout, const McConfig& mc) {
  if (c.rows() == 0) throw ArgumentError("pointwise_loss_batch: empty batch");
  if (y.size() != c.rows()) throw ShapeError("pointwise_loss_batch: y and c differ in rows");
  nuisance.validate(kind);
  const Vector s = kind == ScoreKind::kOrthogonal ? nuisance.s->predict(c) : Vector::Zero(c.rows());
  LossBatch out;
  out.losses.resize(c.rows());
  std::vector<double> row(static_cast<std::size_t>(c.cols()));
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) row[static_cast<std::size_t>(j)] = c(i, j);
    const McConfig row_mc{mc.draws, derive_seed(mc.seed, static_cast<std::uint64_t>(i))};
    const double g = g_hat(f, layout, row, *nuisance.density, row_mc);
    out.losses(i) = score_value(kind, y(i), s(i), g);
    if (!std::isfinite(out.losses(i))) throw Error("pointwise_loss_batch: non-finite loss at row " + std::to_string(i));
  }
  out.mean = out.losses.mean();
  return out;
}

// ---------------------------------------------------------------------------

std::vector<PerturbationDirection> standard_directions(const ToyProblem& problem, std::uint64_t seed,
                                                       std::size_t n_fit) {
  std::vector<PerturbationDirection> dirs;
  dirs.push_back({"constant", [](double) { return 1.0; }, [](double) { return 1.0; }});
  dirs.push_back({"linear", [](double z) { return z; }, [](double z) { return -0.5 * z; }});

  LinearToyParams tp;
  tp.n = n_fit;
  tp.seed = seed;
  tp.theta0 = problem.theta0;
  tp.instrument_strength = problem.kappa;
  const Dataset toy = gen_linear_toy(tp);
  RegressorSpec ridge;
  ridge.kind = "ridge";
  const RegressorPtr s_hat = fit_regressor(ridge, toy.c, toy.y);
  const RegressorPtr m_hat = fit_regressor(ridge, toy.c, toy.x.col(0));
  const double t0 = problem.theta0, k = problem.kappa;
  dirs.push_back({"fitted-delta",
                  [s_hat, t0, k](double z) {
                    const double c[1] = {z};
                    return s_hat->predict_one(c) - t0 * k * z;
                  },
                  [m_hat, k](double z) {
                    const double c[1] = {z};
                    return m_hat->predict_one(c) - k * z;
                  }});
  return dirs;
}

PerturbationDirection naive_confounded_direction(const ToyProblem& problem) {
  const double t0 = problem.theta0;
  return {"dg=c", [](double) { return 0.0; }, [t0](double z) { return z / t0; }};
}

DerivativeEstimate gateaux_derivative(ScoreKind kind, const ToyProblem& problem,
                                      const PerturbationDirection& direction, const std::vector<double>& r_grid,
                                      std::size_t mc_n, std::uint64_t seed, int bootstrap) {
  if (r_grid.empty()) throw ArgumentError("gateaux_derivative: empty r grid");
  std::vector<double> pos;
  for (double r : r_grid) {
    if (r == 0.0 || !std::isfinite(r)) throw ArgumentError("gateaux_derivative: r grid contains a zero step");
    if (std::find(r_grid.begin(), r_grid.end(), -r) == r_grid.end()) {
      throw ArgumentError("gateaux_derivative: r grid is not symmetric around 0");
    }
    if (r > 0.0) pos.push_back(r);
  }
  std::sort(pos.begin(), pos.end());
  pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
  if (mc_n < 2) throw ArgumentError("gateaux_derivative: mc_n must be >= 2");
  if (bootstrap < 2) throw ArgumentError("gateaux_derivative: bootstrap must be >= 2");

  const std::size_t nr = pos.size();
  const double t0 = problem.theta0, kappa = problem.kappa;
  // Per-sample central differences (one column per step), second difference
  // at the smallest step, and the score at the truth.
  Matrix diff(static_cast<Eigen::Index>(mc_n), static_cast<Eigen::Index>(nr));
  Vector second(static_cast<Eigen::Index>(mc_n));
  Vector at_truth(static_cast<Eigen::Index>(mc_n));
  Rng rng(seed);
  for (std::size_t i = 0; i < mc_n; ++i) {
    const double z = rng.normal();
    const double u = rng.normal();
    const double delta = rng.normal();
    const double a = kappa * z + u + delta;
    const double y = t0 * a + u;
    const double ds = direction.ds(z);
    const double dg = t0 * direction.dmean(z);
    auto score = [&](double r) {
      const double s = t0 * kappa * z + r * ds;
      const double g = t0 * kappa * z + r * dg;
      return score_value(kind, y, s, g);
    };
    const double s0 = score(0.0);
    at_truth(static_cast<Eigen::Index>(i)) = s0;
    for (std::size_t q = 0; q < nr; ++q) {
      diff(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(q)) = (score(pos[q]) - score(-pos[q])) / (2.0 * pos[q]);
    }
    second(static_cast<Eigen::Index>(i)) = (score(pos[0]) - 2.0 * s0 + score(-pos[0])) / (pos[0] * pos[0]);
  }

  DerivativeEstimate est;
  est.kind = kind;
  est.direction = direction.name;
  est.r_grid = r_grid;
  est.r_values = pos;
  const Eigen::RowVectorXd means = diff.colwise().mean();

  // Bootstrap: one resample of rows shared by every step size.
  Rng boot(derive_seed(seed, 0xB007));
  Matrix reps(bootstrap, static_cast<Eigen::Index>(nr));
  Eigen::RowVectorXd acc(static_cast<Eigen::Index>(nr));
  const auto n = static_cast<std::int64_t>(mc_n);
  for (int b = 0; b < bootstrap; ++b) {
    acc.setZero();
    for (std::int64_t i = 0; i < n; ++i) acc += diff.row(boot.uniform_int(0, n - 1));
    reps.row(b) = acc / static_cast<double>(mc_n);
  }
  for (std::size_t q = 0; q < nr; ++q) {
    const auto col = reps.col(static_cast<Eigen::Index>(q));
    const double m = col.mean();
    est.per_r.push_back(means(static_cast<Eigen::Index>(q)));
    est.per_r_stderr.push_back(std::sqrt((col.array() - m).square().sum() / (bootstrap - 1)));
  }
  est.derivative = est.per_r.front();
  est.std_error = est.per_r_stderr.front();
  est.second_derivative = second.mean();
  est.mean_score_at_truth = at_truth.mean();
  const double var = (at_truth.array() - est.mean_score_at_truth).square().sum() / static_cast<double>(mc_n - 1);
  est.mean_score_stderr = std::sqrt(var / static_cast<double>(mc_n));
  const double ad = std::abs(est.derivative);
  est.verdict = ad <= 3.0 * est.std_error ? "pass" : (ad > 5.0 * est.std_error ? "fail" : "inconclusive");
  return est;
}

Json orthogonality_report(const DerivativeEstimate& est) {
  return {{"kind", to_string(est.kind)},
          {"direction", est.direction},
          {"r_grid", est.r_grid},
          {"derivative", est.derivative},
          {"stderr", est.std_error},
          {"verdict", est.verdict},
          {"per_r", est.per_r},
          {"per_r_stderr", est.per_r_stderr},
          {"r_values", est.r_values},
          {"second_derivative", est.second_derivative},
          {"mean_score_at_truth", est.mean_score_at_truth},
          {"mean_score_stderr", est.mean_score_stderr}};
}

}  // namespace dmlcmr

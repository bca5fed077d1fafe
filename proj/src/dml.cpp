#include "dmlcmr/dml.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dmlcmr/error.hpp"
#include "dmlcmr/rng.hpp"
#include "dmlcmr/trees.hpp"

namespace dmlcmr {

namespace {

constexpr const char* kFitFormat = "dmlcmr.fitted_cmr";
constexpr std::uint64_t kNodeStream = 0x6e6f6465;
constexpr std::uint64_t kSolverStream = 0x736f6c76;

int min_rows(const RegressorSpec& s) { return s.kind == "gradient-boosted-trees" ? s.min_leaf : 2; }

int min_rows(const NuisanceSpecs& specs) {
  int m = std::max(min_rows(specs.s), 2);
  if (specs.density.kind == "gaussian-location") m = std::max(m, min_rows(specs.density.location));
  return m;
}

/// Per-row quantities shared by the solvers and the objective.
struct StageCache {
  int n_groups = 0;
  std::vector<int> group_of;
  Vector target;
  Vector weight;  // 1 / (G n_g)
  std::vector<ExpectationNodes> nodes;
};

StageCache build_cache(const Dataset& data, const CrossFitState& state, const FitConfig& cfg, ScoreKind kind) {
  const std::size_t n = data.size();
  StageCache sc;
  sc.n_groups = static_cast<int>(state.groups.size());
  sc.group_of.assign(n, -1);
  sc.target.resize(static_cast<Eigen::Index>(n));
  sc.weight.resize(static_cast<Eigen::Index>(n));
  sc.nodes.resize(n);
  for (int g = 0; g < sc.n_groups; ++g) {
    const auto& rows = state.groups[static_cast<std::size_t>(g)];
    const NuisancePair& np = state.nuisances[static_cast<std::size_t>(g)];
    np.validate(kind);
    if (np.density->input_dim() != data.dc()) throw ShapeError("second stage: density width differs from c");
    Matrix cg(static_cast<Eigen::Index>(rows.size()), data.c.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) cg.row(static_cast<Eigen::Index>(r)) = data.c.row(static_cast<Eigen::Index>(rows[r]));
    const auto params = np.density->query_batch(cg);
    const Vector s = kind == ScoreKind::kOrthogonal ? np.s->predict(cg) : Vector();
    const double w = 1.0 / (static_cast<double>(sc.n_groups) * static_cast<double>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::size_t i = rows[r];
      if (sc.group_of[i] >= 0) throw ArgumentError("second stage: evaluation groups overlap");
      sc.group_of[i] = g;
      sc.target(static_cast<Eigen::Index>(i)) = kind == ScoreKind::kOrthogonal ? s(static_cast<Eigen::Index>(r)) : data.y(static_cast<Eigen::Index>(i));
      sc.weight(static_cast<Eigen::Index>(i)) = w;
      Rng rng(node_seed(cfg, i));
      sc.nodes[i] = np.density->nodes(params[r], cfg.mc_draws, rng);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (sc.group_of[i] < 0) throw ArgumentError("second stage: evaluation groups do not cover every row");
  }
  if (!sc.target.allFinite()) throw FitError("second stage: non-finite nuisance targets");
  return sc;
}

/// x rows for every node of the given rows, plus per-node weights.
void node_inputs(const Dataset& data, const CmrLayout& layout, const StageCache& sc,
                 const std::vector<std::size_t>& rows, Matrix& xs, Vector& wts, std::vector<Eigen::Index>& start) {
  Eigen::Index total = 0;
  start.assign(rows.size() + 1, 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    start[r] = total;
    total += static_cast<Eigen::Index>(sc.nodes[rows[r]].points.size());
  }
  start[rows.size()] = total;
  xs.resize(total, layout.dx());
  wts.resize(total);
  std::vector<double> c(static_cast<std::size_t>(data.dc())), x(static_cast<std::size_t>(layout.dx()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto i = static_cast<Eigen::Index>(rows[r]);
    for (int j = 0; j < data.dc(); ++j) c[static_cast<std::size_t>(j)] = data.c(i, j);
    const auto& nd = sc.nodes[rows[r]];
    for (std::size_t m = 0; m < nd.points.size(); ++m) {
      layout.fill_x(c, nd.points[m], x);
      const Eigen::Index q = start[r] + static_cast<Eigen::Index>(m);
      for (int j = 0; j < layout.dx(); ++j) xs(q, j) = x[static_cast<std::size_t>(j)];
      wts(q) = nd.weights[m];
    }
  }
}

/// g(f, c_i) for the given rows by evaluating f on every node.
Vector g_values(const StructuralModel& f, const Dataset& data, const CmrLayout& layout, const StageCache& sc,
                const std::vector<std::size_t>& rows) {
  Matrix xs;
  Vector wts;
  std::vector<Eigen::Index> start;
  node_inputs(data, layout, sc, rows, xs, wts, start);
  const Vector fx = f.predict(xs);
  Vector g(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double v = 0.0;
    for (Eigen::Index q = start[r]; q < start[r + 1]; ++q) v += wts(q) * fx(q);
    g(static_cast<Eigen::Index>(r)) = v;
  }
  return g;
}

/// Pseudo-features m_i = E[phi(X) | c_i] under each row's nuisance density.
Matrix pseudo_features(const BasisMap& basis, const Dataset& data, const CmrLayout& layout, const StageCache& sc) {
  const std::size_t n = data.size();
  Matrix m(static_cast<Eigen::Index>(n), basis.output_dim());
  std::vector<double> c(static_cast<std::size_t>(data.dc())), x(static_cast<std::size_t>(layout.dx()));
  std::vector<double> out(static_cast<std::size_t>(basis.output_dim()));
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < data.dc(); ++j) c[static_cast<std::size_t>(j)] = data.c(static_cast<Eigen::Index>(i), j);
    layout.fill_x(c, 0.0, x);
    basis.expected(x, layout.endogenous, sc.nodes[i].points, sc.nodes[i].weights, out);
    for (int k = 0; k < basis.output_dim(); ++k) m(static_cast<Eigen::Index>(i), k) = out[static_cast<std::size_t>(k)];
  }
  return m;
}

Vector weighted_ridge(const Matrix& gram, const Vector& rhs, double lambda) {
  Matrix a = gram;
  a.diagonal().array() += lambda;
  if (lambda > 0.0) {
    Eigen::LDLT<Matrix> ldlt(a);
    if (ldlt.info() != Eigen::Success) throw FitError("closed-form solver: factorisation failed");
    return ldlt.solve(rhs);
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(a);
  if (qr.rank() < a.cols()) throw FitError("closed-form solver: singular system with lambda = 0");
  return qr.solve(rhs);
}

double weighted_sse(const Matrix& m, const Vector& t, const Vector& w, const Vector& theta) {
  return (w.array() * (t - m * theta).array().square()).sum();
}

struct ClosedFormResult {
  Vector theta;
  double lambda;
  double objective;
};

ClosedFormResult solve_closed_form(const Matrix& m, const StageCache& sc, const FoldPlan& plan, const FitConfig& cfg) {
  const Eigen::Index p = m.cols();
  const Matrix mw = m.array().colwise() * sc.weight.array();
  const Matrix gram = mw.transpose() * m;
  const Vector rhs = mw.transpose() * sc.target;
  const double scale = std::max(gram.trace() / static_cast<double>(p), 1e-300);

  double lambda = cfg.lambda;
  if (lambda < 0.0) {
    // Leave-one-fold-out choice of the relative penalty.
    const int k = plan.k();
    std::vector<Matrix> gv(static_cast<std::size_t>(k));
    std::vector<Vector> bv(static_cast<std::size_t>(k));
    for (int v = 0; v < k; ++v) {
      const auto& rows = plan.folds[static_cast<std::size_t>(v)];
      Matrix mv(static_cast<Eigen::Index>(rows.size()), p);
      Vector tv(static_cast<Eigen::Index>(rows.size())), wv(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        mv.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r]));
        tv(static_cast<Eigen::Index>(r)) = sc.target(static_cast<Eigen::Index>(rows[r]));
        wv(static_cast<Eigen::Index>(r)) = sc.weight(static_cast<Eigen::Index>(rows[r]));
      }
      const Matrix mvw = mv.array().colwise() * wv.array();
      gv[static_cast<std::size_t>(v)] = mvw.transpose() * mv;
      bv[static_cast<std::size_t>(v)] = mvw.transpose() * tv;
    }
    double best = std::numeric_limits<double>::infinity();
    lambda = cfg.lambda_grid.front();
    for (double rel : cfg.lambda_grid) {
      double loss = 0.0;
      for (int v = 0; v < k; ++v) {
        const auto& rows = plan.folds[static_cast<std::size_t>(v)];
        Vector theta;
        try {
          theta = weighted_ridge(gram - gv[static_cast<std::size_t>(v)], rhs - bv[static_cast<std::size_t>(v)], rel * scale);
        } catch (const FitError&) {
          loss = std::numeric_limits<double>::infinity();
          break;
        }
        for (std::size_t i : rows) {
          const double e = sc.target(static_cast<Eigen::Index>(i)) - m.row(static_cast<Eigen::Index>(i)).dot(theta);
          loss += sc.weight(static_cast<Eigen::Index>(i)) * e * e;
        }
      }
      if (loss < best) {
        best = loss;
        lambda = rel;
      }
    }
  }
  ClosedFormResult res;
  res.lambda = lambda;
  res.theta = weighted_ridge(gram, rhs, lambda * scale);
  res.objective = weighted_sse(m, sc.target, sc.weight, res.theta);
  if (!res.theta.allFinite() || !std::isfinite(res.objective)) throw FitError("closed-form solver: non-finite solution");
  return res;
}

double cache_objective(const StructuralModel& f, const Dataset& data, const CmrLayout& layout, const StageCache& sc,
                       const Matrix* features) {
  Vector g;
  if (features) {
    g = *features * f.theta();
  } else {
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    g = g_values(f, data, layout, sc, all);
  }
  return (sc.weight.array() * (sc.target - g).array().square()).sum();
}

void gradient_solver(FittedCMR& fit, const Dataset& data, const CmrLayout& layout, const StageCache& sc,
                     const CrossFitState& state, const FitConfig& cfg) {
  StructuralModel& f = fit.model;
  const bool linear = f.arch() == StructuralModel::Arch::kLinearBasis;
  Matrix features;
  if (linear) features = pseudo_features(f.basis(), data, layout, sc);
  const Matrix* fp = linear ? &features : nullptr;

  double obj = cache_objective(f, data, layout, sc, fp);
  if (!std::isfinite(obj)) throw FitError("gradient solver: non-finite objective at epoch 0");
  fit.trajectory.push_back(obj);
  Vector best_theta = f.theta();
  double best = obj;

  AdamW opt;
  opt.lr = cfg.lr;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.eps = cfg.adam_eps;
  opt.weight_decay = cfg.weight_decay;
  Rng rng(derive_seed(cfg.seed, kSolverStream));
  Vector theta = f.theta();
  const int n_groups = static_cast<int>(state.groups.size());

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Each group is cycled once without replacement; groups alternate.
    std::vector<std::vector<std::size_t>> order = state.groups;
    for (auto& o : order) {
      for (std::size_t i = o.size(); i > 1; --i) {
        std::swap(o[i - 1], o[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
      }
    }
    std::vector<std::size_t> pos(static_cast<std::size_t>(n_groups), 0);
    bool any = true;
    while (any) {
      any = false;
      for (int g = 0; g < n_groups; ++g) {
        auto& o = order[static_cast<std::size_t>(g)];
        std::size_t& at = pos[static_cast<std::size_t>(g)];
        if (at >= o.size()) continue;
        any = true;
        const std::size_t end = std::min(o.size(), at + static_cast<std::size_t>(cfg.batch_size));
        std::vector<std::size_t> batch(o.begin() + static_cast<std::ptrdiff_t>(at), o.begin() + static_cast<std::ptrdiff_t>(end));
        at = end;
        const double nb = static_cast<double>(batch.size());
        Vector grad;
        if (linear) {
          grad = Vector::Zero(theta.size());
          for (std::size_t i : batch) {
            const auto row = features.row(static_cast<Eigen::Index>(i));
            const double e = sc.target(static_cast<Eigen::Index>(i)) - row.dot(theta);
            grad -= (2.0 * e / nb) * row.transpose();
          }
        } else {
          Matrix xs;
          Vector wts;
          std::vector<Eigen::Index> start;
          node_inputs(data, layout, sc, batch, xs, wts, start);
          const Vector fx = f.predict(xs);
          Vector dl(xs.rows());
          for (std::size_t r = 0; r < batch.size(); ++r) {
            double gv = 0.0;
            for (Eigen::Index q = start[r]; q < start[r + 1]; ++q) gv += wts(q) * fx(q);
            const double e = sc.target(static_cast<Eigen::Index>(batch[r])) - gv;
            for (Eigen::Index q = start[r]; q < start[r + 1]; ++q) dl(q) = -2.0 * e * wts(q) / nb;
          }
          grad = f.gradient(xs, dl);
        }
        opt.step(theta, grad);
        f.set_theta(theta);
      }
    }
    obj = cache_objective(f, data, layout, sc, fp);
    if (!std::isfinite(obj) || !theta.allFinite()) {
      throw FitError("gradient solver: non-finite objective at epoch " + std::to_string(epoch));
    }
    fit.trajectory.push_back(obj);
    if (obj < best) {
      best = obj;
      best_theta = theta;
    }
    const int w = cfg.early_stop_window;
    if (epoch >= w) {
      const double before = fit.trajectory[fit.trajectory.size() - 1 - static_cast<std::size_t>(w)];
      const double rel = (before - obj) / std::max(std::abs(before), 1e-300);
      if (rel < cfg.early_stop_tol) break;
    }
  }
  f.set_theta(best_theta);
  fit.objective = best;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

/// Functional gradient boosting of the objective for a tree model. Each round
/// fits a tree to the row residuals broadcast to that row's nodes (weighted by
/// row and node weights), then sets all leaf values jointly by least squares
/// on the node-averaged leaf indicators and shrinks them.
void boosting_solver(FittedCMR& fit, const Dataset& data, const CmrLayout& layout, const StageCache& sc) {
  StructuralModel& f = fit.model;
  const auto& ts = f.tree_settings();
  const std::size_t n = data.size();
  Matrix xs;
  Vector node_w;
  std::vector<Eigen::Index> start;
  node_inputs(data, layout, sc, all_rows(n), xs, node_w, start);
  const Eigen::Index npts = xs.rows();
  std::vector<Eigen::Index> row_of(static_cast<std::size_t>(npts));
  Vector pt_w(npts);
  for (std::size_t i = 0; i < n; ++i) {
    for (Eigen::Index q = start[i]; q < start[i + 1]; ++q) {
      row_of[static_cast<std::size_t>(q)] = static_cast<Eigen::Index>(i);
      pt_w(q) = sc.weight(static_cast<Eigen::Index>(i)) * node_w(q);
    }
  }
  if (npts < 2 * ts.min_leaf) throw FitError("boosting solver: fewer node points than two leaves");
  const auto order = presort_columns(xs);

  TreeEnsemble ens;
  const double wsum = sc.weight.sum();
  ens.base = sc.weight.dot(sc.target) / wsum;
  Vector g = Vector::Constant(static_cast<Eigen::Index>(n), ens.base);
  Vector resid = sc.target - g;
  double obj = (sc.weight.array() * resid.array().square()).sum();
  fit.trajectory.push_back(obj);
  Vector pt_resp(npts);
  std::vector<int> leaf_of;

  for (int t = 0; t < ts.n_trees; ++t) {
    for (Eigen::Index q = 0; q < npts; ++q) pt_resp(q) = resid(row_of[static_cast<std::size_t>(q)]);
    const int root = grow_tree(ens, xs, order, pt_resp, &pt_w, ts.max_depth, ts.min_leaf, leaf_of);
    // Leaf slots and per-row node-weighted leaf membership.
    std::vector<int> slot(ens.nodes.size() - static_cast<std::size_t>(root), -1);
    int n_leaves = 0;
    for (std::size_t q = static_cast<std::size_t>(root); q < ens.nodes.size(); ++q) {
      if (ens.nodes[q].feature < 0) slot[q - static_cast<std::size_t>(root)] = n_leaves++;
    }
    Matrix a = Matrix::Zero(static_cast<Eigen::Index>(n), n_leaves);
    for (Eigen::Index q = 0; q < npts; ++q) {
      a(row_of[static_cast<std::size_t>(q)], slot[static_cast<std::size_t>(leaf_of[static_cast<std::size_t>(q)] - root)]) +=
          node_w(q);
    }
    const Matrix aw = a.array().colwise() * sc.weight.array();
    Matrix gram = aw.transpose() * a;
    const Vector rhs = aw.transpose() * resid;
    gram.diagonal().array() += 1e-10 * std::max(gram.trace() / n_leaves, 1e-300);
    const Vector gamma = ts.learning_rate * gram.ldlt().solve(rhs);
    if (!gamma.allFinite()) throw FitError("boosting solver: non-finite leaf values at tree " + std::to_string(t + 1));
    for (std::size_t q = static_cast<std::size_t>(root); q < ens.nodes.size(); ++q) {
      const int k = slot[q - static_cast<std::size_t>(root)];
      if (k >= 0) ens.nodes[q].value = gamma(k);
    }
    const Vector step = a * gamma;
    g += step;
    resid -= step;
    obj = (sc.weight.array() * resid.array().square()).sum();
    if (!std::isfinite(obj)) throw FitError("boosting solver: non-finite objective at tree " + std::to_string(t + 1));
    fit.trajectory.push_back(obj);
  }
  f.set_trees(std::move(ens));
  fit.objective = obj;
}

}  // namespace

std::uint64_t node_seed(const FitConfig& cfg, std::size_t row) {
  return derive_seed(derive_seed(cfg.seed, kNodeStream), static_cast<std::uint64_t>(row));
}

void FitConfig::validate() const {
  if (k_folds < 2) throw ArgumentError("fit.k_folds: must be >= 2");
  if (mc_draws < 1) throw ArgumentError("fit.mc_draws: must be >= 1");
  if (batch_size < 1) throw ArgumentError("fit.batch_size: must be >= 1");
  if (epochs < 0) throw ArgumentError("fit.epochs: must be >= 0");
  if (!(lr > 0.0)) throw ArgumentError("fit.lr: must be > 0");
  if (early_stop_window < 1) throw ArgumentError("fit.early_stop_window: must be >= 1");
  if (solver != "closed-form" && solver != "gradient") {
    throw ArgumentError("fit.solver: unknown solver '" + solver + "'");
  }
  if (lambda < 0.0 && lambda_grid.empty()) throw ArgumentError("fit.lambda_grid: empty with automatic lambda");
  for (double l : lambda_grid) {
    if (!(l >= 0.0)) throw ArgumentError("fit.lambda_grid: entries must be >= 0");
  }
}

Json FitConfig::to_json() const {
  return {{"k_folds", k_folds},         {"mc_draws", mc_draws},
          {"batch_size", batch_size},   {"epochs", epochs},
          {"lr", lr},                   {"beta1", beta1},
          {"beta2", beta2},             {"adam_eps", adam_eps},
          {"weight_decay", weight_decay}, {"early_stop_tol", early_stop_tol},
          {"early_stop_window", early_stop_window}, {"score", to_string(score)},
          {"solver", solver},           {"lambda", lambda},
          {"lambda_grid", lambda_grid}, {"seed", seed}};
}

FitConfig FitConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ArgumentError("fit: expected an object");
  static const std::vector<std::string> known{"k_folds", "mc_draws", "batch_size", "epochs", "lr", "beta1", "beta2",
                                              "adam_eps", "weight_decay", "early_stop_tol", "early_stop_window",
                                              "score", "solver", "lambda", "lambda_grid", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ArgumentError("fit." + key + ": unknown field");
  }
  FitConfig c;
  try {
    c.k_folds = j.value("k_folds", c.k_folds);
    c.mc_draws = j.value("mc_draws", c.mc_draws);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.early_stop_tol = j.value("early_stop_tol", c.early_stop_tol);
    c.early_stop_window = j.value("early_stop_window", c.early_stop_window);
    if (j.contains("score")) c.score = parse_score_kind(j.at("score").get<std::string>());
    c.solver = j.value("solver", c.solver);
    c.lambda = j.value("lambda", c.lambda);
    c.lambda_grid = j.value("lambda_grid", c.lambda_grid);
    c.seed = j.value("seed", c.seed);
  } catch (const Json::exception& e) {
    throw ArgumentError(std::string("fit: ") + e.what());
  }
  c.validate();
  return c;
}

Json NuisanceSpecs::to_json() const { return {{"s", s.to_json()}, {"density", density.to_json()}}; }

NuisanceSpecs NuisanceSpecs::from_json(const Json& j) {
  NuisanceSpecs n;
  if (j.contains("s")) n.s = RegressorSpec::from_json(j.at("s"));
  if (j.contains("density")) n.density = DensitySpec::from_json(j.at("density"));
  return n;
}

NuisanceFactory make_nuisance_factory(const NuisanceSpecs& specs, std::uint64_t seed) {
  return [specs, seed](const Dataset& train, int task) {
    const auto t = static_cast<std::uint64_t>(task + 1);
    RegressorSpec s = specs.s;
    s.seed = derive_seed(seed, 3 * t);
    DensitySpec d = specs.density;
    d.seed = derive_seed(seed, 3 * t + 1);
    d.location.seed = derive_seed(seed, 3 * t + 2);
    NuisancePair np;
    np.s = fit_regressor(s, train.c, train.y);
    np.density = fit_conditional_density(d, train.c, train.x.col(train.endogenous_column()));
    return np;
  };
}

bool CrossFitState::audit() const {
  if (groups.size() != nuisances.size() || groups.size() != train_indices.size()) return false;
  const std::size_t n = plan.n_total;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    std::vector<char> in_group(n, 0);
    for (std::size_t i : groups[g]) in_group[i] = 1;
    if (cross_fitted) {
      for (std::size_t i : train_indices[g]) {
        if (in_group[i]) return false;
      }
      if (train_indices[g].size() + groups[g].size() != n) return false;
    } else if (train_indices[g].size() != n) {
      return false;
    }
  }
  return true;
}

Json CrossFitState::audit_json() const {
  Json folds = Json::array();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    folds.push_back({{"group", g}, {"eval_rows", groups[g].size()}, {"train_rows", train_indices[g].size()}});
  }
  return {{"mode", cross_fitted ? "cross-fitted" : "full-sample"}, {"groups", folds},
          {"nuisance_fits", fit_count}, {"passed", audit()}};
}

CrossFitState crossfit_nuisances(const Dataset& data, const FitConfig& cfg, const NuisanceSpecs& specs) {
  cfg.validate();
  const FoldPlan plan = make_fold_plan(data.size(), cfg.k_folds, cfg.seed);
  const int need = min_rows(specs);
  for (int k = 0; k < plan.k(); ++k) {
    const std::size_t have = data.size() - plan.folds[static_cast<std::size_t>(k)].size();
    if (have < static_cast<std::size_t>(need)) {
      throw FitError("crossfit: fold " + std::to_string(k) + " complement has " + std::to_string(have) +
                     " rows, estimators need " + std::to_string(need));
    }
  }
  return crossfit_nuisances(data, cfg, make_nuisance_factory(specs, cfg.seed));
}

CrossFitState crossfit_nuisances(const Dataset& data, const FitConfig& cfg, const NuisanceFactory& factory) {
  cfg.validate();
  data.validate();
  CrossFitState st;
  st.plan = make_fold_plan(data.size(), cfg.k_folds, cfg.seed);
  st.cross_fitted = true;
  for (int k = 0; k < st.plan.k(); ++k) {
    auto train = st.plan.complement(k);
    const Dataset sub = data.rows(train);
    try {
      st.nuisances.push_back(factory(sub, k));
    } catch (const FitError& e) {
      throw FitError("crossfit: fold " + std::to_string(k) + ": " + e.what());
    }
    ++st.fit_count;
    st.groups.push_back(st.plan.folds[static_cast<std::size_t>(k)]);
    st.train_indices.push_back(std::move(train));
  }
  return st;
}

CrossFitState full_sample_nuisances(const Dataset& data, const FitConfig& cfg, const NuisanceFactory& factory) {
  cfg.validate();
  data.validate();
  CrossFitState st;
  st.plan = make_fold_plan(data.size(), cfg.k_folds, cfg.seed);
  st.cross_fitted = false;
  st.nuisances.push_back(factory(data, -1));
  st.fit_count = 1;
  st.groups.push_back(all_rows(data.size()));
  st.train_indices.push_back(all_rows(data.size()));
  return st;
}

double empirical_objective(const Dataset& data, const CrossFitState& state, const StructuralModel& f,
                           const FitConfig& cfg, ScoreKind kind) {
  const CmrLayout layout = CmrLayout::of(data);
  const StageCache sc = build_cache(data, state, cfg, kind);
  return cache_objective(f, data, layout, sc, nullptr);
}

FittedCMR fit_second_stage(const Dataset& data, const CrossFitState& state, const FitConfig& cfg,
                           const StructuralModel& init, ScoreKind kind, const std::string& method) {
  cfg.validate();
  data.validate();
  if (state.plan.n_total != data.size()) throw ArgumentError("second stage: fold plan does not match the data");
  const CmrLayout layout = CmrLayout::of(data);
  if (init.input_dim() != data.dx()) throw ShapeError("second stage: structural model width differs from x");
  const StageCache sc = build_cache(data, state, cfg, kind);

  FittedCMR fit;
  fit.model = init;
  fit.method = method;
  fit.score = kind;
  fit.config = cfg;
  fit.nuisance_fits = state.fit_count;
  fit.audit = state.audit_json();
  fit.seeds = {{"seed", cfg.seed},
               {"fold_plan", "make_fold_plan(n, k_folds, seed)"},
               {"node_seed", "derive_seed(derive_seed(seed, 0x6e6f6465), row)"},
               {"solver_seed", "derive_seed(seed, 0x736f6c76)"}};

  if (init.arch() == StructuralModel::Arch::kBoostedTrees) {
    boosting_solver(fit, data, layout, sc);
    return fit;
  }
  if (cfg.solver == "closed-form") {
    if (init.arch() != StructuralModel::Arch::kLinearBasis) {
      throw ArgumentError("fit.solver: closed-form requires a linear-in-basis structural model");
    }
    const Matrix m = pseudo_features(init.basis(), data, layout, sc);
    const ClosedFormResult r = solve_closed_form(m, sc, state.plan, cfg);
    fit.model.set_theta(r.theta);
    fit.lambda = r.lambda;
    fit.objective = r.objective;
    fit.trajectory = {r.objective};
    return fit;
  }
  gradient_solver(fit, data, layout, sc, state, cfg);
  return fit;
}

FittedCMR fit_dml_cmr(const Dataset& data, const CrossFitState& state, const FitConfig& cfg,
                      const StructuralModel& init) {
  if (!state.cross_fitted) throw ArgumentError("fit_dml_cmr: nuisances are not cross-fitted");
  return fit_second_stage(data, state, cfg, init, cfg.score, "dml-cmr");
}

FittedCMR fit_ce_dml_cmr(const Dataset& data, const FitConfig& cfg, const StructuralModel& init,
                         const NuisanceFactory& factory) {
  const CrossFitState st = full_sample_nuisances(data, cfg, factory);
  return fit_second_stage(data, st, cfg, init, ScoreKind::kOrthogonal, "ce-dml-cmr");
}

FittedCMR fit_ce_dml_cmr(const Dataset& data, const FitConfig& cfg, const StructuralModel& init,
                         const NuisanceSpecs& specs) {
  return fit_ce_dml_cmr(data, cfg, init, make_nuisance_factory(specs, cfg.seed));
}

FittedCMR fit_naive_two_stage(const Dataset& data, const FitConfig& cfg, const StructuralModel& init,
                              const NuisanceFactory& factory) {
  const CrossFitState st = full_sample_nuisances(data, cfg, factory);
  return fit_second_stage(data, st, cfg, init, ScoreKind::kNaive, "naive-two-stage");
}

FittedCMR fit_naive_two_stage(const Dataset& data, const FitConfig& cfg, const StructuralModel& init,
                              const NuisanceSpecs& specs) {
  // Only the density is needed; the outcome regression is never fitted.
  const DensitySpec dspec = specs.density;
  const std::uint64_t seed = cfg.seed;
  NuisanceFactory factory = [dspec, seed](const Dataset& train, int task) {
    DensitySpec d = dspec;
    const auto t = static_cast<std::uint64_t>(task + 1);
    d.seed = derive_seed(seed, 3 * t + 1);
    d.location.seed = derive_seed(seed, 3 * t + 2);
    NuisancePair np;
    np.density = fit_conditional_density(d, train.c, train.x.col(train.endogenous_column()));
    return np;
  };
  return fit_naive_two_stage(data, cfg, init, factory);
}

Vector predict_structural(const FittedCMR& fit, const Matrix& x_grid) { return fit.model.predict(x_grid); }

Json FittedCMR::to_json() const {
  return {{"format", kFitFormat},   {"version", kModelFormatVersion}, {"method", method},
          {"score", to_string(score)}, {"model", model.to_json()},     {"trajectory", trajectory},
          {"objective", objective}, {"lambda", lambda},               {"config", config.to_json()},
          {"seeds", seeds},         {"audit", audit},                 {"nuisance_fits", nuisance_fits}};
}

FittedCMR FittedCMR::from_json(const Json& j) {
  if (j.value("format", "") != kFitFormat) throw ArgumentError("FittedCMR: not a fitted-model document");
  if (j.value("version", 0) != kModelFormatVersion) throw ArgumentError("FittedCMR: unsupported version");
  FittedCMR f;
  f.method = j.at("method").get<std::string>();
  f.score = parse_score_kind(j.at("score").get<std::string>());
  f.model = StructuralModel::from_json(j.at("model"));
  f.trajectory = j.at("trajectory").get<std::vector<double>>();
  f.objective = j.at("objective").get<double>();
  f.lambda = j.at("lambda").get<double>();
  f.config = FitConfig::from_json(j.at("config"));
  f.seeds = j.at("seeds");
  f.audit = j.at("audit");
  f.nuisance_fits = j.at("nuisance_fits").get<int>();
  return f;
}

}  // namespace dmlcmr

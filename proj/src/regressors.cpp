#include <algorithm>
#include <cmath>
#include <numeric>

#include "dmlcmr/error.hpp"
#include "dmlcmr/estimators.hpp"
#include "dmlcmr/mlp.hpp"
#include "dmlcmr/trees.hpp"

namespace dmlcmr {

namespace {

constexpr const char* kRegressorFormat = "dmlcmr.regressor";

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

double mse(const Vector& a, const Vector& b) { return (a - b).squaredNorm() / static_cast<double>(a.size()); }

void check_xy(const Matrix& x, const Vector& y) {
  if (x.rows() != y.size()) throw ShapeError("fit_regressor: inputs and targets differ in row count");
  if (x.rows() < 1) throw FitError("fit_regressor: no rows");
  if (x.cols() < 1) throw ShapeError("fit_regressor: inputs have no columns");
  if (!x.allFinite() || !y.allFinite()) throw FitError("fit_regressor: non-finite inputs or targets");
}

// ---------------------------------------------------------------------------
// ridge
// ---------------------------------------------------------------------------

class RidgeRegressor final : public Regressor {
 public:
  RidgeRegressor(RegressorSpec spec, BasisMap basis, double intercept, Vector coef, int d)
      : spec_(std::move(spec)), basis_(std::move(basis)), intercept_(intercept), coef_(std::move(coef)) {
    input_dim_ = d;
  }
  std::string kind() const override { return "ridge"; }
  const BasisMap& basis() const { return basis_; }
  double intercept() const { return intercept_; }
  const Vector& coef() const { return coef_; }
  void set_loss(std::vector<double> l) { training_loss_ = std::move(l); }

 protected:
  Vector predict_impl(const Matrix& x) const override {
    if (x.rows() == 0) return Vector(0);
    Vector out = basis_.transform(x) * coef_;
    out.array() += intercept_;
    return out;
  }
  Json hyperparams_json() const override { return spec_.to_json(); }
  Json state_json() const override {
    return {{"basis", basis_.to_json()}, {"intercept", intercept_}, {"coef", to_vec(coef_)},
            {"training_loss", training_loss_}};
  }

 private:
  RegressorSpec spec_;
  BasisMap basis_;
  double intercept_;
  Vector coef_;
};

RegressorPtr fit_ridge(const RegressorSpec& spec, const Matrix& x, const Vector& y) {
  BasisMap basis = spec.basis ? BasisMap::from_json(*spec.basis) : BasisMap::identity(static_cast<int>(x.cols()));
  if (basis.input_dim() != x.cols()) throw ShapeError("ridge: basis input dimension differs from inputs");
  if (spec.standardise_basis) basis.adapt_to(x);
  const Matrix phi = basis.transform(x);
  const Eigen::Index p = phi.cols();
  const Eigen::RowVectorXd mu = phi.colwise().mean();
  const double ybar = y.mean();
  Matrix pc = phi.rowwise() - mu;
  const Vector yc = y.array() - ybar;

  // Columns constant on the sample are absorbed by the intercept.
  std::vector<Eigen::Index> active;
  for (Eigen::Index k = 0; k < p; ++k) {
    if (pc.col(k).cwiseAbs().maxCoeff() > 0.0) active.push_back(k);
  }
  Vector coef = Vector::Zero(p);
  if (!active.empty()) {
    Matrix a(pc.rows(), static_cast<Eigen::Index>(active.size()));
    for (std::size_t k = 0; k < active.size(); ++k) a.col(static_cast<Eigen::Index>(k)) = pc.col(active[k]);
    Vector beta;
    if (spec.lambda == 0.0) {
      Eigen::ColPivHouseholderQR<Matrix> qr(a);
      if (qr.rank() < a.cols()) {
        throw FitError("ridge: design is rank deficient with lambda = 0");
      }
      beta = qr.solve(yc);
    } else {
      Matrix g = a.transpose() * a;
      g.diagonal().array() += spec.lambda;
      Eigen::LLT<Matrix> llt(g);
      if (llt.info() != Eigen::Success) throw FitError("ridge: regularised Gram matrix is not positive definite");
      beta = llt.solve(a.transpose() * yc);
    }
    for (std::size_t k = 0; k < active.size(); ++k) coef(active[k]) = beta(static_cast<Eigen::Index>(k));
  }
  const double intercept = ybar - mu.dot(coef);
  auto model = std::make_shared<RidgeRegressor>(spec, std::move(basis), intercept, std::move(coef),
                                                static_cast<int>(x.cols()));
  const double loss = mse(model->predict(x), y);
  if (!std::isfinite(loss)) throw FitError("ridge: training loss is not finite");
  model->set_loss({loss});
  return model;
}

// ---------------------------------------------------------------------------
// gradient-boosted trees (squared loss, exact greedy splits)
// ---------------------------------------------------------------------------

class BoostedTrees final : public Regressor {
 public:
  BoostedTrees(RegressorSpec spec, int d) : spec_(std::move(spec)) { input_dim_ = d; }
  std::string kind() const override { return "gradient-boosted-trees"; }

  TreeEnsemble trees;
  std::vector<double>& loss() { return training_loss_; }

 protected:
  Vector predict_impl(const Matrix& x) const override { return trees.predict(x); }
  Json hyperparams_json() const override { return spec_.to_json(); }
  Json state_json() const override {
    Json j = trees.to_json();
    j["training_loss"] = training_loss_;
    return j;
  }

 private:
  RegressorSpec spec_;
};

RegressorPtr fit_gbt(const RegressorSpec& spec, const Matrix& x, const Vector& y) {
  const Eigen::Index n = x.rows();
  if (n < spec.min_leaf) {
    throw FitError("gradient-boosted-trees: " + std::to_string(n) + " rows is below min_leaf " +
                   std::to_string(spec.min_leaf));
  }
  bool identical = true;
  for (Eigen::Index i = 1; i < n && identical; ++i) identical = (x.row(i) == x.row(0));
  if (identical) throw FitError("gradient-boosted-trees: all input rows are identical");

  const auto order = presort_columns(x);
  auto model = std::make_shared<BoostedTrees>(spec, static_cast<int>(x.cols()));
  TreeEnsemble& ens = model->trees;
  ens.base = y.mean();
  Vector resid = y.array() - ens.base;
  model->loss().push_back(resid.squaredNorm() / static_cast<double>(n));
  std::vector<int> leaf_of;

  for (int tree = 0; tree < spec.n_trees; ++tree) {
    const int root = grow_tree(ens, x, order, resid, nullptr, spec.max_depth, spec.min_leaf, leaf_of);

    // Leaf values: shrunken mean residual.
    const int n_nodes = static_cast<int>(ens.nodes.size()) - root;
    std::vector<double> cnt(static_cast<std::size_t>(n_nodes), 0.0), sum(cnt.size(), 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto q = static_cast<std::size_t>(leaf_of[static_cast<std::size_t>(i)] - root);
      cnt[q] += 1.0;
      sum[q] += resid(i);
    }
    for (int q = 0; q < n_nodes; ++q) {
      auto& nd = ens.nodes[static_cast<std::size_t>(root + q)];
      if (nd.feature < 0 && cnt[static_cast<std::size_t>(q)] > 0) {
        nd.value = spec.learning_rate * sum[static_cast<std::size_t>(q)] / cnt[static_cast<std::size_t>(q)];
      }
    }
    for (Eigen::Index i = 0; i < n; ++i) resid(i) -= ens.nodes[static_cast<std::size_t>(leaf_of[static_cast<std::size_t>(i)])].value;
    const double loss = resid.squaredNorm() / static_cast<double>(n);
    if (!std::isfinite(loss)) throw FitError("gradient-boosted-trees: non-finite loss at tree " + std::to_string(tree));
    model->loss().push_back(loss);
  }
  return model;
}

// ---------------------------------------------------------------------------
// feedforward net
// ---------------------------------------------------------------------------

class NetRegressor final : public Regressor {
 public:
  NetRegressor(RegressorSpec spec, Mlp net, Vector x_mean, Vector x_sd, double y_mean, double y_sd)
      : spec_(std::move(spec)), net_(std::move(net)), x_mean_(std::move(x_mean)), x_sd_(std::move(x_sd)),
        y_mean_(y_mean), y_sd_(y_sd) {
    input_dim_ = net_.input_dim();
  }
  std::string kind() const override { return "feedforward-net"; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  std::vector<double>& loss() { return training_loss_; }

  Matrix scale_inputs(const Matrix& x) const {
    return (x.rowwise() - x_mean_.transpose()).array().rowwise() / x_sd_.transpose().array();
  }
  double y_mean() const { return y_mean_; }
  double y_sd() const { return y_sd_; }

 protected:
  Vector predict_impl(const Matrix& x) const override {
    if (x.rows() == 0) return Vector(0);
    Vector out = net_.forward(scale_inputs(x)).col(0);
    return (out.array() * y_sd_ + y_mean_).matrix();
  }
  Json hyperparams_json() const override { return spec_.to_json(); }
  Json state_json() const override {
    return {{"net", net_.to_json()}, {"x_mean", to_vec(x_mean_)}, {"x_sd", to_vec(x_sd_)},
            {"y_mean", y_mean_}, {"y_sd", y_sd_}, {"training_loss", training_loss_}};
  }

 private:
  RegressorSpec spec_;
  Mlp net_;
  Vector x_mean_, x_sd_;
  double y_mean_, y_sd_;
};

void column_moments(const Matrix& x, Vector& mean, Vector& sd) {
  mean = x.colwise().mean().transpose();
  sd.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double v = (x.col(j).array() - mean(j)).square().mean();
    sd(j) = v > 1e-24 ? std::sqrt(v) : 1.0;
  }
}

RegressorPtr fit_net(const RegressorSpec& spec, const Matrix& x, const Vector& y) {
  Vector xm, xs;
  column_moments(x, xm, xs);
  const double ym = y.mean();
  const double yv = (y.array() - ym).square().mean();
  const double ys = yv > 1e-24 ? std::sqrt(yv) : 1.0;

  std::vector<int> sizes{static_cast<int>(x.cols())};
  sizes.insert(sizes.end(), spec.hidden.begin(), spec.hidden.end());
  sizes.push_back(1);
  Mlp net(sizes);
  Rng rng(spec.seed);
  net.init(rng);
  auto model = std::make_shared<NetRegressor>(spec, std::move(net), xm, xs, ym, ys);
  const Matrix xz = model->scale_inputs(x);
  const Vector yz = (y.array() - ym) / ys;
  const Eigen::Index n = x.rows();

  AdamW opt;
  opt.lr = spec.lr;
  opt.weight_decay = spec.weight_decay;
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  const Eigen::Index bs = std::max<Eigen::Index>(1, std::min<Eigen::Index>(spec.batch_size, n));
  model->loss().push_back(mse(model->predict(x), y));
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    for (std::size_t i = perm.size(); i > 1; --i) {
      std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    for (Eigen::Index start = 0; start < n; start += bs) {
      const Eigen::Index m = std::min(bs, n - start);
      Matrix xb(m, x.cols());
      Vector yb(m);
      for (Eigen::Index r = 0; r < m; ++r) {
        xb.row(r) = xz.row(perm[static_cast<std::size_t>(start + r)]);
        yb(r) = yz(perm[static_cast<std::size_t>(start + r)]);
      }
      Mlp::Cache cache;
      const Matrix out = model->net().forward(xb, cache);
      const Matrix dout = (2.0 / static_cast<double>(m)) * (out.col(0) - yb);
      const Vector g = model->net().backward(cache, dout);
      opt.step(model->net().params(), g);
    }
    const double loss = mse(model->predict(x), y);
    if (!std::isfinite(loss)) throw FitError("feedforward-net: non-finite loss at epoch " + std::to_string(epoch));
    model->loss().push_back(loss);
  }
  return model;
}

// ---------------------------------------------------------------------------
// constant / analytic
// ---------------------------------------------------------------------------

class ConstantRegressor final : public Regressor {
 public:
  ConstantRegressor(int d, double v) : value_(v) {
    input_dim_ = d;
    training_loss_ = {0.0};
  }
  std::string kind() const override { return "constant"; }
  void set_loss(double l) { training_loss_ = {l}; }

 protected:
  Vector predict_impl(const Matrix& x) const override { return Vector::Constant(x.rows(), value_); }
  Json hyperparams_json() const override { return {{"kind", "constant"}}; }
  Json state_json() const override { return {{"value", value_}, {"training_loss", training_loss_}}; }

 private:
  double value_;
};

class AnalyticRegressor final : public Regressor {
 public:
  AnalyticRegressor(int d, std::function<double(std::span<const double>)> fn) : fn_(std::move(fn)) {
    input_dim_ = d;
    training_loss_ = {0.0};
  }
  std::string kind() const override { return "analytic"; }

 protected:
  Vector predict_impl(const Matrix& x) const override {
    Vector out(x.rows());
    std::vector<double> row(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = x(i, j);
      out(i) = fn_(row);
    }
    return out;
  }
  Json hyperparams_json() const override { return {{"kind", "analytic"}}; }
  Json state_json() const override { throw Error("analytic regressors cannot be serialised"); }

 private:
  std::function<double(std::span<const double>)> fn_;
};

}  // namespace

// ---------------------------------------------------------------------------

Json RegressorSpec::to_json() const {
  Json j{{"kind", kind}};
  if (kind == "ridge") {
    j["lambda"] = lambda;
    if (basis) j["basis"] = *basis;
    j["standardise_basis"] = standardise_basis;
  } else if (kind == "gradient-boosted-trees") {
    j["n_trees"] = n_trees;
    j["learning_rate"] = learning_rate;
    j["max_depth"] = max_depth;
    j["min_leaf"] = min_leaf;
  } else if (kind == "feedforward-net") {
    j["hidden"] = hidden;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["weight_decay"] = weight_decay;
    j["seed"] = seed;
  }
  return j;
}

RegressorSpec RegressorSpec::from_json(const Json& j) {
  if (!j.is_object()) throw ArgumentError("regressor: expected an object");
  RegressorSpec s;
  s.kind = j.value("kind", s.kind);
  if (s.kind != "ridge" && s.kind != "gradient-boosted-trees" && s.kind != "feedforward-net" &&
      s.kind != "constant") {
    throw ArgumentError("regressor.kind: unknown kind '" + s.kind + "'");
  }
  s.lambda = j.value("lambda", s.lambda);
  if (j.contains("basis")) s.basis = j.at("basis");
  s.standardise_basis = j.value("standardise_basis", s.standardise_basis);
  s.n_trees = j.value("n_trees", s.n_trees);
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.max_depth = j.value("max_depth", s.max_depth);
  s.min_leaf = j.value("min_leaf", s.min_leaf);
  s.hidden = j.value("hidden", s.hidden);
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.lr = j.value("lr", s.lr);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.seed = j.value("seed", s.seed);
  if (!(s.lambda >= 0.0)) throw ArgumentError("regressor.lambda: must be >= 0");
  if (s.n_trees < 0) throw ArgumentError("regressor.n_trees: must be >= 0");
  if (!(s.learning_rate > 0.0 && s.learning_rate <= 1.0)) throw ArgumentError("regressor.learning_rate: must lie in (0, 1]");
  if (s.max_depth < 1) throw ArgumentError("regressor.max_depth: must be >= 1");
  if (s.min_leaf < 1) throw ArgumentError("regressor.min_leaf: must be >= 1");
  if (s.epochs < 0) throw ArgumentError("regressor.epochs: must be >= 0");
  if (s.batch_size < 1) throw ArgumentError("regressor.batch_size: must be >= 1");
  if (!(s.lr > 0.0)) throw ArgumentError("regressor.lr: must be > 0");
  for (int h : s.hidden) {
    if (h < 1) throw ArgumentError("regressor.hidden: widths must be >= 1");
  }
  return s;
}

Vector Regressor::predict(const Matrix& x) const {
  if (x.cols() != input_dim_) {
    throw ShapeError("predict: input width " + std::to_string(x.cols()) + " != training width " +
                     std::to_string(input_dim_));
  }
  return predict_impl(x);
}

double Regressor::predict_one(std::span<const double> x) const {
  Matrix m(1, static_cast<Eigen::Index>(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) m(0, static_cast<Eigen::Index>(j)) = x[j];
  return predict(m)(0);
}

Json Regressor::to_json() const {
  return {{"format", kRegressorFormat}, {"version", kModelFormatVersion}, {"kind", kind()},
          {"input_dim", input_dim_},    {"hyperparams", hyperparams_json()}, {"state", state_json()}};
}

RegressorPtr fit_regressor(const RegressorSpec& spec, const Matrix& x, const Vector& y) {
  check_xy(x, y);
  if (spec.kind == "ridge") return fit_ridge(spec, x, y);
  if (spec.kind == "gradient-boosted-trees") return fit_gbt(spec, x, y);
  if (spec.kind == "feedforward-net") return fit_net(spec, x, y);
  if (spec.kind == "constant") {
    auto m = std::make_shared<ConstantRegressor>(static_cast<int>(x.cols()), y.mean());
    m->set_loss((y.array() - y.mean()).square().mean());
    return m;
  }
  throw ArgumentError("regressor.kind: unknown kind '" + spec.kind + "'");
}

RegressorPtr load_regressor(const Json& j) {
  if (j.value("format", "") != kRegressorFormat) throw ArgumentError("load_regressor: not a regressor document");
  if (j.value("version", 0) != kModelFormatVersion) throw ArgumentError("load_regressor: unsupported version");
  const auto kind = j.at("kind").get<std::string>();
  const int d = j.at("input_dim").get<int>();
  const Json& st = j.at("state");
  const auto loss = st.value("training_loss", std::vector<double>{});
  if (kind == "ridge") {
    auto spec = RegressorSpec::from_json(j.at("hyperparams"));
    auto m = std::make_shared<RidgeRegressor>(spec, BasisMap::from_json(st.at("basis")),
                                              st.at("intercept").get<double>(),
                                              from_vec(st.at("coef").get<std::vector<double>>()), d);
    m->set_loss(loss);
    return m;
  }
  if (kind == "gradient-boosted-trees") {
    auto m = std::make_shared<BoostedTrees>(RegressorSpec::from_json(j.at("hyperparams")), d);
    m->trees = TreeEnsemble::from_json(st);
    m->loss() = loss;
    return m;
  }
  if (kind == "feedforward-net") {
    auto m = std::make_shared<NetRegressor>(RegressorSpec::from_json(j.at("hyperparams")), Mlp::from_json(st.at("net")),
                                            from_vec(st.at("x_mean").get<std::vector<double>>()),
                                            from_vec(st.at("x_sd").get<std::vector<double>>()),
                                            st.at("y_mean").get<double>(), st.at("y_sd").get<double>());
    m->loss() = loss;
    return m;
  }
  if (kind == "constant") {
    auto m = std::make_shared<ConstantRegressor>(d, st.at("value").get<double>());
    if (!loss.empty()) m->set_loss(loss.front());
    return m;
  }
  throw ArgumentError("load_regressor: unknown kind '" + kind + "'");
}

RegressorPtr make_analytic_regressor(int input_dim, std::function<double(std::span<const double>)> fn) {
  return std::make_shared<AnalyticRegressor>(input_dim, std::move(fn));
}

RegressorPtr make_constant_regressor(int input_dim, double value) {
  return std::make_shared<ConstantRegressor>(input_dim, value);
}

std::optional<RidgeView> ridge_view(const Regressor& r) {
  const auto* p = dynamic_cast<const RidgeRegressor*>(&r);
  if (!p) return std::nullopt;
  return RidgeView{&p->basis(), p->intercept(), &p->coef()};
}

Vector feedforward_params(const Regressor& r) {
  const auto* p = dynamic_cast<const NetRegressor*>(&r);
  if (!p) throw ArgumentError("feedforward_params: not a feedforward-net regressor");
  return p->net().params();
}

NetGradient feedforward_loss_gradient(const Regressor& r, const Vector& params, const Matrix& x, const Vector& y) {
  const auto* p = dynamic_cast<const NetRegressor*>(&r);
  if (!p) throw ArgumentError("feedforward_loss_gradient: not a feedforward-net regressor");
  Mlp net = p->net();
  if (params.size() != net.num_params()) throw ShapeError("feedforward_loss_gradient: parameter length mismatch");
  net.params() = params;
  const Matrix xz = p->scale_inputs(x);
  const Vector yz = (y.array() - p->y_mean()) / p->y_sd();
  Mlp::Cache cache;
  const Vector out = net.forward(xz, cache).col(0);
  const Vector r_ = out - yz;
  const double n = static_cast<double>(x.rows());
  const Matrix dout = (2.0 / n) * r_;
  return {r_.squaredNorm() / n, net.backward(cache, dout)};
}

}  // namespace dmlcmr

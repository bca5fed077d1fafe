#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "dmlcmr/error.hpp"
#include "dmlcmr/estimators.hpp"
#include "dmlcmr/mlp.hpp"

namespace dmlcmr {

namespace {

constexpr const char* kDensityFormat = "dmlcmr.density";
const double kLogSqrt2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }
Vector from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

double softplus(double r) { return r > 30.0 ? r : std::log1p(std::exp(r)); }
double sigmoid(double r) { return 1.0 / (1.0 + std::exp(-r)); }

double log_sum_exp(const double* v, int m) {
  double mx = v[0];
  for (int j = 1; j < m; ++j) mx = std::max(mx, v[j]);
  double s = 0.0;
  for (int j = 0; j < m; ++j) s += std::exp(v[j] - mx);
  return mx + std::log(s);
}

double mixture_log_pdf(const GaussianMixtureParams& p, double x) {
  std::vector<double> terms;
  terms.reserve(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p.weights[j] <= 0.0) continue;
    const double z = (x - p.means[j]) / p.stds[j];
    terms.push_back(std::log(p.weights[j]) - kLogSqrt2Pi - std::log(p.stds[j]) - 0.5 * z * z);
  }
  return log_sum_exp(terms.data(), static_cast<int>(terms.size()));
}

void moments(const Matrix& x, Vector& mean, Vector& sd) {
  mean = x.colwise().mean().transpose();
  sd.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double v = (x.col(j).array() - mean(j)).square().mean();
    sd(j) = v > 1e-24 ? std::sqrt(v) : 1.0;
  }
}

void check_cx(const Matrix& c, const Vector& x) {
  if (c.rows() != x.size()) throw ShapeError("fit_conditional_density: conditioning and responses differ in rows");
  if (c.rows() < 2) throw FitError("fit_conditional_density: need at least 2 rows");
  if (c.cols() < 1) throw ShapeError("fit_conditional_density: no conditioning columns");
  if (!c.allFinite() || !x.allFinite()) throw FitError("fit_conditional_density: non-finite data");
}

// ---------------------------------------------------------------------------
// Mixture density network
// ---------------------------------------------------------------------------

class MixtureNet final : public ConditionalDensity {
 public:
  MixtureNet(DensitySpec spec, Mlp net, Vector c_mean, Vector c_sd, double x_mean, double x_sd)
      : spec_(std::move(spec)), net_(std::move(net)), c_mean_(std::move(c_mean)), c_sd_(std::move(c_sd)),
        x_mean_(x_mean), x_sd_(x_sd) {
    input_dim_ = net_.input_dim();
    sigma_floor_ = spec_.sigma_min * x_sd_;
  }
  std::string kind() const override { return "gaussian-mixture-net"; }
  Mlp& net() { return net_; }
  std::vector<double>& trajectory() { return training_nll_; }
  int m() const { return spec_.components; }

  Matrix scale_c(const Matrix& c) const {
    return (c.rowwise() - c_mean_.transpose()).array().rowwise() / c_sd_.transpose().array();
  }

  /// Mean NLL in standardised response units and (optionally) the gradient.
  double loss(const Matrix& cz, const Vector& xz, Vector* grad) const {
    const int m_ = m();
    Mlp::Cache cache;
    const Matrix out = net_.forward(cz, cache);
    const Eigen::Index n = cz.rows();
    Matrix dout = grad ? Matrix::Zero(n, 3 * m_) : Matrix();
    std::vector<double> lp(static_cast<std::size_t>(m_)), lt(static_cast<std::size_t>(m_));
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = out(i, 0);
      for (int j = 1; j < m_; ++j) mx = std::max(mx, out(i, j));
      double se = 0.0;
      for (int j = 0; j < m_; ++j) se += std::exp(out(i, j) - mx);
      const double log_norm = mx + std::log(se);
      for (int j = 0; j < m_; ++j) {
        const double sigma = spec_.sigma_min + softplus(out(i, 2 * m_ + j));
        const double z = (xz(i) - out(i, m_ + j)) / sigma;
        lp[static_cast<std::size_t>(j)] = out(i, j) - log_norm;
        lt[static_cast<std::size_t>(j)] = lp[static_cast<std::size_t>(j)] - kLogSqrt2Pi - std::log(sigma) - 0.5 * z * z;
      }
      const double logp = log_sum_exp(lt.data(), m_);
      total -= logp;
      if (grad) {
        const double w = 1.0 / static_cast<double>(n);
        for (int j = 0; j < m_; ++j) {
          const double gamma = std::exp(lt[static_cast<std::size_t>(j)] - logp);
          const double pi = std::exp(lp[static_cast<std::size_t>(j)]);
          const double raw = out(i, 2 * m_ + j);
          const double sigma = spec_.sigma_min + softplus(raw);
          const double diff = xz(i) - out(i, m_ + j);
          dout(i, j) = w * (pi - gamma);
          dout(i, m_ + j) = -w * gamma * diff / (sigma * sigma);
          dout(i, 2 * m_ + j) = w * gamma * (1.0 / sigma - diff * diff / (sigma * sigma * sigma)) * sigmoid(raw);
        }
      }
    }
    if (grad) *grad = net_.backward(cache, dout);
    return total / static_cast<double>(n);
  }

  double log_scale() const { return std::log(x_sd_); }

 protected:
  std::vector<GaussianMixtureParams> query_impl(const Matrix& c) const override {
    const int m_ = m();
    const Matrix out = c.rows() ? net_.forward(scale_c(c)) : Matrix(0, 3 * m_);
    std::vector<GaussianMixtureParams> res(static_cast<std::size_t>(c.rows()));
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
      auto& p = res[static_cast<std::size_t>(i)];
      double mx = out(i, 0);
      for (int j = 1; j < m_; ++j) mx = std::max(mx, out(i, j));
      double se = 0.0;
      for (int j = 0; j < m_; ++j) se += std::exp(out(i, j) - mx);
      for (int j = 0; j < m_; ++j) {
        p.weights.push_back(std::exp(out(i, j) - mx) / se);
        p.means.push_back(x_mean_ + x_sd_ * out(i, m_ + j));
        p.stds.push_back(x_sd_ * (spec_.sigma_min + softplus(out(i, 2 * m_ + j))));
      }
      p.sort_by_mean();
    }
    return res;
  }
  Json hyperparams_json() const override { return spec_.to_json(); }
  Json state_json() const override {
    return {{"net", net_.to_json()}, {"c_mean", to_vec(c_mean_)}, {"c_sd", to_vec(c_sd_)},
            {"x_mean", x_mean_},     {"x_sd", x_sd_},             {"training_nll", training_nll_}};
  }

 private:
  DensitySpec spec_;
  Mlp net_;
  Vector c_mean_, c_sd_;
  double x_mean_, x_sd_;
};

DensityPtr fit_mdn(const DensitySpec& spec, const Matrix& c, const Vector& x) {
  Vector cm, cs;
  moments(c, cm, cs);
  const double xm = x.mean();
  const double xv = (x.array() - xm).square().mean();
  const double xs = xv > 1e-24 ? std::sqrt(xv) : 1.0;
  const int m = spec.components;

  std::vector<int> sizes{static_cast<int>(c.cols())};
  sizes.insert(sizes.end(), spec.hidden.begin(), spec.hidden.end());
  sizes.push_back(3 * m);
  Mlp net(sizes);
  Rng rng(spec.seed);
  net.init(rng);
  {
    auto b = net.output_bias();
    const double raw_one = std::log(std::expm1(std::max(1.0 - spec.sigma_min, 1e-6)));
    for (int j = 0; j < m; ++j) {
      b(j) = 0.0;
      b(m + j) = m == 1 ? 0.0 : -1.5 + 3.0 * j / (m - 1);
      b(2 * m + j) = raw_one;
    }
  }
  auto model = std::make_shared<MixtureNet>(spec, std::move(net), cm, cs, xm, xs);
  const Matrix cz = model->scale_c(c);
  const Vector xz = (x.array() - xm) / xs;
  const Eigen::Index n = c.rows();

  AdamW opt;
  opt.lr = spec.lr;
  opt.weight_decay = spec.weight_decay;
  double current = model->loss(cz, xz, nullptr);
  if (!std::isfinite(current)) throw FitError("gaussian-mixture-net: non-finite initial NLL");
  model->trajectory().push_back(current + model->log_scale());

  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  const Eigen::Index bs = std::max<Eigen::Index>(1, std::min<Eigen::Index>(spec.batch_size, n));
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    const Vector saved = model->net().params();
    const AdamW saved_opt = opt;
    for (std::size_t i = perm.size(); i > 1; --i) {
      std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    for (Eigen::Index start = 0; start < n; start += bs) {
      const Eigen::Index b = std::min(bs, n - start);
      Matrix cb(b, c.cols());
      Vector xb(b);
      for (Eigen::Index r = 0; r < b; ++r) {
        cb.row(r) = cz.row(perm[static_cast<std::size_t>(start + r)]);
        xb(r) = xz(perm[static_cast<std::size_t>(start + r)]);
      }
      Vector g;
      model->loss(cb, xb, &g);
      opt.step(model->net().params(), g);
    }
    const double next = model->loss(cz, xz, nullptr);
    if (!std::isfinite(next)) {
      throw FitError("gaussian-mixture-net: non-finite NLL at epoch " + std::to_string(epoch));
    }
    if (next > current) {
      // Reject the epoch and retry from the boundary with a smaller step.
      model->net().params() = saved;
      opt = saved_opt;
      opt.lr *= 0.5;
    } else {
      current = next;
    }
    model->trajectory().push_back(current + model->log_scale());
  }
  return model;
}

// ---------------------------------------------------------------------------
// Binned categorical: equal-frequency response bins, counts per cell of a
// discretised conditioning space, marginal fallback for unseen cells.
// ---------------------------------------------------------------------------

std::vector<double> make_edges(std::vector<double> v, int bins) {
  std::sort(v.begin(), v.end());
  std::vector<double> uniq = v;
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<double> edges;
  if (static_cast<int>(uniq.size()) <= bins) {
    for (std::size_t k = 0; k + 1 < uniq.size(); ++k) edges.push_back(uniq[k] + 0.5 * (uniq[k + 1] - uniq[k]));
    return edges;
  }
  const std::size_t n = v.size();
  for (int b = 1; b < bins; ++b) {
    const double q = v[static_cast<std::size_t>(b) * n / static_cast<std::size_t>(bins)];
    if (q > v.front() && (edges.empty() || q > edges.back())) edges.push_back(q);
  }
  return edges;
}

int bin_of(const std::vector<double>& edges, double v) {
  return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin());
}

class BinnedDensity final : public ConditionalDensity {
 public:
  DensitySpec spec;
  std::vector<double> x_edges;
  std::vector<double> bin_means;
  std::vector<double> bin_stds;
  std::vector<std::vector<double>> c_edges;
  std::map<std::int64_t, std::vector<double>> counts;
  std::vector<double> marginal;

  BinnedDensity(DensitySpec s, int d, double floor) : spec(std::move(s)) {
    input_dim_ = d;
    sigma_floor_ = floor;
  }
  std::string kind() const override { return "binned-categorical"; }
  std::vector<double>& trajectory() { return training_nll_; }

  std::int64_t cell(std::span<const double> c) const {
    std::int64_t key = 0;
    for (std::size_t j = 0; j < c_edges.size(); ++j) {
      key = key * static_cast<std::int64_t>(c_edges[j].size() + 1) + bin_of(c_edges[j], c[j]);
    }
    return key;
  }

  ExpectationNodes nodes(const GaussianMixtureParams& p, int, Rng&) const override {
    ExpectationNodes out;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p.weights[j] > 0.0) {
        out.points.push_back(p.means[j]);
        out.weights.push_back(p.weights[j]);
      }
    }
    return out;
  }

 protected:
  std::vector<GaussianMixtureParams> query_impl(const Matrix& c) const override {
    std::vector<GaussianMixtureParams> res(static_cast<std::size_t>(c.rows()));
    std::vector<double> row(static_cast<std::size_t>(c.cols()));
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
      for (Eigen::Index j = 0; j < c.cols(); ++j) row[static_cast<std::size_t>(j)] = c(i, j);
      const auto it = counts.find(cell(row));
      const std::vector<double>& cnt = it == counts.end() ? marginal : it->second;
      const double total = std::accumulate(cnt.begin(), cnt.end(), 0.0);
      auto& p = res[static_cast<std::size_t>(i)];
      for (std::size_t b = 0; b < cnt.size(); ++b) {
        p.weights.push_back(cnt[b] / total);
        p.means.push_back(bin_means[b]);
        p.stds.push_back(bin_stds[b]);
      }
    }
    return res;
  }
  Json hyperparams_json() const override { return spec.to_json(); }
  Json state_json() const override {
    Json cj = Json::array();
    for (const auto& [k, v] : counts) cj.push_back({{"cell", k}, {"counts", v}});
    return {{"x_edges", x_edges},   {"bin_means", bin_means}, {"bin_stds", bin_stds},
            {"c_edges", c_edges},   {"counts", cj},           {"marginal", marginal},
            {"sigma_floor", sigma_floor_}, {"training_nll", training_nll_}};
  }
};

DensityPtr fit_binned(const DensitySpec& spec, const Matrix& c, const Vector& x) {
  const Eigen::Index n = c.rows();
  const double xm = x.mean();
  const double xv = (x.array() - xm).square().mean();
  const double floor = spec.sigma_min * (xv > 1e-24 ? std::sqrt(xv) : 1.0);
  auto d = std::make_shared<BinnedDensity>(spec, static_cast<int>(c.cols()), floor);
  d->x_edges = make_edges(std::vector<double>(x.data(), x.data() + n), spec.bins);
  const std::size_t nb = d->x_edges.size() + 1;
  std::vector<double> s1(nb, 0.0), s2(nb, 0.0);
  d->marginal.assign(nb, 0.0);
  std::vector<int> xb(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int b = bin_of(d->x_edges, x(i));
    xb[static_cast<std::size_t>(i)] = b;
    d->marginal[static_cast<std::size_t>(b)] += 1.0;
    s1[static_cast<std::size_t>(b)] += x(i);
  }
  for (std::size_t b = 0; b < nb; ++b) s1[b] /= std::max(d->marginal[b], 1.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto b = static_cast<std::size_t>(xb[static_cast<std::size_t>(i)]);
    s2[b] += (x(i) - s1[b]) * (x(i) - s1[b]);
  }
  for (std::size_t b = 0; b < nb; ++b) {
    d->bin_means.push_back(s1[b]);
    d->bin_stds.push_back(std::max(std::sqrt(s2[b] / std::max(d->marginal[b], 1.0)), floor));
  }
  for (Eigen::Index j = 0; j < c.cols(); ++j) {
    d->c_edges.push_back(make_edges(std::vector<double>(c.col(j).data(), c.col(j).data() + n), spec.c_bins));
  }
  std::vector<double> row(static_cast<std::size_t>(c.cols()));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) row[static_cast<std::size_t>(j)] = c(i, j);
    auto& cnt = d->counts[d->cell(row)];
    if (cnt.empty()) cnt.assign(nb, 0.0);
    cnt[static_cast<std::size_t>(xb[static_cast<std::size_t>(i)])] += 1.0;
  }
  d->trajectory().push_back(d->nll(c, x));
  return d;
}

// ---------------------------------------------------------------------------
// Gaussian location model: mean from any regressor, homoscedastic spread.
// ---------------------------------------------------------------------------

class LocationDensity final : public ConditionalDensity {
 public:
  LocationDensity(DensitySpec spec, RegressorPtr mean, double sigma, double floor)
      : spec_(std::move(spec)), mean_(std::move(mean)), sigma_(sigma) {
    input_dim_ = mean_->input_dim();
    sigma_floor_ = floor;
  }
  std::string kind() const override { return "gaussian-location"; }
  std::vector<double>& trajectory() { return training_nll_; }

 protected:
  std::vector<GaussianMixtureParams> query_impl(const Matrix& c) const override {
    const Vector mu = mean_->predict(c);
    std::vector<GaussianMixtureParams> res(static_cast<std::size_t>(c.rows()));
    for (Eigen::Index i = 0; i < c.rows(); ++i) res[static_cast<std::size_t>(i)] = {{1.0}, {mu(i)}, {sigma_}};
    return res;
  }
  Json hyperparams_json() const override { return spec_.to_json(); }
  Json state_json() const override {
    return {{"mean", mean_->to_json()}, {"sigma", sigma_}, {"sigma_floor", sigma_floor_},
            {"training_nll", training_nll_}};
  }

 private:
  DensitySpec spec_;
  RegressorPtr mean_;
  double sigma_;
};

DensityPtr fit_location(const DensitySpec& spec, const Matrix& c, const Vector& x) {
  RegressorPtr mean = fit_regressor(spec.location, c, x);
  const Vector r = x - mean->predict(c);
  const double xm = x.mean();
  const double xv = (x.array() - xm).square().mean();
  const double floor = spec.sigma_min * (xv > 1e-24 ? std::sqrt(xv) : 1.0);
  const double sigma = std::max(std::sqrt(r.squaredNorm() / static_cast<double>(r.size())), floor);
  auto d = std::make_shared<LocationDensity>(spec, std::move(mean), sigma, floor);
  d->trajectory().push_back(d->nll(c, x));
  return d;
}

class AnalyticGaussian final : public ConditionalDensity {
 public:
  AnalyticGaussian(int d, std::function<double(std::span<const double>)> fn, double sd) : fn_(std::move(fn)), sd_(sd) {
    input_dim_ = d;
    sigma_floor_ = sd;
  }
  std::string kind() const override { return "analytic-gaussian"; }

 protected:
  std::vector<GaussianMixtureParams> query_impl(const Matrix& c) const override {
    std::vector<GaussianMixtureParams> res(static_cast<std::size_t>(c.rows()));
    std::vector<double> row(static_cast<std::size_t>(c.cols()));
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
      for (Eigen::Index j = 0; j < c.cols(); ++j) row[static_cast<std::size_t>(j)] = c(i, j);
      res[static_cast<std::size_t>(i)] = {{1.0}, {fn_(row)}, {sd_}};
    }
    return res;
  }
  Json hyperparams_json() const override { return {{"kind", "analytic-gaussian"}}; }
  Json state_json() const override { throw Error("analytic densities cannot be serialised"); }

 private:
  std::function<double(std::span<const double>)> fn_;
  double sd_;
};

}  // namespace

// ---------------------------------------------------------------------------

double GaussianMixtureParams::mean() const {
  double m = 0.0;
  for (std::size_t j = 0; j < size(); ++j) m += weights[j] * means[j];
  return m;
}

double GaussianMixtureParams::variance() const {
  const double mu = mean();
  double v = 0.0;
  for (std::size_t j = 0; j < size(); ++j) {
    v += weights[j] * (stds[j] * stds[j] + (means[j] - mu) * (means[j] - mu));
  }
  return v;
}

void GaussianMixtureParams::validate(double sigma_min) const {
  if (weights.empty()) throw ArgumentError("mixture: no components");
  if (means.size() != weights.size() || stds.size() != weights.size()) {
    throw ShapeError("mixture: weights, means and stds differ in length");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < size(); ++j) {
    if (!(weights[j] >= 0.0) || !std::isfinite(means[j])) throw ArgumentError("mixture: invalid weight or mean");
    if (!(stds[j] > 0.0) || !(stds[j] >= sigma_min) || !std::isfinite(stds[j])) {
      throw ArgumentError("mixture: standard deviation below the floor");
    }
    total += weights[j];
  }
  if (std::abs(total - 1.0) > 1e-8) throw ArgumentError("mixture: weights do not sum to 1");
}

void GaussianMixtureParams::sort_by_mean() {
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return means[a] < means[b]; });
  GaussianMixtureParams s;
  for (std::size_t k : idx) {
    s.weights.push_back(weights[k]);
    s.means.push_back(means[k]);
    s.stds.push_back(stds[k]);
  }
  *this = std::move(s);
}

ExpectationNodes mixture_nodes(const GaussianMixtureParams& params, int count, Rng& rng) {
  if (count < 1) throw ArgumentError("mixture_nodes: count must be >= 1");
  ExpectationNodes out;
  out.points.reserve(static_cast<std::size_t>(count));
  const int pairs = (count + 1) / 2;
  const double u0 = rng.uniform();
  std::size_t comp = 0;
  double cum = params.weights[0];
  for (int i = 0; i < pairs; ++i) {
    const double u = (i + u0) / pairs;
    while (u >= cum && comp + 1 < params.size()) cum += params.weights[++comp];
    const double xi = rng.normal();
    out.points.push_back(params.means[comp] + params.stds[comp] * xi);
    if (2 * i + 1 < count) out.points.push_back(params.means[comp] - params.stds[comp] * xi);
  }
  out.weights.assign(out.points.size(), 1.0 / static_cast<double>(count));
  return out;
}

double mixture_expectation(const GaussianMixtureParams& params, const std::function<double(double)>& f,
                           int mc_samples, std::uint64_t seed) {
  params.validate();
  if (mc_samples < 1) throw ArgumentError("mixture_expectation: mc_samples must be >= 1");
  Rng rng(seed);
  const ExpectationNodes nodes = mixture_nodes(params, mc_samples, rng);
  double s = 0.0;
  for (double p : nodes.points) s += f(p);
  return s / static_cast<double>(mc_samples);
}

Json DensitySpec::to_json() const {
  Json j{{"kind", kind}, {"sigma_min", sigma_min}};
  if (kind == "gaussian-mixture-net") {
    j["components"] = components;
    j["hidden"] = hidden;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["weight_decay"] = weight_decay;
    j["seed"] = seed;
  } else if (kind == "binned-categorical") {
    j["bins"] = bins;
    j["c_bins"] = c_bins;
  } else if (kind == "gaussian-location") {
    j["location"] = location.to_json();
  }
  return j;
}

DensitySpec DensitySpec::from_json(const Json& j) {
  if (!j.is_object()) throw ArgumentError("density: expected an object");
  DensitySpec s;
  s.kind = j.value("kind", s.kind);
  if (s.kind != "gaussian-mixture-net" && s.kind != "binned-categorical" && s.kind != "gaussian-location") {
    throw ArgumentError("density.kind: unknown kind '" + s.kind + "'");
  }
  s.components = j.value("components", s.components);
  s.hidden = j.value("hidden", s.hidden);
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.lr = j.value("lr", s.lr);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.seed = j.value("seed", s.seed);
  s.sigma_min = j.value("sigma_min", s.sigma_min);
  s.bins = j.value("bins", s.bins);
  s.c_bins = j.value("c_bins", s.c_bins);
  if (j.contains("location")) s.location = RegressorSpec::from_json(j.at("location"));
  if (s.components < 1) throw ArgumentError("density.components: must be >= 1");
  if (!(s.sigma_min > 0.0)) throw ArgumentError("density.sigma_min: must be > 0");
  if (s.bins < 1) throw ArgumentError("density.bins: must be >= 1");
  if (s.c_bins < 1) throw ArgumentError("density.c_bins: must be >= 1");
  if (s.epochs < 0) throw ArgumentError("density.epochs: must be >= 0");
  if (s.batch_size < 1) throw ArgumentError("density.batch_size: must be >= 1");
  if (!(s.lr > 0.0)) throw ArgumentError("density.lr: must be > 0");
  return s;
}

GaussianMixtureParams ConditionalDensity::query(std::span<const double> c) const {
  Matrix m(1, static_cast<Eigen::Index>(c.size()));
  for (std::size_t j = 0; j < c.size(); ++j) m(0, static_cast<Eigen::Index>(j)) = c[j];
  return query_batch(m).front();
}

std::vector<GaussianMixtureParams> ConditionalDensity::query_batch(const Matrix& c) const {
  if (c.cols() != input_dim_) {
    throw ShapeError("density query: width " + std::to_string(c.cols()) + " != training width " +
                     std::to_string(input_dim_));
  }
  return query_impl(c);
}

ExpectationNodes ConditionalDensity::nodes(const GaussianMixtureParams& params, int count, Rng& rng) const {
  return mixture_nodes(params, count, rng);
}

double ConditionalDensity::nll(const Matrix& c, const Vector& x) const {
  if (c.rows() != x.size()) throw ShapeError("nll: row mismatch");
  const auto ps = query_batch(c);
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) s -= mixture_log_pdf(ps[static_cast<std::size_t>(i)], x(i));
  return s / static_cast<double>(x.size());
}

Json ConditionalDensity::to_json() const {
  return {{"format", kDensityFormat}, {"version", kModelFormatVersion}, {"kind", kind()},
          {"input_dim", input_dim_},  {"hyperparams", hyperparams_json()}, {"state", state_json()}};
}

DensityPtr fit_conditional_density(const DensitySpec& spec, const Matrix& c, const Vector& x) {
  check_cx(c, x);
  if (spec.kind == "gaussian-mixture-net") return fit_mdn(spec, c, x);
  if (spec.kind == "binned-categorical") return fit_binned(spec, c, x);
  if (spec.kind == "gaussian-location") return fit_location(spec, c, x);
  throw ArgumentError("density.kind: unknown kind '" + spec.kind + "'");
}

DensityPtr load_density(const Json& j) {
  if (j.value("format", "") != kDensityFormat) throw ArgumentError("load_density: not a density document");
  if (j.value("version", 0) != kModelFormatVersion) throw ArgumentError("load_density: unsupported version");
  const auto kind = j.at("kind").get<std::string>();
  const int d = j.at("input_dim").get<int>();
  const DensitySpec spec = DensitySpec::from_json(j.at("hyperparams"));
  const Json& st = j.at("state");
  const auto traj = st.value("training_nll", std::vector<double>{});
  if (kind == "gaussian-mixture-net") {
    auto m = std::make_shared<MixtureNet>(spec, Mlp::from_json(st.at("net")),
                                          from_vec(st.at("c_mean").get<std::vector<double>>()),
                                          from_vec(st.at("c_sd").get<std::vector<double>>()),
                                          st.at("x_mean").get<double>(), st.at("x_sd").get<double>());
    m->trajectory() = traj;
    return m;
  }
  if (kind == "binned-categorical") {
    auto m = std::make_shared<BinnedDensity>(spec, d, st.at("sigma_floor").get<double>());
    m->x_edges = st.at("x_edges").get<std::vector<double>>();
    m->bin_means = st.at("bin_means").get<std::vector<double>>();
    m->bin_stds = st.at("bin_stds").get<std::vector<double>>();
    m->c_edges = st.at("c_edges").get<std::vector<std::vector<double>>>();
    m->marginal = st.at("marginal").get<std::vector<double>>();
    for (const auto& e : st.at("counts")) {
      m->counts[e.at("cell").get<std::int64_t>()] = e.at("counts").get<std::vector<double>>();
    }
    m->trajectory() = traj;
    return m;
  }
  if (kind == "gaussian-location") {
    auto m = std::make_shared<LocationDensity>(spec, load_regressor(st.at("mean")), st.at("sigma").get<double>(),
                                               st.at("sigma_floor").get<double>());
    m->trajectory() = traj;
    return m;
  }
  throw ArgumentError("load_density: unknown kind '" + kind + "'");
}

DensityPtr make_analytic_gaussian(int input_dim, std::function<double(std::span<const double>)> mean_fn, double sd) {
  if (!(sd > 0.0)) throw ArgumentError("make_analytic_gaussian: sd must be > 0");
  return std::make_shared<AnalyticGaussian>(input_dim, std::move(mean_fn), sd);
}

std::optional<BinnedView> binned_view(const ConditionalDensity& d) {
  const auto* p = dynamic_cast<const BinnedDensity*>(&d);
  if (!p) return std::nullopt;
  return BinnedView{p->bin_means};
}

}  // namespace dmlcmr

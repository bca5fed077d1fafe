#include "dmlcmr/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "dmlcmr/error.hpp"
#include "dmlcmr/generators.hpp"
#include "dmlcmr/io.hpp"
#include "dmlcmr/rng.hpp"

namespace dmlcmr {

namespace {

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

/// Maps original-unit x to the standardised units of the fit and back.
struct UnitMap {
  std::vector<double> x_offset, x_scale;
  double y_offset = 0.0, y_scale = 1.0;

  UnitMap(const Standardiser& s, const Dataset& d) {
    for (const auto& nm : d.x_names) {
      x_offset.push_back(s.offset_of(nm));
      x_scale.push_back(s.scale_of(nm));
    }
    y_offset = s.offset_of(d.y_name);
    y_scale = s.scale_of(d.y_name);
  }
  Vector predict(const StructuralModel& f, const Matrix& x) const {
    Matrix xs = x;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      xs.col(j) = (x.col(j).array() - x_offset[static_cast<std::size_t>(j)]) / x_scale[static_cast<std::size_t>(j)];
    }
    return (f.predict(xs).array() * y_scale + y_offset).matrix();
  }
};

std::mutex g_oracle_mutex;
std::map<std::pair<std::uint64_t, std::size_t>, std::pair<Vector, Vector>> g_pcl_cache;

/// Grid and oracle values for the PCL evaluation, computed once per process.
std::pair<Vector, Vector> pcl_truth_cached() {
  constexpr std::uint64_t kGridSeed = 0;
  constexpr std::size_t kOracleMc = 1000000;
  std::lock_guard<std::mutex> lock(g_oracle_mutex);
  auto key = std::make_pair(kGridSeed, kOracleMc);
  auto it = g_pcl_cache.find(key);
  if (it != g_pcl_cache.end()) return it->second;
  const Vector grid = pcl_evaluation_grid(kGridSeed);
  const DoOracleResult r = pcl_do_oracle(grid, kOracleMc, derive_seed(kGridSeed, 0x0AC1E));
  g_pcl_cache[key] = {grid, r.value};
  return {grid, r.value};
}

double ols_slope(const std::vector<double>& lx, const std::vector<double>& ly, double* intercept) {
  const double n = static_cast<double>(lx.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i] / n;
    my += ly[i] / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  const double b = sxy / sxx;
  if (intercept) *intercept = my - b * mx;
  return b;
}

double rms(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s / static_cast<double>(v.size()));
}

/// Slope CI by resampling seeds within every n.
void bootstrap_slope(const std::vector<std::size_t>& n_grid, const std::vector<std::vector<double>>& per_seed,
                     int reps, std::uint64_t seed, double& lo, double& hi) {
  Rng rng(seed);
  std::vector<double> slopes;
  std::vector<double> lx, ly(n_grid.size());
  for (std::size_t n : n_grid) lx.push_back(std::log(static_cast<double>(n)));
  for (int b = 0; b < reps; ++b) {
    for (std::size_t k = 0; k < n_grid.size(); ++k) {
      const auto& e = per_seed[k];
      std::vector<double> s;
      for (std::size_t i = 0; i < e.size(); ++i) {
        s.push_back(e[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(e.size()) - 1))]);
      }
      ly[k] = std::log(std::max(rms(s), 1e-300));
    }
    slopes.push_back(ols_slope(lx, ly, nullptr));
  }
  lo = percentile(slopes, 0.025);
  hi = percentile(slopes, 0.975);
}

}  // namespace

// ---------------------------------------------------------------------------

TruthOracle TruthOracle::analytic(int input_dim, std::function<double(std::span<const double>)> f0) {
  TruthOracle o;
  o.kind = Kind::kAnalyticF0;
  o.input_dim = input_dim;
  o.f0 = std::move(f0);
  return o;
}

TruthOracle TruthOracle::pcl_do(std::size_t mc_n, std::uint64_t seed) {
  TruthOracle o;
  o.kind = Kind::kMcDoIntervention;
  o.input_dim = 1;
  o.mc_n = mc_n;
  o.seed = seed;
  return o;
}

Vector TruthOracle::eval(const Matrix& x) const {
  if (x.cols() != input_dim) throw ShapeError("oracle: input width mismatch");
  if (kind == Kind::kMcDoIntervention) return pcl_do_oracle(x.col(0), mc_n, seed).value;
  Vector out(x.rows());
  std::vector<double> row(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = x(i, j);
    out(i) = f0(row);
  }
  return out;
}

double mse_vs_truth(const std::function<Vector(const Matrix&)>& fhat, const TruthOracle& oracle, const Matrix& x_test) {
  if (x_test.rows() == 0) throw ArgumentError("mse_vs_truth: empty test set");
  const Vector truth = oracle.eval(x_test);
  const Vector pred = fhat(x_test);
  if (pred.size() != truth.size()) throw ShapeError("mse_vs_truth: prediction length mismatch");
  return (pred - truth).squaredNorm() / static_cast<double>(truth.size());
}

DoOracleResult pcl_do_oracle(const Vector& a_grid, std::size_t mc_n, std::uint64_t seed) {
  if (a_grid.size() == 0) throw ArgumentError("pcl_do_oracle: empty grid");
  if (mc_n < 10000) throw ArgumentError("pcl_do_oracle: mc_n must be >= 1e4");
  Rng rng(seed);
  std::vector<double> w(mc_n), gu(mc_n);
  for (std::size_t i = 0; i < mc_n; ++i) {
    const double u = rng.uniform(0.0, 10.0);
    const double e3 = rng.normal();
    gu[i] = pcl_g(u);
    w[i] = 7.0 * gu[i] + 45.0 + e3;
  }
  DoOracleResult r;
  r.value.resize(a_grid.size());
  r.std_error.resize(a_grid.size());
  for (Eigen::Index k = 0; k < a_grid.size(); ++k) {
    const double a = a_grid(k);
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < mc_n; ++i) {
      const double v = a * std::min(std::exp((w[i] - a) / 10.0), 5.0) - 5.0 * gu[i];
      s += v;
      s2 += v * v;
    }
    const double n = static_cast<double>(mc_n);
    const double mean = s / n;
    r.value(k) = mean;
    r.std_error(k) = std::sqrt(std::max(s2 / n - mean * mean, 0.0) * n / (n - 1.0) / n);
  }
  return r;
}

Vector pcl_evaluation_grid(std::uint64_t seed) {
  const Dataset d = gen_pcl_demand({100000, seed});
  std::vector<double> a(d.x.col(0).data(), d.x.col(0).data() + d.x.rows());
  const double lo = percentile(a, 0.05), hi = percentile(a, 0.95);
  return Vector::LinSpaced(50, lo, hi);
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw ArgumentError("percentile: empty input");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// ---------------------------------------------------------------------------

BasisMap demand_basis() {
  std::vector<BasisMap::Factor> f(3);
  f[0].column = 0;
  f[0].type = BasisMap::Factor::Type::kPolynomial;
  f[0].degree = 2;
  f[1].column = 1;
  f[1].type = BasisMap::Factor::Type::kRadial;
  const double half = std::sqrt(3.0);  // Unif(0, 10) spans +/- sqrt(3) sd
  for (int k = 0; k <= 20; ++k) f[1].points.push_back(-half + 2.0 * half * k / 20.0);
  f[1].bandwidth = 2.0 * half / 20.0;
  f[2].column = 2;
  f[2].type = BasisMap::Factor::Type::kIndicator;
  for (int s = 1; s <= 7; ++s) f[2].points.push_back(s);
  return BasisMap::tensor(3, f);
}

Json ProblemSpec::to_json() const { return {{"generator", generator}, {"params", params}, {"n_test", n_test}}; }

ProblemSpec ProblemSpec::from_json(const Json& j) {
  ProblemSpec p;
  p.generator = j.value("generator", p.generator);
  if (p.generator != "demand_iv" && p.generator != "pcl_demand" && p.generator != "linear_toy") {
    throw ArgumentError("problem.generator: unknown generator '" + p.generator + "'");
  }
  p.params = j.value("params", Json::object());
  p.n_test = j.value("n_test", p.n_test);
  if (p.n_test < 1) throw ArgumentError("problem.n_test: must be >= 1");
  return p;
}

Json MethodSpec::to_json() const {
  return {{"name", name}, {"method", method}, {"nuisances", nuisances.to_json()}, {"fit", fit.to_json()},
          {"structural", structural}};
}

MethodSpec MethodSpec::from_json(const Json& j) {
  MethodSpec m;
  m.method = j.value("method", m.method);
  if (m.method != "dml-cmr" && m.method != "ce-dml-cmr" && m.method != "naive-two-stage") {
    throw ArgumentError("methods[].method: unknown method '" + m.method + "'");
  }
  m.name = j.value("name", m.method);
  if (j.contains("nuisances")) m.nuisances = NuisanceSpecs::from_json(j.at("nuisances"));
  if (j.contains("fit")) m.fit = FitConfig::from_json(j.at("fit"));
  m.structural = j.value("structural", Json::object());
  return m;
}

NuisanceSpecs default_nuisances(const std::string& generator) {
  NuisanceSpecs n;
  if (generator == "linear_toy") {
    n.s.kind = "ridge";
    n.density.kind = "gaussian-location";
    n.density.location.kind = "ridge";
    return n;
  }
  n.s.kind = "gradient-boosted-trees";
  n.s.n_trees = 500;
  n.s.min_leaf = 100;
  n.density.kind = "gaussian-location";
  n.density.location = n.s;
  return n;
}

Json default_structural(const std::string& generator) {
  if (generator == "demand_iv") {
    return {{"arch", "boosted-trees"}, {"n_trees", 500}, {"learning_rate", 0.1}, {"max_depth", 3}, {"min_leaf", 10}};
  }
  if (generator == "pcl_demand") {
    return {{"arch", "linear-in-basis"}, {"basis", BasisMap::polynomial(2, 3).to_json()}, {"adapt", true}};
  }
  if (generator == "linear_toy") {
    return {{"arch", "linear-in-basis"}, {"basis", BasisMap::identity(1).to_json()}, {"adapt", false}};
  }
  throw ArgumentError("unknown generator '" + generator + "'");
}

MethodSpec default_method(const std::string& method, const std::string& generator) {
  MethodSpec m;
  m.method = method;
  m.name = method;
  m.nuisances = default_nuisances(generator);
  m.structural = default_structural(generator);
  // Tree stages fit on every expectation node; 20 draws keep that tractable.
  if (m.structural.value("arch", "") == "boosted-trees") m.fit.mc_draws = 20;
  return m;
}

Dataset generate(const ProblemSpec& problem, std::size_t n, std::uint64_t seed) {
  const Json& p = problem.params;
  if (problem.generator == "demand_iv") {
    DemandIVParams d;
    d.n = n;
    d.seed = seed;
    d.rho = p.value("rho", d.rho);
    d.iv_strength = p.value("iv_strength", d.iv_strength);
    d.ood_time = p.value("ood_time", d.ood_time);
    return gen_demand_iv(d);
  }
  if (problem.generator == "pcl_demand") return gen_pcl_demand({n, seed});
  if (problem.generator == "linear_toy") {
    LinearToyParams t;
    t.n = n;
    t.seed = seed;
    t.theta0 = p.value("theta0", t.theta0);
    t.instrument_strength = p.value("instrument_strength", t.instrument_strength);
    return gen_linear_toy(t);
  }
  throw ArgumentError("problem.generator: unknown generator '" + problem.generator + "'");
}

std::vector<std::string> standardised_variables(const ProblemSpec& problem) {
  if (problem.generator == "demand_iv") return {"p", "r"};
  if (problem.generator == "pcl_demand") return {"A", "Y"};
  return {};
}

StructuralModel make_structural(const Json& spec, const Dataset& train, std::uint64_t seed) {
  const auto arch = spec.value("arch", std::string("linear-in-basis"));
  if (arch == "linear-in-basis") {
    BasisMap basis = spec.contains("basis") ? BasisMap::from_json(spec.at("basis")) : BasisMap::identity(train.dx());
    if (basis.input_dim() != train.dx()) throw ShapeError("structural.basis: input dimension differs from x");
    if (spec.value("adapt", true)) basis.adapt_to(train.x);
    return StructuralModel::linear(std::move(basis));
  }
  if (arch == "feedforward-net") {
    Vector centre = train.x.colwise().mean().transpose();
    Vector scale(train.dx());
    for (int j = 0; j < train.dx(); ++j) {
      const double v = (train.x.col(j).array() - centre(j)).square().mean();
      scale(j) = v > 1e-24 ? std::sqrt(v) : 1.0;
    }
    return StructuralModel::feedforward(spec.value("hidden", std::vector<int>{128, 64, 32}), centre, scale, seed);
  }
  if (arch == "boosted-trees") {
    StructuralModel::TreeSettings ts;
    ts.n_trees = spec.value("n_trees", ts.n_trees);
    ts.learning_rate = spec.value("learning_rate", ts.learning_rate);
    ts.max_depth = spec.value("max_depth", ts.max_depth);
    ts.min_leaf = spec.value("min_leaf", ts.min_leaf);
    return StructuralModel::boosted_trees(train.dx(), ts);
  }
  throw ArgumentError("structural.arch: unknown arch '" + arch + "'");
}

RunResult run_method(const ProblemSpec& problem, const MethodSpec& method, std::size_t n, std::uint64_t seed) {
  RunResult res;
  res.method = method.name;
  res.n = n;
  res.seed = seed;
  try {
    const Dataset train = generate(problem, n, derive_seed(seed, 1));
    const auto vars = standardised_variables(problem);
    const Standardiser stdz = vars.empty() ? Standardiser() : fit_standardiser(train, vars);
    const Dataset train_s = vars.empty() ? train : stdz.apply(train);
    const Json sspec = method.structural.empty() ? default_structural(problem.generator) : method.structural;
    const StructuralModel init = make_structural(sspec, train_s, derive_seed(seed, 2));
    FitConfig fc = method.fit;
    fc.seed = derive_seed(seed, 3);

    FittedCMR fit;
    if (method.method == "dml-cmr") {
      const CrossFitState st = crossfit_nuisances(train_s, fc, method.nuisances);
      res.audit_passed = st.audit();
      fit = fit_dml_cmr(train_s, st, fc, init);
    } else if (method.method == "ce-dml-cmr") {
      fit = fit_ce_dml_cmr(train_s, fc, init, method.nuisances);
      res.audit_passed = fit.audit.value("passed", false);
    } else if (method.method == "naive-two-stage") {
      fit = fit_naive_two_stage(train_s, fc, init, method.nuisances);
      res.audit_passed = fit.audit.value("passed", false);
    } else {
      throw ArgumentError("methods[].method: unknown method '" + method.method + "'");
    }
    res.nuisance_fits = fit.nuisance_fits;

    const UnitMap units(stdz, train);
    const double y_var = vars.empty() ? (train.y.array() - train.y.mean()).square().mean()
                                      : std::pow(stdz.scale_of(train.y_name), 2);
    if (problem.generator == "pcl_demand") {
      const auto [grid, truth] = pcl_truth_cached();
      const Vector w = train.x.col(1);
      Vector pred(grid.size());
      Matrix xs(w.size(), 2);
      xs.col(1) = w;
      for (Eigen::Index k = 0; k < grid.size(); ++k) {
        xs.col(0).setConstant(grid(k));
        pred(k) = units.predict(fit.model, xs).mean();
      }
      res.mse = (pred - truth).squaredNorm() / static_cast<double>(grid.size());
    } else {
      const Dataset test = generate(problem, problem.n_test, derive_seed(seed, 4));
      const TruthOracle oracle = TruthOracle::analytic(test.dx(), test.truth->f0);
      res.mse = mse_vs_truth([&](const Matrix& x) { return units.predict(fit.model, x); }, oracle, test.x);
    }
    res.mse_standardised = res.mse / y_var;
    if (!std::isfinite(res.mse)) throw Error("non-finite MSE");
    res.ok = true;
  } catch (const std::exception& e) {
    res.ok = false;
    res.error = e.what();
  }
  return res;
}

// ---------------------------------------------------------------------------

void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex m;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(m);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

Json BenchmarkReport::to_json() const {
  Json j{{"method", method},
         {"generator", problem.generator},
         {"params", problem.params},
         {"n", n},
         {"seeds", seeds},
         {"mse", mse},
         {"median", median},
         {"q25", q25},
         {"q75", q75},
         {"mse_standardised", mse_standardised},
         {"median_standardised", median_standardised},
         {"q25_standardised", q25_standardised},
         {"q75_standardised", q75_standardised},
         {"units_note", "mse is in original units; *_standardised divides by the training outcome variance"},
         {"failures", failures},
         {"audit_passed", audit_passed},
         {"config_hash", config_hash}};
  j["runtime_s"] = runtime_s ? Json(*runtime_s) : Json(nullptr);
  return j;
}

std::vector<BenchmarkReport> benchmark(const BenchmarkConfig& cfg, const std::string& config_hash) {
  if (cfg.methods.empty()) throw ArgumentError("bench.methods: need at least one method");
  if (cfg.seeds.empty()) throw ArgumentError("bench.seeds: need at least one seed");
  if (cfg.n_grid.empty()) throw ArgumentError("bench.n_grid: need at least one n");
  const std::size_t nm = cfg.methods.size(), nn = cfg.n_grid.size(), ns = cfg.seeds.size();
  std::vector<RunResult> cells(nm * nn * ns);
  std::vector<double> secs(nm * nn * ns, 0.0);
  parallel_for(cells.size(), cfg.jobs, [&](std::size_t idx) {
    const std::size_t m = idx / (nn * ns), k = (idx / ns) % nn, s = idx % ns;
    const auto t0 = std::chrono::steady_clock::now();
    cells[idx] = run_method(cfg.problem, cfg.methods[m], cfg.n_grid[k], derive_seed(cfg.seed, cfg.seeds[s]));
    secs[idx] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });
  std::vector<BenchmarkReport> out;
  for (std::size_t m = 0; m < nm; ++m) {
    for (std::size_t k = 0; k < nn; ++k) {
      BenchmarkReport r;
      r.method = cfg.methods[m].name;
      r.problem = cfg.problem;
      r.n = cfg.n_grid[k];
      r.config_hash = config_hash;
      double total = 0.0;
      for (std::size_t s = 0; s < ns; ++s) {
        const std::size_t idx = (m * nn + k) * ns + s;
        const RunResult& c = cells[idx];
        total += secs[idx];
        if (c.ok) {
          r.seeds.push_back(cfg.seeds[s]);
          r.mse.push_back(c.mse);
          r.mse_standardised.push_back(c.mse_standardised);
          r.audit_passed = r.audit_passed && c.audit_passed;
        } else {
          r.failures.push_back(std::to_string(cfg.seeds[s]) + ": " + c.error);
        }
      }
      if (!r.mse.empty()) {
        r.q25 = percentile(r.mse, 0.25);
        r.median = percentile(r.mse, 0.5);
        r.q75 = percentile(r.mse, 0.75);
        r.q25_standardised = percentile(r.mse_standardised, 0.25);
        r.median_standardised = percentile(r.mse_standardised, 0.5);
        r.q75_standardised = percentile(r.mse_standardised, 0.75);
      }
      if (cfg.record_runtime) r.runtime_s = total;
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::string benchmark_csv(const std::vector<BenchmarkReport>& reports) {
  std::ostringstream os;
  os << "method,n,seed,mse\n";
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.mse.size(); ++i) {
      os << r.method << ',' << r.n << ',' << r.seeds[i] << ',' << format_double(r.mse[i]) << '\n';
    }
  }
  return os.str();
}

Json benchmark_json(const std::vector<BenchmarkReport>& reports) {
  Json arr = Json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  return arr;
}

std::string benchmark_svg(const std::vector<BenchmarkReport>& reports, const std::string& title) {
  const double w = 640, h = 400, ml = 70, mr = 150, mt = 40, mb = 50;
  std::vector<std::string> methods;
  std::vector<std::size_t> ns;
  double ymax = 0.0;
  for (const auto& r : reports) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    if (std::find(ns.begin(), ns.end(), r.n) == ns.end()) ns.push_back(r.n);
    ymax = std::max(ymax, r.q75);
  }
  std::sort(ns.begin(), ns.end());
  if (!(ymax > 0.0)) ymax = 1.0;
  auto xpos = [&](std::size_t n) {
    if (ns.size() == 1) return ml + (w - ml - mr) / 2.0;
    const double lo = std::log(static_cast<double>(ns.front())), hi = std::log(static_cast<double>(ns.back()));
    return ml + (std::log(static_cast<double>(n)) - lo) / (hi - lo) * (w - ml - mr);
  };
  auto ypos = [&](double v) { return h - mb - v / ymax * (h - mt - mb); };
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  for (std::size_t n : ns) {
    os << "<text x=\"" << xpos(n) << "\" y=\"" << h - mb + 18 << "\" text-anchor=\"middle\" font-size=\"11\">" << n << "</text>\n";
  }
  for (int t = 0; t <= 4; ++t) {
    const double v = ymax * t / 4.0;
    os << "<text x=\"" << ml - 6 << "\" y=\"" << ypos(v) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
       << format_double(std::round(v * 1e4) / 1e4) << "</text>\n";
  }
  os << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\" font-size=\"12\">n</text>\n";
  os << "<text x=\"15\" y=\"" << h / 2 << "\" font-size=\"12\" transform=\"rotate(-90 15 " << h / 2 << ")\">MSE</text>\n";
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const char* col = colours[m % 6];
    std::vector<const BenchmarkReport*> rs;
    for (const auto& r : reports) {
      if (r.method == methods[m]) rs.push_back(&r);
    }
    std::sort(rs.begin(), rs.end(), [](auto* a, auto* b) { return a->n < b->n; });
    os << "<polygon fill=\"" << col << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (auto* r : rs) os << xpos(r->n) << ',' << ypos(r->q75) << ' ';
    for (auto it = rs.rbegin(); it != rs.rend(); ++it) os << xpos((*it)->n) << ',' << ypos((*it)->q25) << ' ';
    os << "\"/>\n<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (auto* r : rs) os << xpos(r->n) << ',' << ypos(r->median) << ' ';
    os << "\"/>\n";
    for (auto* r : rs) os << "<circle cx=\"" << xpos(r->n) << "\" cy=\"" << ypos(r->median) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    os << "<text x=\"" << w - mr + 10 << "\" y=\"" << mt + 18 * m + 10 << "\" font-size=\"12\" fill=\"" << col << "\">"
       << methods[m] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------

void fit_log_log(const std::vector<std::size_t>& n, const std::vector<double>& err, double& slope, double& intercept) {
  if (n.size() < 3) throw ArgumentError("rate study: need at least 3 grid points");
  if (n.size() != err.size()) throw ShapeError("rate study: grid and error lengths differ");
  for (std::size_t k = 1; k < n.size(); ++k) {
    if (n[k] <= n[k - 1]) throw ArgumentError("rate study: n grid must be strictly increasing");
  }
  std::vector<double> lx, ly;
  for (std::size_t k = 0; k < n.size(); ++k) {
    if (!(err[k] > 0.0) || !std::isfinite(err[k])) throw Error("rate study: error must be positive and finite");
    lx.push_back(std::log(static_cast<double>(n[k])));
    ly.push_back(std::log(err[k]));
  }
  slope = ols_slope(lx, ly, &intercept);
}

Json RateStudyResult::to_json() const {
  return {{"n_grid", n_grid},   {"error", error},         {"per_seed", per_seed},
          {"slope", slope},     {"intercept", intercept}, {"slope_ci", {slope_ci_low, slope_ci_high}},
          {"flag", flag},       {"audit_passed", audit_passed}};
}

RateStudyResult rate_study(const RateStudyConfig& cfg) {
  if (cfg.n_grid.size() < 3) throw ArgumentError("rate_study: need at least 3 grid points");
  if (cfg.seeds.empty()) throw ArgumentError("rate_study: need at least one seed");
  RateStudyResult res;
  res.n_grid = cfg.n_grid;
  const double t0 = cfg.theta0, kappa = cfg.kappa;
  NuisanceFactory factory;
  if (cfg.analytic_nuisances) {
    factory = [t0, kappa](const Dataset&, int) {
      NuisancePair np;
      np.s = make_analytic_regressor(1, [t0, kappa](std::span<const double> c) { return t0 * kappa * c[0]; });
      np.density = make_analytic_gaussian(1, [kappa](std::span<const double> c) { return kappa * c[0]; }, std::sqrt(2.0));
      return np;
    };
  }
  for (std::size_t n : cfg.n_grid) {
    std::vector<double> errs;
    for (std::uint64_t seed : cfg.seeds) {
      const std::uint64_t cell = derive_seed(derive_seed(seed, n), 1);
      LinearToyParams tp;
      tp.n = n;
      tp.seed = cell;
      tp.theta0 = t0;
      tp.instrument_strength = kappa;
      const Dataset data = gen_linear_toy(tp);
      FitConfig fc = cfg.fit;
      fc.seed = derive_seed(cell, 2);
      const CrossFitState st = cfg.analytic_nuisances
                                   ? crossfit_nuisances(data, fc, factory)
                                   : crossfit_nuisances(data, fc, default_nuisances("linear_toy"));
      res.audit_passed = res.audit_passed && st.audit();
      const FittedCMR fit = fit_dml_cmr(data, st, fc, StructuralModel::linear(BasisMap::identity(1)));
      errs.push_back(std::abs(fit.model.theta()(0) - t0));
    }
    res.error.push_back(rms(errs));
    res.per_seed.push_back(errs);
  }
  fit_log_log(res.n_grid, res.error, res.slope, res.intercept);
  bootstrap_slope(res.n_grid, res.per_seed, cfg.bootstrap, derive_seed(cfg.seeds.front(), 0xB007), res.slope_ci_low,
                  res.slope_ci_high);
  return res;
}

Json BiasInjectionResult::to_json() const {
  return {{"b_grid", b_grid},       {"error_dml", error_dml},     {"error_naive", error_naive},
          {"slope_dml", slope_dml}, {"slope_naive", slope_naive}, {"audit_passed", audit_passed}};
}

BiasInjectionResult bias_injection_study(const BiasInjectionConfig& cfg) {
  if (cfg.b_grid.size() < 2) throw ArgumentError("bias_injection_study: need at least 2 bias values");
  if (cfg.seeds.empty()) throw ArgumentError("bias_injection_study: need at least one seed");
  for (double b : cfg.b_grid) {
    if (!(b > 0.0)) throw ArgumentError("bias_injection_study: bias values must be > 0");
  }
  const double t0 = cfg.theta0, kappa = cfg.kappa;
  auto factory = [t0, kappa](double b) -> NuisanceFactory {
    return [t0, kappa, b](const Dataset&, int) {
      NuisancePair np;
      np.s = make_analytic_regressor(1, [t0, kappa, b](std::span<const double> c) { return t0 * kappa * c[0] + b; });
      np.density =
          make_analytic_gaussian(1, [kappa, b](std::span<const double> c) { return kappa * c[0] + b; }, std::sqrt(2.0));
      return np;
    };
  };
  BiasInjectionResult res;
  res.b_grid = cfg.b_grid;
  std::vector<std::vector<double>> dml(cfg.b_grid.size()), naive(cfg.b_grid.size());
  const StructuralModel init = StructuralModel::linear(BasisMap::identity(1));
  for (std::uint64_t seed : cfg.seeds) {
    LinearToyParams tp;
    tp.n = cfg.n;
    tp.seed = derive_seed(seed, 1);
    tp.theta0 = t0;
    tp.instrument_strength = kappa;
    const Dataset data = gen_linear_toy(tp);
    FitConfig fc = cfg.fit;
    fc.seed = derive_seed(seed, 2);
    auto thetas = [&](double b) {
      const CrossFitState st = crossfit_nuisances(data, fc, factory(b));
      res.audit_passed = res.audit_passed && st.audit();
      const double d = fit_dml_cmr(data, st, fc, init).model.theta()(0);
      const double nv = fit_naive_two_stage(data, fc, init, factory(b)).model.theta()(0);
      return std::make_pair(d, nv);
    };
    const auto base = thetas(0.0);
    for (std::size_t k = 0; k < cfg.b_grid.size(); ++k) {
      const auto tb = thetas(cfg.b_grid[k]);
      dml[k].push_back(tb.first - base.first);
      naive[k].push_back(tb.second - base.second);
    }
  }
  std::vector<double> lb, ld, ln;
  for (std::size_t k = 0; k < cfg.b_grid.size(); ++k) {
    res.error_dml.push_back(rms(dml[k]));
    res.error_naive.push_back(rms(naive[k]));
    lb.push_back(std::log(cfg.b_grid[k]));
    ld.push_back(std::log(std::max(res.error_dml.back(), 1e-300)));
    ln.push_back(std::log(std::max(res.error_naive.back(), 1e-300)));
  }
  res.slope_dml = ols_slope(lb, ld, nullptr);
  res.slope_naive = ols_slope(lb, ln, nullptr);
  return res;
}

std::function<double(std::span<const double>)> analytic_s0(const std::string& generator, const Json& params) {
  if (generator == "linear_toy") {
    const double t0 = params.value("theta0", 2.0), k = params.value("instrument_strength", 1.0);
    return [t0, k](std::span<const double> c) { return t0 * k * c[0]; };
  }
  if (generator == "demand_iv") {
    const double iv = params.value("iv_strength", 1.0);
    return [iv](std::span<const double> c) {
      const double psi = demand_psi(c[1]);
      const double mp = 25.0 + (iv * c[0] + 3.0) * psi;
      return demand_f0(c[1], c[2], mp);
    };
  }
  throw ArgumentError("analytic_s0: no closed form for generator '" + generator + "'");
}

RateStudyResult nuisance_rate_study(const NuisanceRateConfig& cfg) {
  if (cfg.n_grid.size() < 3) throw ArgumentError("nuisance_rate_study: need at least 3 grid points");
  if (cfg.seeds.empty()) throw ArgumentError("nuisance_rate_study: need at least one seed");
  ProblemSpec problem;
  problem.generator = cfg.generator;
  problem.params = cfg.params;
  const auto s0 = analytic_s0(cfg.generator, cfg.params);
  RateStudyResult res;
  res.n_grid = cfg.n_grid;
  for (std::size_t n : cfg.n_grid) {
    std::vector<double> errs;
    for (std::uint64_t seed : cfg.seeds) {
      const std::uint64_t cell = derive_seed(derive_seed(seed, n), 5);
      const Dataset train = generate(problem, n, cell);
      const Dataset test = generate(problem, cfg.n_test, derive_seed(cell, 1));
      const RegressorPtr s = fit_regressor(cfg.estimator, train.c, train.y);
      const Vector pred = s->predict(test.c);
      double se = 0.0;
      std::vector<double> row(static_cast<std::size_t>(test.dc()));
      for (Eigen::Index i = 0; i < test.c.rows(); ++i) {
        for (int j = 0; j < test.dc(); ++j) row[static_cast<std::size_t>(j)] = test.c(i, j);
        const double d = pred(i) - s0(row);
        se += d * d;
      }
      errs.push_back(std::sqrt(se / static_cast<double>(test.c.rows())));
    }
    res.error.push_back(rms(errs));
    res.per_seed.push_back(errs);
  }
  fit_log_log(res.n_grid, res.error, res.slope, res.intercept);
  bootstrap_slope(res.n_grid, res.per_seed, cfg.bootstrap, derive_seed(cfg.seeds.front(), 0xB007), res.slope_ci_low,
                  res.slope_ci_high);
  res.flag = res.slope < -0.25 ? "PASS" : "FAIL";
  return res;
}

// ---------------------------------------------------------------------------

Json IllPosednessResult::to_json() const {
  return {{"nu", nu}, {"theta_argmax", to_vec(theta_argmax)}, {"excluded", excluded}, {"warnings", warnings}};
}

IllPosednessResult ill_posedness_estimate(const IllPosednessProblem& problem, int theta_samples, std::size_t mc_n,
                                          std::uint64_t seed, const std::vector<Vector>& extra_thetas) {
  if (theta_samples < 100) throw ArgumentError("ill_posedness_estimate: theta_samples must be >= 100");
  if (mc_n < 10) throw ArgumentError("ill_posedness_estimate: mc_n too small");
  const bool toy = problem.family == "linear_toy";
  if (!toy && problem.family != "demand_iv") throw ArgumentError("ill_posedness_estimate: unknown family");

  // Outer sample of (c, x) and the conditional law of the endogenous column.
  const Dataset d = toy ? gen_linear_toy({mc_n, derive_seed(seed, 1), 2.0, problem.strength})
                        : gen_demand_iv({0.9, problem.strength, mc_n, derive_seed(seed, 1), false});
  const double theta0 = 2.0;
  BasisMap basis = !problem.basis.empty() ? BasisMap::from_json(problem.basis)
                                          : (toy ? BasisMap::identity(1) : demand_basis());
  if (!toy && problem.basis.empty()) basis.adapt_to(d.x);
  const CmrLayout layout = CmrLayout::of(d);
  const int p = basis.output_dim();

  // Stacked v = [f0(x), phi(x)] and u = E[v | c]; ratio^2 = e'Gx e / e'Gc e
  // with e = [1, -theta].
  Matrix gx = Matrix::Zero(p + 1, p + 1), gc = Matrix::Zero(p + 1, p + 1);
  Vector v(p + 1), u(p + 1);
  std::vector<double> c(static_cast<std::size_t>(d.dc())), x(static_cast<std::size_t>(d.dx()));
  std::vector<double> phi(static_cast<std::size_t>(p));
  Rng rng(derive_seed(seed, 2));
  const int inner = 100;
  for (std::size_t i = 0; i < mc_n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (int j = 0; j < d.dc(); ++j) c[static_cast<std::size_t>(j)] = d.c(r, j);
    for (int j = 0; j < d.dx(); ++j) x[static_cast<std::size_t>(j)] = d.x(r, j);
    v(0) = d.truth->f0(x);
    basis.evaluate(x, phi);
    for (int k = 0; k < p; ++k) v(k + 1) = phi[static_cast<std::size_t>(k)];
    GaussianMixtureParams law;
    if (toy) {
      law = {{1.0}, {problem.strength * c[0]}, {std::sqrt(2.0)}};
    } else {
      law = {{1.0}, {25.0 + (problem.strength * c[0] + 3.0) * demand_psi(c[1])}, {1.0}};
    }
    const ExpectationNodes nodes = mixture_nodes(law, inner, rng);
    layout.fill_x(c, 0.0, x);
    basis.expected(x, layout.endogenous, nodes.points, nodes.weights, phi);
    for (int k = 0; k < p; ++k) u(k + 1) = phi[static_cast<std::size_t>(k)];
    double ef = 0.0;
    for (std::size_t m = 0; m < nodes.points.size(); ++m) {
      layout.fill_x(c, nodes.points[m], x);
      ef += nodes.weights[m] * d.truth->f0(x);
    }
    u(0) = ef;
    gx.selfadjointView<Eigen::Lower>().rankUpdate(v);
    gc.selfadjointView<Eigen::Lower>().rankUpdate(u);
  }
  gx = gx.selfadjointView<Eigen::Lower>();
  gc = gc.selfadjointView<Eigen::Lower>();
  gx /= static_cast<double>(mc_n);
  gc /= static_cast<double>(mc_n);

  // Centre of the theta cloud: theta0 on the toy, the L2 projection of f0
  // onto the family otherwise.
  Vector centre(p);
  if (toy && p == 1) {
    centre(0) = theta0;
  } else {
    Matrix a = gx.bottomRightCorner(p, p);
    a.diagonal().array() += 1e-10 * std::max(a.trace() / p, 1e-300);
    centre = a.ldlt().solve(gx.bottomLeftCorner(p, 1));
  }
  IllPosednessResult res;
  res.theta_argmax = centre;
  Rng trng(derive_seed(seed, 3));
  std::vector<Vector> thetas = extra_thetas;
  for (int s = 0; s < theta_samples; ++s) {
    Vector th(p);
    for (int k = 0; k < p; ++k) th(k) = centre(k) + trng.normal();
    thetas.push_back(th);
  }
  for (const Vector& th : thetas) {
    if (th.size() != p) throw ShapeError("ill_posedness_estimate: theta length differs from basis dimension");
    Vector e(p + 1);
    e(0) = 1.0;
    e.tail(p) = -th;
    const double num = e.dot(gx * e), den = e.dot(gc * e);
    if (!(den >= 1e-12)) {
      ++res.excluded;
      res.warnings.push_back("near-unidentified theta excluded (denominator " + format_double(den) + ")");
      continue;
    }
    const double ratio = std::sqrt(std::max(num, 0.0) / den);
    if (ratio > res.nu) {
      res.nu = ratio;
      res.theta_argmax = th;
    }
  }
  return res;
}

}  // namespace dmlcmr

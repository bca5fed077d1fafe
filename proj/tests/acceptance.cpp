// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dmlcmr/cli.hpp"
#include "dmlcmr/eval.hpp"
#include "dmlcmr/io.hpp"
#include "dmlcmr/score.hpp"

using namespace dmlcmr;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;
bool g_audits = true;  // fold audits of criteria 3-7

int jobs() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

std::vector<std::uint64_t> seeds20() {
  std::vector<std::uint64_t> s;
  for (std::uint64_t i = 1; i <= 20; ++i) s.push_back(i);
  return s;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void criterion(int id, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs < limit_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++g_failures;
  std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << o.detail << "  runtime " << fmt(secs)
            << "s (limit " << fmt(limit_s) << "s" << (in_time ? "" : ", exceeded") << ")" << std::endl;
}

std::vector<BenchmarkReport> run_bench(const ProblemSpec& problem, const std::vector<std::string>& methods,
                                       const std::vector<std::size_t>& n_grid) {
  BenchmarkConfig cfg;
  cfg.problem = problem;
  for (const auto& m : methods) cfg.methods.push_back(default_method(m, problem.generator));
  cfg.n_grid = n_grid;
  cfg.seeds = seeds20();
  cfg.seed = 0;
  cfg.jobs = jobs();
  auto reports = benchmark(cfg, "acceptance");
  for (const auto& r : reports) {
    g_audits = g_audits && r.audit_passed;
    for (const auto& f : r.failures) std::cout << "  failed cell " << r.method << " n=" << r.n << ": " << f << "\n";
  }
  return reports;
}

const BenchmarkReport& find(const std::vector<BenchmarkReport>& rs, const std::string& method, std::size_t n) {
  for (const auto& r : rs) {
    if (r.method == method && r.n == n) return r;
  }
  throw std::runtime_error("missing report " + method);
}

bool complete(const BenchmarkReport& r) { return r.failures.empty() && r.mse.size() == r.seeds.size(); }

int inversions(const std::vector<double>& v, bool increasing) {
  int k = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (increasing ? v[i] < v[i - 1] : v[i] > v[i - 1]) ++k;
  }
  return k;
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
  return s + "]";
}

}  // namespace

int main() {
  std::cout << "acceptance suite (" << jobs() << " worker threads)" << std::endl;

  criterion(1, 60.0, [] {
    const ToyProblem toy;
    const std::vector<double> r_grid{-0.1, -0.03, -0.01, 0.01, 0.03, 0.1};
    bool ok = true;
    std::string d;
    for (const auto& dir : standard_directions(toy, 1)) {
      const auto est = gateaux_derivative(ScoreKind::kOrthogonal, toy, dir, r_grid, 1000000, 11);
      ok = ok && std::abs(est.derivative) <= 3.0 * est.std_error;
      d += dir.name + ": d=" + fmt(est.derivative) + " se=" + fmt(est.std_error) + "; ";
    }
    return Outcome{ok, "orthogonal score, |d| <= 3 se in every direction. " + d};
  });

  criterion(2, 60.0, [] {
    const ToyProblem toy;
    const auto est = gateaux_derivative(ScoreKind::kNaive, toy, naive_confounded_direction(toy),
                                        {-0.1, -0.03, -0.01, 0.01, 0.03, 0.1}, 1000000, 12);
    const bool ok = std::abs(est.derivative) > 5.0 * est.std_error;
    return Outcome{ok, "naive score, direction dg(c)=c, need |d| > 5 se: d=" + fmt(est.derivative) +
                           " se=" + fmt(est.std_error) + " ratio=" + fmt(std::abs(est.derivative) / est.std_error)};
  });

  criterion(3, 300.0, [] {
    RateStudyConfig cfg;
    cfg.seeds = seeds20();
    cfg.fit.solver = "closed-form";
    const auto r = rate_study(cfg);
    g_audits = g_audits && r.audit_passed;
    const bool ok = r.slope >= -0.65 && r.slope <= -0.35;
    return Outcome{ok, "slope=" + fmt(r.slope) + " ci=[" + fmt(r.slope_ci_low) + ", " + fmt(r.slope_ci_high) +
                           "] need [-0.65, -0.35]; rms=" + list(r.error)};
  });

  criterion(4, 300.0, [] {
    BiasInjectionConfig cfg;
    cfg.seeds = seeds20();
    cfg.fit.solver = "closed-form";
    const auto r = bias_injection_study(cfg);
    g_audits = g_audits && r.audit_passed;
    const bool ok = r.slope_dml >= 1.5 && r.slope_naive <= 1.3;
    return Outcome{ok, "slope_dml=" + fmt(r.slope_dml) + " (need >= 1.5) slope_naive=" + fmt(r.slope_naive) +
                           " (need <= 1.3); err_dml=" + list(r.error_dml) + " err_naive=" + list(r.error_naive)};
  });

  criterion(5, 1200.0, [] {
    ProblemSpec p;
    p.generator = "demand_iv";
    const auto rs = run_bench(p, {"dml-cmr", "naive-two-stage"}, {5000});
    const auto& dml = find(rs, "dml-cmr", 5000);
    const auto& naive = find(rs, "naive-two-stage", 5000);
    const double ratio = dml.median_standardised / naive.median_standardised;
    auto within3 = [](double v, double ref) { return v >= ref / 3.0 && v <= ref * 3.0; };
    const bool ok = complete(dml) && complete(naive) && ratio < 0.9 && within3(dml.median_standardised, 0.0632) &&
                    within3(naive.median_standardised, 0.1020);
    return Outcome{ok, "standardised medians dml=" + fmt(dml.median_standardised) + " (ref 0.0632) naive=" +
                           fmt(naive.median_standardised) + " (ref 0.1020) ratio=" + fmt(ratio) +
                           " (need < 0.9, each within x3); original units dml=" + fmt(dml.median) +
                           " naive=" + fmt(naive.median)};
  });

  criterion(6, 2700.0, [] {
    const std::vector<double> strengths{1.0, 0.8, 0.6, 0.4, 0.2, 0.01};
    std::vector<double> dml, naive;
    bool ok = true;
    for (double s : strengths) {
      ProblemSpec p;
      p.generator = "demand_iv";
      p.params = {{"iv_strength", s}};
      const auto rs = run_bench(p, {"dml-cmr", "naive-two-stage"}, {5000});
      const auto& a = find(rs, "dml-cmr", 5000);
      const auto& b = find(rs, "naive-two-stage", 5000);
      ok = ok && complete(a) && complete(b) && a.median_standardised < b.median_standardised;
      dml.push_back(a.median_standardised);
      naive.push_back(b.median_standardised);
    }
    const int inv = inversions(dml, true);
    ok = ok && inv <= 1;
    return Outcome{ok, "strength " + list(strengths) + " dml=" + list(dml) + " naive=" + list(naive) +
                           " inversions=" + std::to_string(inv) + " (need <= 1 and dml < naive everywhere)"};
  });

  criterion(7, 1800.0, [] {
    ProblemSpec p;
    p.generator = "pcl_demand";
    const std::vector<std::size_t> ns{1000, 5000, 7500};
    const auto rs = run_bench(p, {"dml-cmr"}, ns);
    std::vector<double> med;
    bool ok = true;
    for (auto n : ns) {
      const auto& r = find(rs, "dml-cmr", n);
      ok = ok && complete(r);
      med.push_back(r.median);
    }
    const auto ce = run_bench(p, {"ce-dml-cmr"}, {1000});
    const auto& c = find(ce, "ce-dml-cmr", 1000);
    const double ratio = c.median / med[0];
    const int inv = inversions(med, false);
    ok = ok && complete(c) && inv <= 1 && ratio <= 1.5 && ratio >= 1.0 / 1.5;
    return Outcome{ok, "K-fold medians over n=[1000, 5000, 7500]: " + list(med) + " inversions=" +
                           std::to_string(inv) + "; CE/K-fold at n=1000: " + fmt(ratio) + " (need within x1.5)"};
  });

  criterion(8, 60.0, [] {
    const auto r = ill_posedness_estimate({"linear_toy", 1.0, Json::object()}, 1000, 100000, 8);
    const double rel = std::abs(r.nu - std::sqrt(3.0)) / std::sqrt(3.0);
    return Outcome{rel <= 0.05, "nu=" + fmt(r.nu) + " target sqrt(3)=" + fmt(std::sqrt(3.0)) +
                                    " rel.err=" + fmt(rel) + " excluded=" + std::to_string(r.excluded)};
  });

  criterion(9, 600.0, [] {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "dmlcmr_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const Json cfg{{"seed", 2024},
                   {"problem", {{"generator", "pcl_demand"}}},
                   {"bench", {{"methods", {"dml-cmr", "naive-two-stage"}}, {"n_grid", {1000}}, {"seeds", {1, 2, 3}}}}};
    const std::string path = (dir / "config.json").string();
    write_file_atomic(path, cfg.dump(2));
    std::ostringstream o1, o2, e1, e2;
    const int c1 = cli::run({"bench", "--config", path, "--out", (dir / "a").string()}, o1, e1);
    const int c2 = cli::run({"bench", "--config", path, "--out", (dir / "b").string(), "--jobs", "2"}, o2, e2);
    bool same = c1 == 0 && c2 == 0;
    std::string hash;
    if (same) {
      const Json s1 = Json::parse(o1.str()), s2 = Json::parse(o2.str());
      hash = s1.at("config_hash");
      same = s2.at("config_hash") == hash;
      const auto a = s1.at("artifacts").get<std::vector<std::string>>();
      const auto b = s2.at("artifacts").get<std::vector<std::string>>();
      for (std::size_t k = 0; same && k < a.size(); ++k) same = read_file(a[k]) == read_file(b[k]);
    }
    return Outcome{same && g_audits, std::string("repeat run byte-identical: ") + (same ? "yes" : "no") +
                                         " (hash " + hash + "); fold audits of criteria 3-7: " +
                                         (g_audits ? "passed" : "FAILED")};
  });

  criterion(10, 120.0, [] {
    NuisanceRateConfig cfg;
    cfg.seeds = seeds20();
    cfg.estimator.kind = "ridge";
    const auto ridge = nuisance_rate_study(cfg);
    cfg.estimator.kind = "constant";
    const auto constant = nuisance_rate_study(cfg);
    const bool ok = ridge.flag == "PASS" && constant.flag == "FAIL";
    return Outcome{ok, "ridge slope=" + fmt(ridge.slope) + " flag=" + ridge.flag + "; constant slope=" +
                           fmt(constant.slope) + " flag=" + constant.flag};
  });

  std::cout << (g_failures == 0 ? "all criteria passed" : std::to_string(g_failures) + " criteria failed") << std::endl;
  return g_failures == 0 ? 0 : 1;
}

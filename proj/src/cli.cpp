#include "dmlcmr/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

#include "dmlcmr/error.hpp"
#include "dmlcmr/eval.hpp"
#include "dmlcmr/io.hpp"
#include "dmlcmr/rng.hpp"

namespace dmlcmr::cli {

namespace {

namespace fs = std::filesystem;

/// Invalid configuration: exit 2 with the offending field.
struct ConfigError : Error {
  std::string field;
  ConfigError(std::string f, const std::string& msg) : Error(msg), field(std::move(f)) {}
};

/// Field named by a library message of the form "field.path: text".
std::string field_of(const std::string& msg) {
  const auto p = msg.find(": ");
  if (p == std::string::npos) return "";
  const std::string head = msg.substr(0, p);
  return head.find(' ') == std::string::npos ? head : "";
}

template <typename F>
auto in_section(const std::string& prefix, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const ArgumentError& e) {
    const std::string f = field_of(e.what());
    throw ConfigError(f.empty() ? prefix : (f.rfind(prefix, 0) == 0 ? f : prefix + "." + f), e.what());
  } catch (const Json::exception& e) {
    throw ConfigError(prefix, e.what());
  }
}

void check_keys(const Json& j, const std::string& prefix, const std::vector<std::string>& known) {
  if (!j.is_object()) throw ConfigError(prefix, prefix + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      const std::string f = prefix.empty() ? key : prefix + "." + key;
      throw ConfigError(f, f + ": unknown field");
    }
  }
}

template <typename T>
T get_or(const Json& j, const std::string& key, const std::string& field, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError(field, field + ": wrong type");
  }
}

std::vector<std::uint64_t> default_seeds() {
  std::vector<std::uint64_t> s(20);
  std::iota(s.begin(), s.end(), std::uint64_t{1});
  return s;
}

/// Method entry: a method name, or an object merged over that method's
/// defaults for the problem's generator.
MethodSpec parse_method(const Json& j, const std::string& generator, const std::string& field) {
  return in_section(field, [&] {
    std::string method;
    Json patch = Json::object();
    if (j.is_string()) {
      method = j.get<std::string>();
    } else if (j.is_object()) {
      check_keys(j, field, {"name", "method", "nuisances", "fit", "structural"});
      method = j.value("method", std::string("dml-cmr"));
      patch = j;
    } else {
      throw ConfigError(field, field + ": expected a method name or object");
    }
    if (method != "dml-cmr" && method != "ce-dml-cmr" && method != "naive-two-stage") {
      throw ConfigError(field + ".method", field + ".method: unknown method '" + method + "'");
    }
    Json base = default_method(method, generator).to_json();
    if (patch.contains("structural")) base["structural"] = Json::object();
    base.merge_patch(patch);
    return MethodSpec::from_json(base);
  });
}

struct Settings {
  std::string command;
  Json config = Json::object();
  std::string out = "out";
  int jobs = 1;
  std::uint64_t seed = 0;
  bool dry_run = false;
  std::string hash;
};

Json status(const Settings& s, const Json& artifacts) {
  return {{"status", "ok"}, {"command", s.command}, {"config_hash", s.hash}, {"artifacts", artifacts}};
}

ProblemSpec parse_problem(const Json& cfg) {
  return in_section("problem", [&] {
    const Json p = cfg.value("problem", Json::object());
    check_keys(p, "problem", {"generator", "params", "n_test"});
    return ProblemSpec::from_json(p);
  });
}

fs::path artifact(const Settings& s, const std::string& stem, const std::string& ext) {
  return fs::path(s.out) / (stem + "_" + s.hash + ext);
}

void prepare_out(const Settings& s) { fs::create_directories(s.out); }

// ---------------------------------------------------------------------------

int cmd_gen(const Settings& s, std::ostream& out) {
  const ProblemSpec problem = parse_problem(s.config);
  const Json g = s.config.value("gen", Json::object());
  check_keys(g, "gen", {"n"});
  const auto n = get_or<std::size_t>(g, "n", "gen.n", 1000);
  if (n < 1) throw ConfigError("gen.n", "gen.n: must be >= 1");
  if (s.dry_run) {
    out << status(s, Json::array()).dump() << "\n";
    return kExitOk;
  }
  const Dataset d = generate(problem, n, s.seed);
  prepare_out(s);
  Json meta = dataset_sidecar(d);
  meta["config_hash"] = s.hash;
  const fs::path csv = artifact(s, "data", ".csv"), side = artifact(s, "data", ".meta.json");
  write_file_atomic(csv.string(), dataset_to_csv(d));
  write_file_atomic(side.string(), meta.dump(2) + "\n");
  out << status(s, {csv.string(), side.string()}).dump() << "\n";
  return kExitOk;
}

int cmd_fit(const Settings& s, std::ostream& out) {
  const Json f = s.config.value("fit", Json::object());
  check_keys(f, "fit", {"data", "roles", "method", "standardise"});
  if (!f.contains("data")) throw ConfigError("fit.data", "fit.data: dataset path required");
  const auto path = get_or<std::string>(f, "data", "fit.data", "");
  if (!fs::exists(path)) throw ConfigError("fit.data", "fit.data: file '" + path + "' does not exist");

  // Roles from the config, else from the sidecar written by gen.
  Json meta = Json::object();
  fs::path side = fs::path(path);
  side.replace_extension(".meta.json");
  if (fs::exists(side)) meta = Json::parse(read_file(side.string()));
  const Json roles = f.contains("roles") ? f.at("roles") : meta.value("roles", Json());
  if (roles.is_null()) throw ConfigError("fit.roles", "fit.roles: no roles given and no sidecar found");
  RoleSchema schema = in_section("fit.roles", [&] {
    check_keys(roles, "fit.roles", {"y", "x", "c"});
    RoleSchema r;
    r.y = roles.at("y").get<std::string>();
    r.x = roles.at("x").get<std::vector<std::string>>();
    r.c = roles.at("c").get<std::vector<std::string>>();
    return r;
  });
  const std::string generator = meta.value("generator", std::string("demand_iv"));
  const MethodSpec method = parse_method(f.value("method", Json("dml-cmr")), generator, "fit.method");
  Dataset data;
  try {
    data = ingest_csv(path, schema);
  } catch (const SchemaError& e) {
    throw ConfigError("fit.roles", e.what());
  }
  std::vector<std::string> stdz_names;
  if (f.contains("standardise")) {
    stdz_names = get_or<std::vector<std::string>>(f, "standardise", "fit.standardise", {});
  } else {
    stdz_names = {data.y_name, data.x_names[static_cast<std::size_t>(data.endogenous_column())]};
  }
  if (s.dry_run) {
    out << status(s, Json::array()).dump() << "\n";
    return kExitOk;
  }

  const Standardiser stdz = stdz_names.empty() ? Standardiser() : fit_standardiser(data, stdz_names);
  const Dataset train = stdz_names.empty() ? data : stdz.apply(data);
  const Json sspec = method.structural.empty() ? Json::object() : method.structural;
  const StructuralModel init = make_structural(sspec, train, derive_seed(s.seed, 2));
  FitConfig fc = method.fit;
  fc.seed = derive_seed(s.seed, 3);
  FittedCMR fit;
  if (method.method == "dml-cmr") {
    fit = fit_dml_cmr(train, crossfit_nuisances(train, fc, method.nuisances), fc, init);
  } else if (method.method == "ce-dml-cmr") {
    fit = fit_ce_dml_cmr(train, fc, init, method.nuisances);
  } else {
    fit = fit_naive_two_stage(train, fc, init, method.nuisances);
  }
  Json doc = fit.to_json();
  doc["config_hash"] = s.hash;
  doc["standardiser"] = stdz.to_json();
  doc["units_note"] = "model predicts standardised outcome from standardised inputs; invert with standardiser";
  prepare_out(s);
  const fs::path p = artifact(s, "fit", ".json");
  write_file_atomic(p.string(), doc.dump(2) + "\n");
  out << status(s, {p.string()}).dump() << "\n";
  return kExitOk;
}

int cmd_bench(const Settings& s, std::ostream& out, std::ostream& err) {
  BenchmarkConfig bc;
  bc.problem = parse_problem(s.config);
  const Json b = s.config.value("bench", Json::object());
  check_keys(b, "bench", {"methods", "n_grid", "seeds", "record_runtime"});
  const Json methods = b.value("methods", Json::array({"dml-cmr", "naive-two-stage"}));
  if (!methods.is_array() || methods.empty()) throw ConfigError("bench.methods", "bench.methods: need at least one method");
  for (std::size_t i = 0; i < methods.size(); ++i) {
    bc.methods.push_back(parse_method(methods[i], bc.problem.generator, "bench.methods[" + std::to_string(i) + "]"));
  }
  bc.n_grid = get_or<std::vector<std::size_t>>(b, "n_grid", "bench.n_grid", {5000});
  bc.seeds = get_or<std::vector<std::uint64_t>>(b, "seeds", "bench.seeds", default_seeds());
  bc.record_runtime = get_or<bool>(b, "record_runtime", "bench.record_runtime", false);
  if (bc.n_grid.empty()) throw ConfigError("bench.n_grid", "bench.n_grid: need at least one n");
  if (bc.seeds.empty()) throw ConfigError("bench.seeds", "bench.seeds: need at least one seed");
  bc.jobs = s.jobs;
  bc.seed = s.seed;
  if (s.dry_run) {
    out << status(s, Json::array()).dump() << "\n";
    return kExitOk;
  }
  const auto reports = benchmark(bc, s.hash);
  prepare_out(s);
  const fs::path pj = artifact(s, "bench", ".json"), pc = artifact(s, "bench", ".csv"), ps = artifact(s, "bench", ".svg");
  Json doc{{"config_hash", s.hash}, {"reports", benchmark_json(reports)}};
  write_file_atomic(pj.string(), doc.dump(2) + "\n");
  write_file_atomic(pc.string(), benchmark_csv(reports));
  write_file_atomic(ps.string(), benchmark_svg(reports, bc.problem.generator + " (config " + s.hash + ")"));
  Json failures = Json::array();
  for (const auto& r : reports) {
    for (const auto& f : r.failures) failures.push_back({{"method", r.method}, {"n", r.n}, {"cell", f}});
  }
  const Json arts{pj.string(), pc.string(), ps.string()};
  if (!failures.empty()) {
    err << Json{{"status", "runtime-error"}, {"command", s.command}, {"config_hash", s.hash},
                {"failed_cells", failures}, {"artifacts", arts}}.dump()
        << "\n";
    return kExitRuntime;
  }
  out << status(s, arts).dump() << "\n";
  return kExitOk;
}

int cmd_ortho(const Settings& s, std::ostream& out) {
  const Json o = s.config.value("ortho", Json::object());
  check_keys(o, "ortho", {"mc_n", "r_grid", "bootstrap", "theta0", "kappa"});
  ToyProblem tp;
  tp.theta0 = get_or<double>(o, "theta0", "ortho.theta0", tp.theta0);
  tp.kappa = get_or<double>(o, "kappa", "ortho.kappa", tp.kappa);
  const auto mc_n = get_or<std::size_t>(o, "mc_n", "ortho.mc_n", 1000000);
  const auto r_grid = get_or<std::vector<double>>(o, "r_grid", "ortho.r_grid", {-0.01, 0.01});
  const int boot = get_or<int>(o, "bootstrap", "ortho.bootstrap", 200);
  if (mc_n < 2) throw ConfigError("ortho.mc_n", "ortho.mc_n: must be >= 2");
  if (boot < 2) throw ConfigError("ortho.bootstrap", "ortho.bootstrap: must be >= 2");
  for (double r : r_grid) {
    if (r == 0.0 || std::find(r_grid.begin(), r_grid.end(), -r) == r_grid.end()) {
      throw ConfigError("ortho.r_grid", "ortho.r_grid: must be nonzero and symmetric around 0");
    }
  }
  if (s.dry_run) {
    out << status(s, Json::array()).dump() << "\n";
    return kExitOk;
  }
  auto section = [&](ScoreKind kind, const std::vector<PerturbationDirection>& dirs, std::uint64_t task) {
    Json list = Json::array();
    bool all_pass = true;
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      const auto est = gateaux_derivative(kind, tp, dirs[k], r_grid, mc_n, derive_seed(s.seed, task + k), boot);
      all_pass = all_pass && est.verdict == "pass";
      list.push_back(orthogonality_report(est));
    }
    return Json{{"verdict", all_pass ? "pass" : "fail"}, {"directions", list}};
  };
  Json doc{{"config_hash", s.hash},
           {"orthogonal", section(ScoreKind::kOrthogonal, standard_directions(tp, derive_seed(s.seed, 1)), 10)},
           {"naive", section(ScoreKind::kNaive, {naive_confounded_direction(tp)}, 20)}};
  prepare_out(s);
  const fs::path p = artifact(s, "ortho", ".json");
  write_file_atomic(p.string(), doc.dump(2) + "\n");
  out << status(s, {p.string()}).dump() << "\n";
  return kExitOk;
}

int cmd_rate(const Settings& s, std::ostream& out) {
  const Json r = s.config.value("rate", Json::object());
  const std::string kind = get_or<std::string>(r, "kind", "rate.kind", "theta");
  Json doc{{"config_hash", s.hash}, {"kind", kind}};
  if (kind == "theta") {
    check_keys(r, "rate", {"kind", "n_grid", "seeds", "analytic_nuisances", "theta0", "kappa", "bootstrap", "fit"});
    RateStudyConfig rc;
    rc.fit.lambda = 0.0;
    rc.n_grid = get_or<std::vector<std::size_t>>(r, "n_grid", "rate.n_grid", rc.n_grid);
    rc.seeds = get_or<std::vector<std::uint64_t>>(r, "seeds", "rate.seeds", default_seeds());
    rc.analytic_nuisances = get_or<bool>(r, "analytic_nuisances", "rate.analytic_nuisances", false);
    rc.theta0 = get_or<double>(r, "theta0", "rate.theta0", rc.theta0);
    rc.kappa = get_or<double>(r, "kappa", "rate.kappa", rc.kappa);
    rc.bootstrap = get_or<int>(r, "bootstrap", "rate.bootstrap", rc.bootstrap);
    if (r.contains("fit")) {
      Json fj = rc.fit.to_json();
      fj.merge_patch(r.at("fit"));
      rc.fit = in_section("rate.fit", [&] { return FitConfig::from_json(fj); });
    }
    if (rc.n_grid.size() < 3) throw ConfigError("rate.n_grid", "rate.n_grid: need at least 3 grid points");
    for (auto& seed : rc.seeds) seed = derive_seed(s.seed, seed);
    if (s.dry_run) {
      out << status(s, Json::array()).dump() << "\n";
      return kExitOk;
    }
    doc["result"] = rate_study(rc).to_json();
  } else if (kind == "nuisance") {
    check_keys(r, "rate", {"kind", "estimator", "generator", "params", "n_grid", "seeds", "n_test", "bootstrap"});
    NuisanceRateConfig nc;
    nc.estimator = in_section("rate.estimator", [&] { return RegressorSpec::from_json(r.value("estimator", Json::object())); });
    nc.generator = get_or<std::string>(r, "generator", "rate.generator", nc.generator);
    if (nc.generator != "linear_toy" && nc.generator != "demand_iv") {
      throw ConfigError("rate.generator", "rate.generator: must be linear_toy or demand_iv");
    }
    nc.params = r.value("params", Json::object());
    nc.n_grid = get_or<std::vector<std::size_t>>(r, "n_grid", "rate.n_grid", nc.n_grid);
    nc.seeds = get_or<std::vector<std::uint64_t>>(r, "seeds", "rate.seeds", default_seeds());
    nc.n_test = get_or<std::size_t>(r, "n_test", "rate.n_test", nc.n_test);
    nc.bootstrap = get_or<int>(r, "bootstrap", "rate.bootstrap", nc.bootstrap);
    if (nc.n_grid.size() < 3) throw ConfigError("rate.n_grid", "rate.n_grid: need at least 3 grid points");
    for (auto& seed : nc.seeds) seed = derive_seed(s.seed, seed);
    if (s.dry_run) {
      out << status(s, Json::array()).dump() << "\n";
      return kExitOk;
    }
    doc["result"] = nuisance_rate_study(nc).to_json();
  } else if (kind == "bias-injection") {
    check_keys(r, "rate", {"kind", "b_grid", "seeds", "n", "theta0", "kappa"});
    BiasInjectionConfig bc;
    bc.fit.lambda = 0.0;
    bc.b_grid = get_or<std::vector<double>>(r, "b_grid", "rate.b_grid", bc.b_grid);
    bc.seeds = get_or<std::vector<std::uint64_t>>(r, "seeds", "rate.seeds", default_seeds());
    bc.n = get_or<std::size_t>(r, "n", "rate.n", bc.n);
    bc.theta0 = get_or<double>(r, "theta0", "rate.theta0", bc.theta0);
    bc.kappa = get_or<double>(r, "kappa", "rate.kappa", bc.kappa);
    for (auto& seed : bc.seeds) seed = derive_seed(s.seed, seed);
    if (s.dry_run) {
      out << status(s, Json::array()).dump() << "\n";
      return kExitOk;
    }
    doc["result"] = bias_injection_study(bc).to_json();
  } else {
    throw ConfigError("rate.kind", "rate.kind: must be theta, nuisance or bias-injection");
  }
  prepare_out(s);
  const fs::path p = artifact(s, "rate", ".json");
  write_file_atomic(p.string(), doc.dump(2) + "\n");
  out << status(s, {p.string()}).dump() << "\n";
  return kExitOk;
}

int cmd_nu(const Settings& s, std::ostream& out) {
  const Json v = s.config.value("nu", Json::object());
  check_keys(v, "nu", {"family", "strength", "basis", "theta_samples", "mc_n"});
  IllPosednessProblem ip;
  ip.family = get_or<std::string>(v, "family", "nu.family", ip.family);
  if (ip.family != "linear_toy" && ip.family != "demand_iv") {
    throw ConfigError("nu.family", "nu.family: must be linear_toy or demand_iv");
  }
  ip.strength = get_or<double>(v, "strength", "nu.strength", ip.strength);
  ip.basis = v.value("basis", Json::object());
  const int samples = get_or<int>(v, "theta_samples", "nu.theta_samples", 1000);
  const auto mc_n = get_or<std::size_t>(v, "mc_n", "nu.mc_n", ip.family == "linear_toy" ? 100000 : 20000);
  if (samples < 100) throw ConfigError("nu.theta_samples", "nu.theta_samples: must be >= 100");
  if (s.dry_run) {
    out << status(s, Json::array()).dump() << "\n";
    return kExitOk;
  }
  const auto res = in_section("nu", [&] { return ill_posedness_estimate(ip, samples, mc_n, s.seed); });
  Json doc{{"config_hash", s.hash}, {"family", ip.family}, {"strength", ip.strength}, {"result", res.to_json()}};
  prepare_out(s);
  const fs::path p = artifact(s, "nu", ".json");
  write_file_atomic(p.string(), doc.dump(2) + "\n");
  out << status(s, {p.string()}).dump() << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Settings s;
  std::string config_path, out_flag;
  std::optional<std::uint64_t> seed_flag;
  std::optional<int> jobs_flag;

  CLI::App app{"dmlcmr: debiased estimation for conditional moment restrictions"};
  app.require_subcommand(1, 1);
  for (const char* name : {"gen", "fit", "bench", "ortho-check", "rate", "nu"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON configuration file");
    sub->add_option("--out", out_flag, "output directory");
    sub->add_option("--seed", seed_flag, "global seed");
    sub->add_option("--jobs", jobs_flag, "worker threads");
    sub->add_flag("--dry-run", s.dry_run, "validate only, write nothing");
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << Json{{"status", "config-error"}, {"field", "argv"}, {"message", e.what()}}.dump() << "\n";
    return kExitConfig;
  }
  s.command = app.get_subcommands().front()->get_name();

  try {
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw ConfigError("--config", "--config: file '" + config_path + "' does not exist");
      try {
        s.config = Json::parse(read_file(config_path));
      } catch (const Json::parse_error& e) {
        throw ConfigError("--config", std::string("--config: invalid JSON: ") + e.what());
      }
    }
    check_keys(s.config, "", {"seed", "out", "jobs", "problem", "gen", "fit", "bench", "ortho", "rate", "nu"});
    // Flags override file values.
    if (seed_flag) s.config["seed"] = *seed_flag;
    if (!out_flag.empty()) s.config["out"] = out_flag;
    if (jobs_flag) s.config["jobs"] = *jobs_flag;
    if (!s.config.contains("seed")) throw ConfigError("seed", "seed: required (config or --seed)");
    s.seed = get_or<std::uint64_t>(s.config, "seed", "seed", 0);
    s.out = get_or<std::string>(s.config, "out", "out", "out");
    s.jobs = get_or<int>(s.config, "jobs", "jobs", 1);
    if (s.jobs < 1) throw ConfigError("jobs", "jobs: must be >= 1");
    // Output location and worker count do not affect results.
    Json hashed = s.config;
    hashed.erase("out");
    hashed.erase("jobs");
    hashed["command"] = s.command;
    s.hash = config_hash(hashed);

    if (s.command == "gen") return cmd_gen(s, out);
    if (s.command == "fit") return cmd_fit(s, out);
    if (s.command == "bench") return cmd_bench(s, out, err);
    if (s.command == "ortho-check") return cmd_ortho(s, out);
    if (s.command == "rate") return cmd_rate(s, out);
    return cmd_nu(s, out);
  } catch (const ConfigError& e) {
    err << Json{{"status", "config-error"}, {"field", e.field}, {"message", e.what()}}.dump() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << Json{{"status", "runtime-error"}, {"command", s.command}, {"config_hash", s.hash}, {"message", e.what()}}.dump()
        << "\n";
    return kExitRuntime;
  }
}

}  // namespace dmlcmr::cli

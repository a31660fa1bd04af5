#pragma once

// Experiment dispatch, output files and the run manifest.
//
// Every output file is written through OutputSet, so each one is listed in
// exactly one manifest. Outputs depend only on (config, seed): no timing or
// host data goes into them, and the replica reductions have a fixed order.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "p2flow/calculus.hpp"
#include "p2flow/csv.hpp"
#include "p2flow/ergodicity.hpp"
#include "p2flow/feynman_kac.hpp"
#include "p2flow/harness/config.hpp"
#include "p2flow/harness/digest.hpp"
#include "p2flow/harness/registry.hpp"
#include "p2flow/sde_solver.hpp"
#include "p2flow/wasserstein.hpp"

namespace p2flow::harness {

inline constexpr const char* kCodeVersion = "p2flow 0.1.0";

struct OutputRecord {
  std::string file;
  std::string sha256;
  std::size_t bytes = 0;
};

struct RunManifest {
  std::string experiment;
  std::string config_digest;
  std::string code_version = kCodeVersion;
  std::uint64_t seed = 0;
  std::vector<OutputRecord> outputs;
  std::string status = "ok";  // ok | non_convergence
  std::string started_utc;
  double elapsed_seconds = 0.0;

  json to_json() const {
    json files = json::array();
    for (const auto& o : outputs) files.push_back({{"file", o.file}, {"sha256", o.sha256}, {"bytes", o.bytes}});
    return {{"experiment", experiment},
            {"config_digest", config_digest},
            {"code_version", code_version},
            {"seed", seed},
            {"status", status},
            {"outputs", files},
            {"wall_clock", {{"started_utc", started_utc}, {"elapsed_seconds", elapsed_seconds}}}};
  }
};

// Digest of the canonical config with the output location removed.
inline std::string config_digest(const ExperimentConfig& cfg) {
  auto j = harness::to_json(cfg);
  j.erase("output");
  return sha256_hex(j.dump(2) + "\n");
}

class OutputSet {
 public:
  explicit OutputSet(std::filesystem::path dir) : dir_(std::move(dir)) {}

  void write(const std::string& name, const std::string& content) {
    std::ofstream out(dir_ / name, std::ios::binary);
    if (!out || !(out << content)) throw Error(ErrorCode::io, "cannot write " + (dir_ / name).string());
    records_.push_back({name, sha256_hex(content), content.size()});
  }

  const std::vector<OutputRecord>& records() const { return records_; }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::vector<OutputRecord> records_;
};

// An existing non-empty directory is a collision; nothing is overwritten.
inline void prepare_output_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec) || !fs::is_empty(dir, ec)) {
      throw ConfigError(ErrorCode::output_collision,
                        "output directory " + dir.string() + " already exists and is not empty");
    }
    return;
  }
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());
}

namespace detail {

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline std::string num(double v) { return format_double(v); }

inline json number_or_null(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline Point point_param(const json& params, const char* key, std::size_t d, const std::string& where) {
  Point p(d, 0.0);
  read_opt(params, key, p, where);
  if (p.size() != d) throw ConfigError(ErrorCode::config_parse, where + "." + key + " has wrong dimension");
  return p;
}

inline void check_grid(const ExperimentConfig& cfg) {
  try {
    (void)cfg.simulation().steps();
  } catch (const InvalidArgument& e) {
    throw ConfigError(ErrorCode::invalid_horizon, e.what());
  }
  if (cfg.replicas == 0) throw ConfigError(ErrorCode::config_parse, "simulation.replicas must be positive");
  if (cfg.thin == 0) throw ConfigError(ErrorCode::config_parse, "simulation.thin must be positive");
}

inline void check_start_zero(const ExperimentConfig& cfg) {
  if (cfg.start != 0.0) {
    throw ConfigError(ErrorCode::invalid_horizon, cfg.experiment + " runs from time 0");
  }
}

inline std::string points_csv(std::size_t dim, const std::vector<Point>& pts) {
  std::vector<double> flat;
  for (const auto& p : pts) flat.insert(flat.end(), p.begin(), p.end());
  std::ostringstream os;
  write_points_csv(os, dim, flat);
  return os.str();
}

inline std::string ensemble_csv(const ParticleEnsemble& mu) {
  std::ostringstream os;
  write_ensemble_csv(os, mu);
  return os.str();
}

// --- experiments -------------------------------------------------------------

inline void run_simulate(const ExperimentConfig& cfg, OutputSet& out) {
  reject_unknown(cfg.params, {"tagged"}, "params");
  check_grid(cfg);
  const auto coeffs = make_coefficients(cfg.coefficients);
  const std::size_t d = coeffs->dim();
  const auto mu0 = make_ensemble(cfg.initial, d, cfg);
  std::vector<std::vector<double>> tagged_rows;
  read_opt(cfg.params, "tagged", tagged_rows, "params");
  std::vector<double> tagged;
  for (const auto& row : tagged_rows) {
    if (row.size() != d) throw ConfigError(ErrorCode::config_parse, "params.tagged rows need dimension d");
    tagged.insert(tagged.end(), row.begin(), row.end());
  }
  const auto sc = cfg.simulation();
  const auto blocks = parallel_map(
      cfg.replicas,
      [&](std::size_t r) {
        const auto traj = simulate(mu0, tagged, cfg.start, cfg.horizon, *coeffs,
                                   sc.path(coeffs->noise_dim(), r), cfg.thin);
        std::ostringstream os;
        for (std::size_t s = 0; s < traj.times.size(); ++s) {
          const auto& snap = traj.snapshots[s];
          auto row = [&](const char* kind, std::size_t i, std::span<const double> p) {
            os << r << ',' << num(traj.times[s]) << ',' << kind << ',' << i;
            for (double v : p) os << ',' << num(v);
            os << '\n';
          };
          for (std::size_t i = 0; i < snap.base().size(); ++i) row("base", i, snap.base()[i]);
          for (std::size_t i = 0; i < snap.tagged_count(); ++i) row("tagged", i, snap.tagged(i));
        }
        return os.str();
      },
      cfg.threads);
  std::string csv = "replica,t,kind,index," + csv_header(d) + "\n";
  for (const auto& b : blocks) csv += b;
  out.write("trajectory.csv", csv);
}

inline void run_w2(const ExperimentConfig& cfg, OutputSet& out) {
  reject_unknown(cfg.params, {"mu", "nu", "method", "coupling", "dim"}, "params");
  std::size_t dim = 0;
  if (cfg.coefficients.contains("dim")) read_opt(cfg.coefficients, "dim", dim, "coefficients");
  read_opt(cfg.params, "dim", dim, "params");
  const auto mu = make_ensemble(
      cfg.params.contains("mu") ? ensemble_spec_from_json(cfg.params.at("mu"), "params.mu") : cfg.initial,
      dim, cfg);
  if (!cfg.params.contains("nu")) throw ConfigError(ErrorCode::config_parse, "params.nu is required");
  const auto nu = make_ensemble(ensemble_spec_from_json(cfg.params.at("nu"), "params.nu"), mu.dim(), cfg);
  std::string method = "assignment";
  bool coupling = false;
  read_opt(cfg.params, "method", method, "params");
  read_opt(cfg.params, "coupling", coupling, "params");

  json result{{"method", method}, {"n", mu.size()}, {"dim", mu.dim()}};
  std::optional<Coupling> plan;
  if (method == "assignment" || method == "bruteforce") {
    const auto r = method == "assignment" ? w2_assignment(mu, nu) : w2_bruteforce(mu, nu);
    result["distance"] = r.distance;
    result["squared_distance"] = r.coupling.cost;
    plan = r.coupling;
  } else if (method == "1d") {
    const double w = w2_1d(mu, nu);
    result["distance"] = w;
    result["squared_distance"] = w * w;
    if (coupling) plan = w2_assignment(mu, nu).coupling;
  } else {
    unresolved("w2 method", method, {"assignment", "bruteforce", "1d"});
  }
  out.write("w2.json", dump(result));
  if (coupling) {
    std::string csv = "source,target\n";
    for (std::size_t i = 0; i < plan->permutation.size(); ++i) {
      csv += std::to_string(i) + ',' + std::to_string(plan->permutation[i]) + '\n';
    }
    out.write("coupling.csv", csv);
  }
}

inline void run_generator_check(const ExperimentConfig& cfg, OutputSet& out) {
  reject_unknown(cfg.params, {"horizon", "point", "functionals"}, "params");
  check_grid(cfg);
  check_start_zero(cfg);
  const auto coeffs = make_coefficients(cfg.coefficients);
  const std::size_t d = coeffs->dim();
  const auto mu = make_ensemble(cfg.initial, d, cfg);
  MartingaleConfig mc;
  mc.horizon = cfg.horizon;
  read_opt(cfg.params, "horizon", mc.horizon, "params");
  mc.dt = cfg.dt;
  mc.replicas = cfg.replicas;
  mc.seed = cfg.seed;
  mc.threads = cfg.threads;
  const auto x = point_param(cfg.params, "point", d, "params");
  json list = json::array({{{"name", "mean"}}, {{"name", "second_moment"}},
                           {{"name", "squared_mean"}}, {{"name", "point_times_mean"}}});
  if (cfg.params.contains("functionals")) list = cfg.params.at("functionals");
  if (!list.is_array()) throw ConfigError(ErrorCode::config_parse, "params.functionals must be a list");
  std::vector<NamedFunctional> fs;
  for (std::size_t i = 0; i < list.size(); ++i) {
    fs.push_back(make_functional(list[i], d, "params.functionals[" + std::to_string(i) + "]"));
  }
  try {
    (void)SimulationConfig{mc.dt, 0.0, mc.horizon}.steps();
  } catch (const InvalidArgument& e) {
    throw ConfigError(ErrorCode::invalid_horizon, e.what());
  }
  std::string csv = "id,mean,stderr,z\n";
  for (const auto& f : fs) {
    const auto e = martingale_test_tilde(f.f, x, mu, *coeffs, mc);
    csv += f.name + ',' + num(e.mean) + ',' + num(e.std_error) + ',' + num(e.z_score()) + '\n';
  }
  out.write("generator_check.csv", csv);
}

inline void run_feynman_kac(const ExperimentConfig& cfg, OutputSet& out) {
  reject_unknown(cfg.params, {"t", "x", "max_nested_budget"}, "params");
  reject_unknown(cfg.functionals, {"terminal", "running", "potential"}, "functionals");
  check_grid(cfg);
  const auto coeffs = make_coefficients(cfg.coefficients);
  const std::size_t d = coeffs->dim();
  const auto mu = make_ensemble(cfg.initial, d, cfg);
  if (!cfg.functionals.contains("terminal")) {
    throw ConfigError(ErrorCode::config_parse, "functionals.terminal is required");
  }
  const auto terminal = make_functional(cfg.functionals.at("terminal"), d, "functionals.terminal");
  PDEData data;
  data.horizon = cfg.horizon;
  data.terminal = [f = terminal.f](std::span<const double> x, const ParticleEnsemble& m) { return f(x, m); };
  if (cfg.functionals.contains("running")) {
    const auto run = make_functional(cfg.functionals.at("running"), d, "functionals.running");
    data.running = [f = run.f](double, std::span<const double> x, const ParticleEnsemble& m) {
      return f(x, m);
    };
  }
  if (cfg.functionals.contains("potential")) {
    const auto pot = make_functional(cfg.functionals.at("potential"), d, "functionals.potential");
    if (!pot.bound) {
      throw ConfigError(ErrorCode::config_parse, "functionals.potential '" + pot.name + "' is not bounded");
    }
    data.potential_bound = *pot.bound;
    data.potential = [f = pot.f](double, std::span<const double> x, const ParticleEnsemble& m) {
      return f(x, m);
    };
  }
  double t = cfg.start;
  read_opt(cfg.params, "t", t, "params");
  const auto x = point_param(cfg.params, "x", d, "params");
  FKConfig fk;
  fk.dt = cfg.dt;
  fk.replicas = cfg.replicas;
  fk.seed = cfg.seed;
  fk.threads = cfg.threads;
  if (!(t >= 0.0 && t <= cfg.horizon)) throw ConfigError(ErrorCode::invalid_horizon, "params.t outside [0, horizon]");
  try {
    (void)SimulationConfig{cfg.dt, t, cfg.horizon}.steps();
  } catch (const InvalidArgument& e) {
    throw ConfigError(ErrorCode::invalid_horizon, e.what());
  }
  const auto e = estimate_U(t, x, mu, data, *coeffs, fk);
  out.write("estimate.json", dump({{"mean", e.mean},
                                   {"stderr", e.std_error},
                                   {"M", e.count},
                                   {"dt", cfg.dt},
                                   {"seed", cfg.seed},
                                   {"t", t},
                                   {"horizon", cfg.horizon}}));
}

inline void run_contract(const ExperimentConfig& cfg, OutputSet& out) {
  reject_unknown(cfg.params, {"nu", "report_times"}, "params");
  check_grid(cfg);
  check_start_zero(cfg);
  const auto coeffs = make_coefficients(cfg.coefficients);
  const std::size_t d = coeffs->dim();
  const auto mu = make_ensemble(cfg.initial, d, cfg);
  if (!cfg.params.contains("nu")) throw ConfigError(ErrorCode::config_parse, "params.nu is required");
  const auto nu = make_ensemble(ensemble_spec_from_json(cfg.params.at("nu"), "params.nu"), d, cfg);
  ContractionConfig cc;
  cc.dt = cfg.dt;
  cc.replicas = cfg.replicas;
  cc.seed = cfg.seed;
  cc.threads = cfg.threads;
  read_opt(cfg.params, "report_times", cc.report_times, "params");
  for (double t : cc.report_times) {
    try {
      (void)SimulationConfig{cfg.dt, 0.0, t}.steps();
    } catch (const InvalidArgument& e) {
      throw ConfigError(ErrorCode::invalid_horizon, std::string("report time: ") + e.what());
    }
  }
  const auto rep = contraction_experiment(mu, nu, *coeffs, cc);
  std::string csv = "t,estimate,stderr,bound\n";
  for (std::size_t i = 0; i < rep.times.size(); ++i) {
    csv += num(rep.times[i]) + ',' + num(rep.squared_w2[i].mean) + ',' +
           num(rep.squared_w2[i].std_error) + ',' + (rep.bound ? num((*rep.bound)[i]) : "") + '\n';
  }
  out.write("contraction.csv", csv);
  const auto k = coeffs->constants();
  out.write("summary.json", dump({{"initial_w2", rep.initial_w2},
                                  {"fitted_rate", number_or_null(rep.fitted_rate)},
                                  {"lambda", number_or_null(k.lambda)},
                                  {"kappa", number_or_null(k.kappa)},
                                  {"violations", rep.violations},
                                  {"monotone_index_cost", rep.monotone_index_cost},
                                  {"replicas", cfg.replicas}}));
}

inline void run_collapse(const ExperimentConfig& cfg, OutputSet& out) {
  reject_unknown(cfg.params, {"record_every", "spread_threshold"}, "params");
  check_grid(cfg);
  check_start_zero(cfg);
  const auto coeffs = make_coefficients(cfg.coefficients);
  const std::size_t d = coeffs->dim();
  const auto mu = make_ensemble(cfg.initial, d, cfg);
  CollapseConfig cc;
  cc.dt = cfg.dt;
  cc.horizon = cfg.horizon;
  cc.replicas = cfg.replicas;
  cc.seed = cfg.seed;
  cc.threads = cfg.threads;
  read_opt(cfg.params, "record_every", cc.record_every, "params");
  read_opt(cfg.params, "spread_threshold", cc.spread_threshold, "params");
  if (!(cc.record_every >= cfg.dt)) throw ConfigError(ErrorCode::invalid_horizon, "record_every below dt");
  const auto rep = collapse_experiment(mu, *coeffs, cc);
  std::string csv = "t,mean_squared_spread\n";
  for (std::size_t i = 0; i < rep.times.size(); ++i) {
    csv += num(rep.times[i]) + ',' + num(rep.mean_squared_spread[i]) + '\n';
  }
  out.write("collapse.csv", csv);
  out.write("collapse_points.csv", points_csv(d, rep.collapse_points));
  json means = json::array(), errs = json::array();
  for (const auto& e : rep.point_mean) {
    means.push_back(e.mean);
    errs.push_back(e.std_error);
  }
  const auto k = coeffs->constants();
  out.write("summary.json", dump({{"fitted_rate", number_or_null(rep.fitted_rate)},
                                  {"lambda", number_or_null(k.lambda)},
                                  {"kappa", number_or_null(k.kappa)},
                                  {"collapsed_fraction", rep.collapsed_fraction()},
                                  {"spread_threshold", cc.spread_threshold},
                                  {"point_mean", means},
                                  {"point_mean_stderr", errs},
                                  {"point_variance", rep.point_variance},
                                  {"replicas", cfg.replicas}}));
}

inline void run_picard(const ExperimentConfig& cfg, OutputSet& out, RunManifest& manifest) {
  reject_unknown(cfg.params, {"max_iters", "tol"}, "params");
  check_grid(cfg);
  const auto coeffs = make_coefficients(cfg.coefficients);
  const auto mu = make_ensemble(cfg.initial, coeffs->dim(), cfg);
  std::size_t max_iters = 50;
  double tol = 1e-8;
  read_opt(cfg.params, "max_iters", max_iters, "params");
  read_opt(cfg.params, "tol", tol, "params");
  const auto path = cfg.simulation().path(coeffs->noise_dim(), 0);
  const auto pr = picard_solve(mu, cfg.start, cfg.horizon, *coeffs, path, max_iters, tol);
  const auto direct = simulate(mu, cfg.start, cfg.horizon, *coeffs, path, path.steps());
  std::string csv = "iteration,distance,ratio\n";
  for (std::size_t i = 0; i < pr.distances.size(); ++i) {
    csv += std::to_string(i + 1) + ',' + num(pr.distances[i]) + ',' +
           (i > 0 && i - 1 < pr.ratios.size() ? num(pr.ratios[i - 1]) : "") + '\n';
  }
  out.write("picard.csv", csv);
  const auto& terminal = pr.trajectory.terminal().base();
  out.write("terminal.csv", ensemble_csv(terminal));
  const double gap = index_coupling_cost(terminal, direct.terminal().base());
  out.write("summary.json", dump({{"converged", pr.converged},
                                  {"iterations", pr.iterations},
                                  {"direct_terminal_cost", gap},
                                  {"max_ratio", pr.ratios.empty()
                                                    ? json(nullptr)
                                                    : json(*std::max_element(pr.ratios.begin(),
                                                                             pr.ratios.end()))}}));
  if (!pr.converged) manifest.status = "non_convergence";
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

// Checks the experiment name before anything touches the file system.
inline void validate_experiment(const ExperimentConfig& cfg) {
  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), cfg.experiment) == names.end()) {
    detail::unresolved("experiment", cfg.experiment.empty() ? "<missing>" : cfg.experiment, names);
  }
}

// Runs the experiment into `out_dir` and writes manifest.json there.
inline RunManifest run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  validate_experiment(cfg);
  prepare_output_dir(out_dir);
  RunManifest manifest;
  manifest.experiment = cfg.experiment;
  manifest.seed = cfg.seed;
  manifest.config_digest = config_digest(cfg);
  manifest.started_utc = detail::utc_now();
  const auto t0 = std::chrono::steady_clock::now();

  OutputSet out(out_dir);
  // The output location is left out so reruns elsewhere hash identically.
  auto canonical = to_json(cfg);
  canonical.erase("output");
  out.write("config.json", detail::dump(canonical));
  if (cfg.experiment == "simulate") detail::run_simulate(cfg, out);
  else if (cfg.experiment == "w2") detail::run_w2(cfg, out);
  else if (cfg.experiment == "generator-check") detail::run_generator_check(cfg, out);
  else if (cfg.experiment == "feynman-kac") detail::run_feynman_kac(cfg, out);
  else if (cfg.experiment == "contract") detail::run_contract(cfg, out);
  else if (cfg.experiment == "collapse") detail::run_collapse(cfg, out);
  else detail::run_picard(cfg, out, manifest);

  manifest.outputs = out.records();
  manifest.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream mf(out_dir / "manifest.json");
  if (!mf || !(mf << detail::dump(manifest.to_json()))) {
    throw Error(ErrorCode::io, "cannot write manifest in " + out_dir.string());
  }
  return manifest;
}

}  // namespace p2flow::harness

#pragma once

// Experiment configuration: one JSON document per run.
//
//   experiment    simulate | w2 | generator-check | feynman-kac | contract |
//                 collapse | picard
//   seed          required, unsigned
//   coefficients  {"family": ..., <family parameters>}
//   initial       {"sampler": ..., "n": ..., ...} or {"csv": path}
//   simulation    {"dt", "start", "horizon", "replicas", "thin", "threads"}
//   functionals   {role: {"name": ..., <parameters>}}
//   params        experiment-specific settings
//   output        output directory (P2FLOW_OUT and --out override it)
//
// Unknown keys are rejected so a typo cannot silently fall back to a default.
// Relative CSV paths resolve against the directory of the config file.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "p2flow/error.hpp"
#include "p2flow/sde_solver.hpp"

namespace p2flow::harness {

using nlohmann::json;

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"simulate", "w2",       "generator-check",
                                              "feynman-kac", "contract", "collapse",
                                              "picard"};
  return names;
}

// Initial ensemble: an explicit CSV file or a named sampler.
struct EnsembleSpec {
  std::string csv;
  std::string sampler = "gaussian";
  std::size_t n = 64;
  double scale = 1.0;
  std::vector<double> centre;  // empty means the origin
  std::uint64_t stream = 0;

  bool operator==(const EnsembleSpec&) const = default;
};

struct ExperimentConfig {
  std::string experiment;
  std::uint64_t seed = 0;
  json coefficients = json::object();
  EnsembleSpec initial;
  double dt = 1e-3;
  double start = 0.0;
  double horizon = 1.0;
  std::size_t replicas = 1;
  std::size_t thin = 1;
  std::size_t threads = 0;
  json functionals = json::object();
  json params = json::object();
  std::string output;

  // Not serialized: where relative paths resolve.
  std::filesystem::path base_dir;

  SimulationConfig simulation() const {
    SimulationConfig sc;
    sc.dt = dt;
    sc.start = start;
    sc.horizon = horizon;
    sc.replicas = replicas;
    sc.seed = seed;
    return sc;
  }

  std::filesystem::path resolve(const std::string& path) const {
    const std::filesystem::path p(path);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  }
};

namespace detail {

inline void reject_unknown(const json& obj, std::initializer_list<const char*> allowed,
                           const std::string& where) {
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!ok.count(key)) throw ConfigError(ErrorCode::config_parse, where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_opt(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(ErrorCode::config_parse, where + "." + key + ": " + e.what());
  }
}

inline void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(ErrorCode::config_parse, where + " must be an object");
}

}  // namespace detail

inline json to_json(const EnsembleSpec& s) {
  if (!s.csv.empty()) return json{{"csv", s.csv}};
  return json{{"sampler", s.sampler}, {"n", s.n},         {"scale", s.scale},
              {"centre", s.centre},   {"stream", s.stream}};
}

inline EnsembleSpec ensemble_spec_from_json(const json& j, const std::string& where) {
  detail::require_object(j, where);
  detail::reject_unknown(j, {"csv", "sampler", "n", "scale", "centre", "stream"}, where);
  EnsembleSpec s;
  detail::read_opt(j, "csv", s.csv, where);
  detail::read_opt(j, "sampler", s.sampler, where);
  detail::read_opt(j, "n", s.n, where);
  detail::read_opt(j, "scale", s.scale, where);
  detail::read_opt(j, "centre", s.centre, where);
  detail::read_opt(j, "stream", s.stream, where);
  if (!s.csv.empty() && j.size() > 1) {
    throw ConfigError(ErrorCode::config_parse, where + ": csv excludes sampler settings");
  }
  return s;
}

// Every field is written, defaults included, so the document is canonical.
inline json to_json(const ExperimentConfig& c) {
  return json{{"experiment", c.experiment},
              {"seed", c.seed},
              {"coefficients", c.coefficients},
              {"initial", to_json(c.initial)},
              {"simulation",
               {{"dt", c.dt},
                {"start", c.start},
                {"horizon", c.horizon},
                {"replicas", c.replicas},
                {"thin", c.thin},
                {"threads", c.threads}}},
              {"functionals", c.functionals},
              {"params", c.params},
              {"output", c.output}};
}

inline ExperimentConfig config_from_json(const json& j) {
  detail::require_object(j, "config");
  detail::reject_unknown(j, {"experiment", "seed", "coefficients", "initial", "simulation",
                             "functionals", "params", "output"},
                         "config");
  ExperimentConfig c;
  detail::read_opt(j, "experiment", c.experiment, "config");
  if (!j.contains("seed")) throw ConfigError(ErrorCode::config_parse, "config: seed is required");
  if (!j.at("seed").is_number_unsigned()) {
    throw ConfigError(ErrorCode::config_parse, "config.seed must be a non-negative integer");
  }
  c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("coefficients")) {
    c.coefficients = j.at("coefficients");
    detail::require_object(c.coefficients, "coefficients");
  }
  if (j.contains("initial")) c.initial = ensemble_spec_from_json(j.at("initial"), "initial");
  if (j.contains("simulation")) {
    const auto& s = j.at("simulation");
    detail::require_object(s, "simulation");
    detail::reject_unknown(s, {"dt", "start", "horizon", "replicas", "thin", "threads"}, "simulation");
    detail::read_opt(s, "dt", c.dt, "simulation");
    detail::read_opt(s, "start", c.start, "simulation");
    detail::read_opt(s, "horizon", c.horizon, "simulation");
    detail::read_opt(s, "replicas", c.replicas, "simulation");
    detail::read_opt(s, "thin", c.thin, "simulation");
    detail::read_opt(s, "threads", c.threads, "simulation");
  }
  if (j.contains("functionals")) {
    c.functionals = j.at("functionals");
    detail::require_object(c.functionals, "functionals");
  }
  if (j.contains("params")) {
    c.params = j.at("params");
    detail::require_object(c.params, "params");
  }
  detail::read_opt(j, "output", c.output, "config");
  return c;
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return to_json(a) == to_json(b);
}

inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(ErrorCode::config_parse, std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(ErrorCode::io, "cannot open config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), {});
  auto c = parse_config(text);
  c.base_dir = path.parent_path();
  return c;
}

}  // namespace p2flow::harness

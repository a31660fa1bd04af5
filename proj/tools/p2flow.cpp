// p2flow <subcommand> --config <path> [--seed N] [--out DIR] [--threads N]
// p2flow w2 --mu A.csv --nu B.csv [--coupling]
//
// Exit codes follow p2flow::ErrorCode; CLI11 parse failures map to usage (2).

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

#include "p2flow/harness/run.hpp"

namespace {

using namespace p2flow;
using namespace p2flow::harness;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  std::string mu, nu;
  bool coupling = false;
};

int code(ErrorCode c) { return static_cast<int>(c); }

// Ad-hoc w2 between two CSV files: prints the distance and optionally the
// optimal matching as "i j" lines. Writes no files.
int w2_direct(const Options& o) {
  const auto mu = read_ensemble_csv(o.mu);
  const auto nu = read_ensemble_csv(o.nu);
  const auto r = w2_assignment(mu, nu);
  std::cout << format_double(r.distance) << '\n';
  if (o.coupling) {
    for (std::size_t i = 0; i < r.coupling.permutation.size(); ++i) {
      std::cout << i << ' ' << r.coupling.permutation[i] << '\n';
    }
  }
  return 0;
}

std::filesystem::path output_dir(const Options& o, const ExperimentConfig& cfg) {
  if (!o.out.empty()) return o.out;
  if (const char* env = std::getenv("P2FLOW_OUT"); env && *env) return env;
  if (!cfg.output.empty()) return cfg.resolve(cfg.output);
  throw ConfigError(ErrorCode::config_parse, "no output directory: set output, P2FLOW_OUT or --out");
}

int run(const std::string& sub, const Options& o) {
  if (sub == "w2" && o.config.empty()) {
    if (o.mu.empty() || o.nu.empty()) {
      std::cerr << "p2flow w2: need --config or both --mu and --nu\n";
      return code(ErrorCode::usage);
    }
    return w2_direct(o);
  }
  if (o.config.empty()) {
    std::cerr << "p2flow " << sub << ": --config is required\n";
    return code(ErrorCode::usage);
  }
  auto cfg = load_config(o.config);
  if (cfg.experiment.empty()) cfg.experiment = sub;
  if (cfg.experiment != sub) {
    std::cerr << "p2flow " << sub << ": config is for experiment '" << cfg.experiment << "'\n";
    return code(ErrorCode::usage);
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  const auto dir = output_dir(o, cfg);
  cfg.output = dir.string();
  const auto manifest = run_experiment(cfg, dir);
  std::cout << (dir / "manifest.json").string() << '\n';
  if (manifest.status == "non_convergence") {
    std::cerr << "p2flow " << sub << ": Picard iteration did not converge\n";
    return code(ErrorCode::non_convergence);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Particle simulation of measure-dependent SDEs on P2"};
  app.require_subcommand(1);
  Options o;
  for (const auto& name : experiment_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " experiment");
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out, "output directory (overrides P2FLOW_OUT and config)");
    sub->add_option("--threads", o.threads, "replica threads, 0 = all cores");
    if (name == "w2") {
      sub->add_option("--mu", o.mu, "first ensemble CSV");
      sub->add_option("--nu", o.nu, "second ensemble CSV");
      sub->add_flag("--coupling", o.coupling, "print the optimal matching");
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : code(ErrorCode::usage);
  }
  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    return run(sub, o);
  } catch (const Error& e) {
    std::cerr << "p2flow " << sub << ": " << e.what() << '\n';
    return code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "p2flow " << sub << ": " << e.what() << '\n';
    return 1;
  }
}

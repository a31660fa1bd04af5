#pragma once

// Name -> object tables for coefficient families, ensemble samplers and
// functionals. An unknown name is ErrorCode::unresolved_name.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>

#include "p2flow/coefficients.hpp"
#include "p2flow/csv.hpp"
#include "p2flow/functionals.hpp"
#include "p2flow/harness/config.hpp"
#include "p2flow/rng.hpp"

namespace p2flow::harness {

namespace detail {

[[noreturn]] inline void unresolved(const std::string& kind, const std::string& name,
                                    const std::vector<std::string>& known) {
  std::string list;
  for (const auto& k : known) list += (list.empty() ? "" : ", ") + k;
  throw ConfigError(ErrorCode::unresolved_name,
                    "unknown " + kind + " '" + name + "' (known: " + list + ")");
}

template <class T>
T param(const json& p, const char* key, T fallback, const std::string& where) {
  read_opt(p, key, fallback, where);
  return fallback;
}

// sigma given as a scalar (s * I, default 1) or as a d x m row-major list.
inline std::pair<std::size_t, std::vector<double>> sigma_matrix(const json& p, std::size_t d,
                                                                const std::string& where) {
  const auto& s = p.contains("sigma") ? p.at("sigma") : json(1.0);
  if (s.is_number()) {
    std::vector<double> m(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) m[i * d + i] = s.get<double>();
    return {d, m};
  }
  std::vector<double> flat;
  read_opt(p, "sigma", flat, where);
  const auto noise = param<std::size_t>(p, "noise_dim", d, where);
  if (noise == 0 || flat.size() != d * noise) {
    throw ConfigError(ErrorCode::config_parse, where + ".sigma must have dim * noise_dim entries");
  }
  return {noise, flat};
}

}  // namespace detail

inline const std::vector<std::string>& coefficient_families() {
  static const std::vector<std::string> names{"linear_mean_field", "constant_diffusion",
                                              "tanh_interaction"};
  return names;
}

inline std::shared_ptr<CoefficientSet> make_coefficients(const json& spec) {
  const std::string where = "coefficients";
  detail::require_object(spec, where);
  std::string family;
  detail::read_opt(spec, "family", family, where);
  if (family.empty()) throw ConfigError(ErrorCode::config_parse, "coefficients.family is required");
  const auto d = detail::param<std::size_t>(spec, "dim", 1, where);
  if (d == 0) throw ConfigError(ErrorCode::config_parse, "coefficients.dim must be positive");
  try {
    if (family == "linear_mean_field") {
      detail::reject_unknown(spec, {"family", "dim", "a", "c", "sigma", "noise_dim"}, where);
      auto [m, sig] = detail::sigma_matrix(spec, d, where);
      return std::make_shared<LinearMeanField>(detail::param(spec, "a", 1.0, where),
                                               detail::param(spec, "c", 0.0, where), d, m, sig);
    }
    if (family == "constant_diffusion") {
      detail::reject_unknown(spec, {"family", "dim", "sigma", "noise_dim"}, where);
      auto [m, sig] = detail::sigma_matrix(spec, d, where);
      return std::make_shared<ConstantDiffusion>(d, m, sig);
    }
    if (family == "tanh_interaction") {
      detail::reject_unknown(spec, {"family", "dim", "a", "c", "s", "rho", "r"}, where);
      return std::make_shared<TanhInteraction>(
          d, detail::param(spec, "a", 1.0, where), detail::param(spec, "c", 0.0, where),
          detail::param(spec, "s", 1.0, where), detail::param(spec, "rho", 0.0, where),
          detail::param(spec, "r", 0.0, where));
    }
  } catch (const InvalidArgument& e) {
    throw ConfigError(ErrorCode::config_parse, e.what());
  }
  detail::unresolved("coefficient family", family, coefficient_families());
}

inline const std::vector<std::string>& ensemble_samplers() {
  static const std::vector<std::string> names{"gaussian", "uniform", "dirac"};
  return names;
}

// Sampler draws use a stream derived away from the replica path streams.
// dim == 0 accepts whatever dimension a CSV file has.
inline ParticleEnsemble make_ensemble(const EnsembleSpec& spec, std::size_t dim,
                                      const ExperimentConfig& cfg) {
  if (!spec.csv.empty()) {
    auto mu = read_ensemble_csv(cfg.resolve(spec.csv).string());
    if (dim != 0 && mu.dim() != dim) {
      throw ConfigError(ErrorCode::config_parse, spec.csv + ": dimension " +
                                                     std::to_string(mu.dim()) + " != " +
                                                     std::to_string(dim));
    }
    return mu;
  }
  if (dim == 0) throw ConfigError(ErrorCode::config_parse, "sampler needs a dimension");
  std::vector<double> centre = spec.centre;
  if (centre.empty()) centre.assign(dim, 0.0);
  if (centre.size() != dim) throw ConfigError(ErrorCode::config_parse, "initial.centre has wrong dimension");
  if (spec.n == 0) throw ConfigError(ErrorCode::config_parse, "initial.n must be positive");
  GaussianStream rng(cfg.seed, derive_stream_id(0x1417, spec.stream));
  std::vector<double> flat(spec.n * dim);
  if (spec.sampler == "gaussian") {
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = centre[i % dim] + spec.scale * rng.normal();
  } else if (spec.sampler == "uniform") {
    for (std::size_t i = 0; i < flat.size(); ++i) {
      flat[i] = centre[i % dim] + spec.scale * (2.0 * rng.uniform() - 1.0);
    }
  } else if (spec.sampler == "dirac") {
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = centre[i % dim];
  } else {
    detail::unresolved("ensemble sampler", spec.sampler, ensemble_samplers());
  }
  return ParticleEnsemble(dim, std::move(flat));
}

// A registered functional f(x, mu) with an optional sup-norm bound.
struct NamedFunctional {
  std::string name;
  LiftedFunctional f;
  std::optional<double> bound;
};

inline const std::vector<std::string>& functional_names() {
  static const std::vector<std::string> names{
      "mean", "second_moment", "squared_mean", "point_times_mean", "point_square",
      "constant", "cosine_of_mean", "bump"};
  return names;
}

//   mean              mu(x_i)
//   second_moment     mu(|x|^2)
//   squared_mean      mu(x_i)^2
//   point_times_mean  x_i mu(x_i)
//   point_square      x_i^2
//   constant          value
//   cosine_of_mean    amp cos(mu(x_i))              bounded by |amp|
//   bump              amp exp(-|x - centre|^2 / (2 width^2))   bounded by |amp|
inline NamedFunctional make_functional(const json& spec, std::size_t d, const std::string& where) {
  detail::require_object(spec, where);
  std::string name;
  detail::read_opt(spec, "name", name, where);
  const auto i = detail::param<std::size_t>(spec, "coordinate", 0, where);
  if (i >= d) throw ConfigError(ErrorCode::config_parse, where + ".coordinate out of range");
  auto only = [&](std::initializer_list<const char*> keys) { detail::reject_unknown(spec, keys, where); };
  auto measure = [d](ScalarField outer, std::vector<ScalarField> inner) {
    return LiftedFunctional::from_measure(CylindricalFunctional(d, std::move(outer), std::move(inner)));
  };
  if (name == "mean") {
    only({"name", "coordinate"});
    return {name, measure(fields::affine({1.0}), {fields::coordinate(d, i)}), std::nullopt};
  }
  if (name == "second_moment") {
    only({"name"});
    return {name, measure(fields::affine({1.0}), {fields::squared_norm(d)}), std::nullopt};
  }
  if (name == "squared_mean") {
    only({"name", "coordinate"});
    return {name, measure(fields::square(1, 0), {fields::coordinate(d, i)}), std::nullopt};
  }
  if (name == "point_times_mean") {
    only({"name", "coordinate"});
    return {name, LiftedFunctional(d, fields::product(d + 1, i, d), {fields::coordinate(d, i)}),
            std::nullopt};
  }
  if (name == "point_square") {
    only({"name", "coordinate"});
    return {name, LiftedFunctional::from_point(fields::square(d, i)), std::nullopt};
  }
  if (name == "constant") {
    only({"name", "value"});
    const double v = detail::param(spec, "value", 0.0, where);
    return {name, LiftedFunctional::from_point(fields::constant(d, v)), std::abs(v)};
  }
  if (name == "cosine_of_mean") {
    only({"name", "coordinate", "amp"});
    const double amp = detail::param(spec, "amp", 1.0, where);
    return {name, measure(fields::sine({1.0}, std::numbers::pi / 2, amp), {fields::coordinate(d, i)}),
            std::abs(amp)};
  }
  if (name == "bump") {
    only({"name", "centre", "width", "amp"});
    std::vector<double> centre(d, 0.0);
    detail::read_opt(spec, "centre", centre, where);
    if (centre.size() != d) throw ConfigError(ErrorCode::config_parse, where + ".centre has wrong dimension");
    const double width = detail::param(spec, "width", 1.0, where);
    if (!(width > 0.0)) throw ConfigError(ErrorCode::config_parse, where + ".width must be > 0");
    const double amp = detail::param(spec, "amp", 1.0, where);
    return {name, LiftedFunctional::from_point(fields::gaussian_bump(centre, width, amp)), std::abs(amp)};
  }
  if (name.empty()) throw ConfigError(ErrorCode::config_parse, where + ".name is required");
  detail::unresolved("functional", name, functional_names());
}

}  // namespace p2flow::harness

#pragma once

// Synchronous-coupling contraction experiments and the Dirac-collapse
// experiment for the image SDE.
//
// Coupling: nu is reordered by the optimal assignment to mu, both ensembles
// ride the same Brownian path, and W2 is recomputed exactly at each report
// time. Collapse: the spread s(t) = W2(L_t, delta_{mean L_t}) is the root
// mean squared distance to the ensemble mean (the coupling to a Dirac is
// unique), and the terminal mean is the collapse point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "p2flow/coefficients.hpp"
#include "p2flow/error.hpp"
#include "p2flow/measures.hpp"
#include "p2flow/parallel.hpp"
#include "p2flow/sde_solver.hpp"
#include "p2flow/stats.hpp"
#include "p2flow/wasserstein.hpp"

namespace p2flow {

// Least-squares slope of log(values) against times, negated. Needs two points.
inline std::optional<double> fit_decay_rate(std::span<const double> times,
                                            std::span<const double> values) {
  if (times.size() != values.size()) throw InvalidArgument("fit_decay_rate: length mismatch");
  if (times.size() < 2) return std::nullopt;
  double st = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    st += times[i];
    sy += std::log(values[i]);
  }
  const double n = static_cast<double>(times.size());
  const double tm = st / n, ym = sy / n;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    num += (times[i] - tm) * (std::log(values[i]) - ym);
    den += (times[i] - tm) * (times[i] - tm);
  }
  if (den == 0.0) return std::nullopt;
  return -num / den;
}

struct ContractionConfig {
  double dt = 1e-3;
  std::vector<double> report_times{0.25, 0.5, 1.0, 2.0};
  std::size_t replicas = 200;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

struct ContractionReport {
  std::vector<double> times;
  double initial_w2 = 0.0;                       // W2(mu, nu)
  std::vector<Estimate> squared_w2;              // E W2(L_t^mu, L_t^nu)^2
  std::vector<std::vector<double>> per_replica;  // W2 (not squared), [replica][time]
  std::optional<std::vector<double>> bound;      // W2(mu,nu)^2 e^{-(lambda-kappa) t}
  std::optional<double> fitted_rate;
  std::vector<std::size_t> violations;           // time indices with estimate > bound + 3 se
  bool monotone_index_cost = true;               // per-path coupling cost never increased
};

namespace detail {

inline std::vector<std::size_t> report_indices(const std::vector<double>& times, double dt,
                                               double& horizon) {
  if (times.empty()) throw InvalidArgument("report times must not be empty");
  if (!std::is_sorted(times.begin(), times.end()) || times.front() < 0.0) {
    throw InvalidArgument("report times must be sorted and >= 0");
  }
  horizon = times.back();
  std::vector<std::size_t> out;
  for (double t : times) {
    SimulationConfig sc;
    sc.dt = dt;
    sc.horizon = t;
    out.push_back(sc.steps());
  }
  return out;
}

// Fit over the time points whose estimate is resolved above its noise.
inline std::optional<double> fit_resolved(const std::vector<double>& times,
                                          const std::vector<Estimate>& est) {
  std::vector<double> t, v;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (est[i].mean > 0.0 && est[i].mean > 10.0 * est[i].std_error) {
      t.push_back(times[i]);
      v.push_back(est[i].mean);
    }
  }
  return fit_decay_rate(t, v);
}

}  // namespace detail

inline ContractionReport contraction_experiment(const ParticleEnsemble& mu,
                                                const ParticleEnsemble& nu,
                                                const CoefficientSet& coeffs,
                                                const ContractionConfig& cfg) {
  if (mu.size() != nu.size() || mu.dim() != nu.dim()) {
    throw InvalidArgument("contraction_experiment: ensembles must have equal size and dimension");
  }
  if (cfg.replicas < 2) throw InvalidArgument("contraction_experiment: need at least 2 replicas");
  double horizon = 0.0;
  const auto idx = detail::report_indices(cfg.report_times, cfg.dt, horizon);
  const auto initial = w2_assignment(mu, nu);
  const ParticleEnsemble nu_matched = apply_coupling(nu, initial.coupling);

  struct Replica {
    std::vector<double> w2;
    bool monotone = true;
  };
  const auto reps = parallel_map(
      cfg.replicas,
      [&](std::size_t r) {
        const auto path = BrownianPath::generate(coeffs.noise_dim(), cfg.dt, idx.back(), cfg.seed, r);
        Replica out;
        std::vector<ParticleEnsemble> mu_at(idx.size()), nu_at(idx.size());
        simulate_observed(mu, {}, 0.0, horizon, coeffs, path,
                          [&](std::size_t k, double, const ParticleEnsemble& base,
                              std::span<const double>) {
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                              if (idx[i] == k) mu_at[i] = base;
                            }
                          });
        simulate_observed(nu_matched, {}, 0.0, horizon, coeffs, path,
                          [&](std::size_t k, double, const ParticleEnsemble& base,
                              std::span<const double>) {
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                              if (idx[i] == k) nu_at[i] = base;
                            }
                          });
        double prev = index_coupling_cost(mu, nu_matched);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          out.w2.push_back(w2_assignment(mu_at[i], nu_at[i]).distance);
          const double c = index_coupling_cost(mu_at[i], nu_at[i]);
          if (c > prev * (1.0 + 1e-12) + 1e-300) out.monotone = false;
          prev = c;
        }
        return out;
      },
      cfg.threads);

  ContractionReport rep;
  rep.times = cfg.report_times;
  rep.initial_w2 = initial.distance;
  for (const auto& r : reps) {
    rep.per_replica.push_back(r.w2);
    rep.monotone_index_cost = rep.monotone_index_cost && r.monotone;
  }
  std::vector<double> col(cfg.replicas);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t r = 0; r < cfg.replicas; ++r) col[r] = reps[r].w2[i] * reps[r].w2[i];
    rep.squared_w2.push_back(estimate_of(col));
  }
  const auto k = coeffs.constants();
  if (k.lambda && k.kappa) {
    std::vector<double> bound;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      bound.push_back(initial.distance * initial.distance *
                      std::exp(-(*k.lambda - *k.kappa) * rep.times[i]));
      if (rep.squared_w2[i].mean > bound.back() + 3.0 * rep.squared_w2[i].std_error) {
        rep.violations.push_back(i);
      }
    }
    rep.bound = std::move(bound);
  }
  rep.fitted_rate = detail::fit_resolved(rep.times, rep.squared_w2);
  return rep;
}

struct TaggedContractionReport {
  std::vector<double> times;
  std::vector<Estimate> squared_distance;    // E |X_t^{x,mu} - X_t^{y,nu}|^2
  std::optional<std::vector<double>> bound;  // |x-y|^2 e^{-lambda t} + W2^2 e^{-(lambda-kappa) t}
  std::vector<std::size_t> violations;
};

inline TaggedContractionReport tagged_contraction(std::span<const double> x,
                                                  const ParticleEnsemble& mu,
                                                  std::span<const double> y,
                                                  const ParticleEnsemble& nu,
                                                  const CoefficientSet& coeffs,
                                                  const ContractionConfig& cfg) {
  if (mu.size() != nu.size() || mu.dim() != nu.dim() || x.size() != mu.dim() ||
      y.size() != mu.dim()) {
    throw InvalidArgument("tagged_contraction: shape mismatch");
  }
  if (cfg.replicas < 2) throw InvalidArgument("tagged_contraction: need at least 2 replicas");
  double horizon = 0.0;
  const auto idx = detail::report_indices(cfg.report_times, cfg.dt, horizon);
  const auto initial = w2_assignment(mu, nu);
  const ParticleEnsemble nu_matched = apply_coupling(nu, initial.coupling);
  const std::size_t d = mu.dim();

  const auto reps = parallel_map(
      cfg.replicas,
      [&](std::size_t r) {
        const auto path = BrownianPath::generate(coeffs.noise_dim(), cfg.dt, idx.back(), cfg.seed, r);
        std::vector<double> xs(idx.size() * d), ys(idx.size() * d);
        auto recorder = [&](std::vector<double>& dst) {
          return [&](std::size_t k, double, const ParticleEnsemble&, std::span<const double> p) {
            for (std::size_t i = 0; i < idx.size(); ++i) {
              if (idx[i] == k) std::copy(p.begin(), p.end(), dst.begin() + i * d);
            }
          };
        };
        simulate_observed(mu, x, 0.0, horizon, coeffs, path, recorder(xs));
        simulate_observed(nu_matched, y, 0.0, horizon, coeffs, path, recorder(ys));
        std::vector<double> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          out[i] = detail::squared_distance(std::span<const double>(xs.data() + i * d, d),
                                            std::span<const double>(ys.data() + i * d, d));
        }
        return out;
      },
      cfg.threads);

  TaggedContractionReport rep;
  rep.times = cfg.report_times;
  std::vector<double> col(cfg.replicas);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t r = 0; r < cfg.replicas; ++r) col[r] = reps[r][i];
    rep.squared_distance.push_back(estimate_of(col));
  }
  const auto k = coeffs.constants();
  if (k.lambda && k.kappa) {
    const double dxy = detail::squared_distance(x, y);
    const double w2sq = initial.distance * initial.distance;
    std::vector<double> bound;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double t = rep.times[i];
      bound.push_back(dxy * std::exp(-*k.lambda * t) + w2sq * std::exp(-(*k.lambda - *k.kappa) * t));
      if (rep.squared_distance[i].mean > bound.back() + 3.0 * rep.squared_distance[i].std_error) {
        rep.violations.push_back(i);
      }
    }
    rep.bound = std::move(bound);
  }
  return rep;
}

// ---------------------------------------------------------------------------

struct CollapseConfig {
  double dt = 1e-3;
  double horizon = 12.0;
  double record_every = 0.5;
  std::size_t replicas = 1000;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  double spread_threshold = 1e-3;
};

struct CollapseReport {
  std::vector<double> times;
  std::vector<std::vector<double>> spread;  // s(t), [replica][time]
  std::vector<double> mean_squared_spread;  // E s(t)^2 per time
  std::vector<Point> collapse_points;       // terminal ensemble mean per replica
  std::size_t collapsed = 0;                // replicas with s(T) < threshold
  std::optional<double> fitted_rate;        // decay rate of E s(t)^2
  std::vector<Estimate> point_mean;         // per coordinate
  std::vector<double> point_variance;       // per coordinate, unbiased

  double collapsed_fraction() const {
    return collapse_points.empty() ? 0.0
                                   : static_cast<double>(collapsed) /
                                         static_cast<double>(collapse_points.size());
  }
};

// Root mean squared distance to the ensemble mean.
inline double spread_to_mean(const ParticleEnsemble& mu) {
  const auto c = mean(mu);
  double s = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) s += detail::squared_distance(mu[i], c);
  return std::sqrt(s / static_cast<double>(mu.size()));
}

// Per-coordinate mean estimate and unbiased variance of a sample of points.
inline void point_moments(const std::vector<Point>& pts, std::vector<Estimate>& means,
                          std::vector<double>& variances) {
  means.clear();
  variances.clear();
  if (pts.size() < 2) return;
  std::vector<double> col(pts.size());
  for (std::size_t a = 0; a < pts.front().size(); ++a) {
    for (std::size_t r = 0; r < pts.size(); ++r) col[r] = pts[r][a];
    const auto st = summarize(col);
    means.push_back(st.estimate());
    variances.push_back(st.variance());
  }
}

inline CollapseReport collapse_experiment(const ParticleEnsemble& mu, const CoefficientSet& coeffs,
                                          const CollapseConfig& cfg) {
  if (cfg.replicas < 2) throw InvalidArgument("collapse_experiment: need at least 2 replicas");
  if (!(cfg.record_every > 0.0)) throw InvalidArgument("collapse_experiment: record_every must be > 0");
  SimulationConfig sc;
  sc.dt = cfg.dt;
  sc.horizon = cfg.horizon;
  const std::size_t steps = sc.steps();
  SimulationConfig every;
  every.dt = cfg.dt;
  every.horizon = cfg.record_every;
  const std::size_t stride = every.steps();
  if (stride == 0) throw InvalidArgument("collapse_experiment: record_every below dt");

  struct Replica {
    std::vector<double> spread;
    Point centre;
  };
  const auto reps = parallel_map(
      cfg.replicas,
      [&](std::size_t r) {
        const auto path = BrownianPath::generate(coeffs.noise_dim(), cfg.dt, steps, cfg.seed, r);
        Replica out;
        const auto terminal = simulate_observed(
            mu, {}, 0.0, path.end_time(), coeffs, path,
            [&](std::size_t k, double, const ParticleEnsemble& base, std::span<const double>) {
              if (k % stride == 0 || k == steps) out.spread.push_back(spread_to_mean(base));
            });
        out.centre = mean(terminal.base());
        return out;
      },
      cfg.threads);

  CollapseReport rep;
  for (std::size_t k = 0; k <= steps; ++k) {
    if (k % stride == 0 || k == steps) rep.times.push_back(static_cast<double>(k) * cfg.dt);
  }
  for (const auto& r : reps) {
    rep.spread.push_back(r.spread);
    rep.collapse_points.push_back(r.centre);
    if (r.spread.back() < cfg.spread_threshold) ++rep.collapsed;
  }
  for (std::size_t i = 0; i < rep.times.size(); ++i) {
    double s = 0.0;
    for (const auto& r : reps) s += r.spread[i] * r.spread[i];
    rep.mean_squared_spread.push_back(s / static_cast<double>(reps.size()));
  }
  // Largest leading window above the floating-point floor.
  std::vector<double> t, v;
  for (std::size_t i = 0; i < rep.times.size() && rep.mean_squared_spread[i] > 1e-10; ++i) {
    t.push_back(rep.times[i]);
    v.push_back(rep.mean_squared_spread[i]);
  }
  rep.fitted_rate = fit_decay_rate(t, v);
  point_moments(rep.collapse_points, rep.point_mean, rep.point_variance);
  return rep;
}

struct StationaryConfig {
  double dt = 1e-3;
  double burn_in = 10.0;  // time each chain runs before its sample is taken
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

// Independent chains of the diagonal-restricted SDE dX = b(X, delta_X) dt +
// sigma(X, delta_X) dW started at x0; each contributes its end point.
inline std::vector<Point> diagonal_stationary_sampler(std::shared_ptr<const CoefficientSet> coeffs,
                                                std::span<const double> x0,
                                                const StationaryConfig& cfg) {
  const auto diag = diagonal_restriction(std::move(coeffs));
  if (x0.size() != diag->dim()) throw InvalidArgument("diagonal_stationary_sampler: wrong start dimension");
  SimulationConfig sc;
  sc.dt = cfg.dt;
  sc.horizon = cfg.burn_in;
  const std::size_t steps = sc.steps();
  const auto start = ParticleEnsemble::dirac(x0);
  return parallel_map(
      cfg.samples,
      [&](std::size_t r) {
        const auto path = BrownianPath::generate(diag->noise_dim(), cfg.dt, steps, cfg.seed, r);
        const auto end = simulate_observed(start, {}, 0.0, path.end_time(), *diag, path,
                                           [](std::size_t, double, const ParticleEnsemble&,
                                              std::span<const double>) {});
        const auto p = end.base()[0];
        return Point(p.begin(), p.end());
      },
      cfg.threads);
}

}  // namespace p2flow

#pragma once

// Monte Carlo evaluation of
//   U(t, x, mu) = E[ Phi(X_T, L_T) e^{int_t^T V} + int_t^T F(r) e^{int_t^r V} dr ]
// along the image SDE started at (x, mu) at time t, plus consistency checks
// against the backward equation d_t U + A~ U + V U + F = 0.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "p2flow/calculus.hpp"
#include "p2flow/coefficients.hpp"
#include "p2flow/error.hpp"
#include "p2flow/functionals.hpp"
#include "p2flow/measures.hpp"
#include "p2flow/parallel.hpp"
#include "p2flow/rng.hpp"
#include "p2flow/sde_solver.hpp"
#include "p2flow/stats.hpp"

namespace p2flow {

using PointMeasureFn = std::function<double(std::span<const double>, const ParticleEnsemble&)>;
using TimedPointMeasureFn =
    std::function<double(double, std::span<const double>, const ParticleEnsemble&)>;

struct PDEData {
  PointMeasureFn terminal;
  TimedPointMeasureFn running;    // empty means F = 0
  TimedPointMeasureFn potential;  // empty means V = 0
  double potential_bound = 0.0;   // sup |V|; every evaluation is checked against it
  double horizon = 1.0;
};

struct FKConfig {
  double dt = 1e-3;
  std::size_t replicas = 10000;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::size_t max_nested_budget = 20'000'000;  // outer * inner replicas
};

namespace detail {

inline std::size_t fk_steps(double from, double to, double dt) {
  SimulationConfig sc;
  sc.dt = dt;
  sc.start = from;
  sc.horizon = to;
  return sc.steps();
}

inline void check_fk_inputs(double t, std::span<const double> x, const ParticleEnsemble& mu,
                            const PDEData& data, const CoefficientSet& coeffs) {
  if (!data.terminal) throw InvalidArgument("PDEData: terminal functional missing");
  if (!(data.potential_bound >= 0.0) || !std::isfinite(data.potential_bound)) {
    throw InvalidArgument("PDEData: potential bound must be finite and >= 0");
  }
  if (!(t >= 0.0 && t <= data.horizon)) throw InvalidArgument("estimate_U: t outside [0, T]");
  if (x.size() != coeffs.dim() || mu.dim() != coeffs.dim()) {
    throw InvalidArgument("estimate_U: dimension mismatch");
  }
}

inline double potential_at(const PDEData& data, double t, std::span<const double> x,
                           const ParticleEnsemble& mu) {
  if (!data.potential) return 0.0;
  const double v = data.potential(t, x, mu);
  if (!(std::abs(v) <= data.potential_bound)) {
    throw InvalidArgument("potential value " + std::to_string(v) + " exceeds declared bound " +
                          std::to_string(data.potential_bound));
  }
  return v;
}

inline double running_at(const PDEData& data, double t, std::span<const double> x,
                         const ParticleEnsemble& mu) {
  return data.running ? data.running(t, x, mu) : 0.0;
}

// Weighted functional along one path on [from, to]. When `continuation` is
// set it replaces Phi at the end point (used by the nested estimator).
struct FKPathValue {
  double weight = 1.0;    // e^{int V}
  double running = 0.0;   // int F e^{int V}
  TaggedEnsemble end;
};

inline FKPathValue fk_path(double from, double to, std::span<const double> x,
                           const ParticleEnsemble& mu, const PDEData& data,
                           const CoefficientSet& coeffs, const BrownianPath& path) {
  FKPathValue out;
  double prev_v = 0.0, prev_fw = 0.0;
  const double dt = path.dt();
  out.end = simulate_observed(
      mu, x, from, to, coeffs, path,
      [&](std::size_t k, double t, const ParticleEnsemble& base, std::span<const double> tagged) {
        const double v = potential_at(data, t, tagged, base);
        const double f = running_at(data, t, tagged, base);
        if (k > path.grid_index(from)) {
          out.weight *= std::exp(0.5 * (prev_v + v) * dt);
          out.running += 0.5 * (prev_fw + f * out.weight) * dt;
        }
        prev_v = v;
        prev_fw = f * out.weight;
      });
  return out;
}

}  // namespace detail

// Per-replica samples of the Feynman-Kac functional. Replica r uses path
// stream r of cfg.seed.
inline std::vector<double> feynman_kac_samples(double t, std::span<const double> x,
                                               const ParticleEnsemble& mu, const PDEData& data,
                                               const CoefficientSet& coeffs, const FKConfig& cfg) {
  detail::check_fk_inputs(t, x, mu, data, coeffs);
  if (cfg.replicas < 2) throw InvalidArgument("estimate_U: need at least 2 replicas");
  const std::size_t steps = detail::fk_steps(t, data.horizon, cfg.dt);
  return parallel_map(
      cfg.replicas,
      [&](std::size_t r) {
        const auto path = BrownianPath::generate(coeffs.noise_dim(), cfg.dt, steps, cfg.seed, r, t);
        const auto pv = detail::fk_path(t, path.end_time(), x, mu, data, coeffs, path);
        return data.terminal(pv.end.tagged_positions(), pv.end.base()) * pv.weight + pv.running;
      },
      cfg.threads);
}

inline Estimate estimate_U(double t, std::span<const double> x, const ParticleEnsemble& mu,
                           const PDEData& data, const CoefficientSet& coeffs, const FKConfig& cfg) {
  return estimate_of(feynman_kac_samples(t, x, mu, data, coeffs, cfg));
}

// U(t) - E[U(t + eps, X, L) e^{int V} + int F e^{int V}] with the inner U
// re-estimated from `inner_replicas` independent paths per outer replica.
// Outer sample r pairs one direct sample with one nested sample, both on
// streams derived from r, so the returned standard error includes the
// inner Monte Carlo noise.
inline Estimate semigroup_consistency(double t, double eps, std::span<const double> x,
                                      const ParticleEnsemble& mu, const PDEData& data,
                                      const CoefficientSet& coeffs, const FKConfig& cfg,
                                      std::size_t inner_replicas) {
  detail::check_fk_inputs(t, x, mu, data, coeffs);
  if (!(eps >= 0.0) || t + eps > data.horizon + 1e-12) {
    throw InvalidArgument("semigroup_consistency: need 0 <= eps and t + eps <= T");
  }
  if (cfg.replicas < 2) throw InvalidArgument("semigroup_consistency: need at least 2 replicas");
  if (eps == 0.0) return Estimate{0.0, 0.0, cfg.replicas};
  if (inner_replicas < 1) throw InvalidArgument("semigroup_consistency: need inner replicas");
  if (cfg.replicas > cfg.max_nested_budget / inner_replicas) {
    throw InvalidArgument("semigroup_consistency: nested budget " + std::to_string(cfg.replicas) +
                          " x " + std::to_string(inner_replicas) + " exceeds cap " +
                          std::to_string(cfg.max_nested_budget));
  }
  const double mid = t + eps;
  const std::size_t full = detail::fk_steps(t, data.horizon, cfg.dt);
  const std::size_t head = detail::fk_steps(t, mid, cfg.dt);
  const std::size_t tail = detail::fk_steps(mid, data.horizon, cfg.dt);
  const std::size_t m = coeffs.noise_dim();

  const auto samples = parallel_map(
      cfg.replicas,
      [&](std::size_t r) {
        const auto direct_path =
            BrownianPath::generate(m, cfg.dt, full, cfg.seed, derive_stream_id(0, r), t);
        const auto direct = detail::fk_path(t, direct_path.end_time(), x, mu, data, coeffs,
                                            direct_path);
        const double lhs =
            data.terminal(direct.end.tagged_positions(), direct.end.base()) * direct.weight +
            direct.running;

        const auto head_path =
            BrownianPath::generate(m, cfg.dt, head, cfg.seed, derive_stream_id(1, r), t);
        const auto outer = detail::fk_path(t, head_path.end_time(), x, mu, data, coeffs, head_path);
        const auto x_mid = outer.end.tagged_positions();
        const auto& mu_mid = outer.end.base();
        const std::uint64_t inner_parent = derive_stream_id(2, r);
        double inner_sum = 0.0;
        for (std::size_t j = 0; j < inner_replicas; ++j) {
          const auto p = BrownianPath::generate(m, cfg.dt, tail, cfg.seed,
                                                derive_stream_id(inner_parent, j), mid);
          const auto pv = detail::fk_path(mid, p.end_time(), x_mid, mu_mid, data, coeffs, p);
          inner_sum += data.terminal(pv.end.tagged_positions(), pv.end.base()) * pv.weight +
                       pv.running;
        }
        const double inner = inner_sum / static_cast<double>(inner_replicas);
        return lhs - (inner * outer.weight + outer.running);
      },
      cfg.threads);
  return estimate_of(samples);
}

// d_t U + A~ U + V U + F at (t, x, mu) for a closed-form candidate U.
inline double analytic_residual(const std::function<LiftedFunctional(double)>& U, double t,
                                std::span<const double> x, const ParticleEnsemble& mu,
                                const PDEData& data, const CoefficientSet& coeffs,
                                double time_step = 1e-5) {
  const auto u_now = U(t);
  const double dt_u = (U(t + time_step)(x, mu) - U(t - time_step)(x, mu)) / (2.0 * time_step);
  const double gen = generator_A_tilde(u_now, x, mu, t, coeffs);
  const double v = data.potential ? data.potential(t, x, mu) : 0.0;
  return dt_u + gen + v * u_now(x, mu) + detail::running_at(data, t, x, mu);
}

}  // namespace p2flow

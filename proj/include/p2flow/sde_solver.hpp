#pragma once

// Euler-Maruyama for the image SDE
//
//   dX^{x,mu}_t = b(t, X_t, L_t) dt + sigma(t, X_t, L_t) dW_t,
//   L_t = mu o (X^{., mu}_t)^{-1},
//
// on an equal-weight ensemble. One Brownian increment per step drives every
// particle (common noise); the measure argument within a step is the
// pre-step base ensemble; tagged points follow the same flow but never enter
// the measure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "p2flow/coefficients.hpp"
#include "p2flow/error.hpp"
#include "p2flow/measures.hpp"
#include "p2flow/rng.hpp"
#include "p2flow/wasserstein.hpp"

namespace p2flow {

inline constexpr double kBlowUpThreshold = 1e12;

// One shared m-dimensional Brownian path on the grid t0 + k*dt, k = 0..steps.
class BrownianPath {
 public:
  BrownianPath(std::size_t noise_dim, double dt, std::vector<double> increments,
               double start_time = 0.0, std::uint64_t seed = 0, std::uint64_t stream_id = 0)
      : m_(noise_dim), dt_(dt), t0_(start_time), seed_(seed), stream_(stream_id),
        increments_(std::move(increments)) {
    if (m_ == 0) throw InvalidArgument("BrownianPath: noise dimension must be positive");
    if (!(dt_ > 0.0)) throw InvalidArgument("BrownianPath: dt must be > 0");
    if (increments_.size() % m_ != 0) {
      throw InvalidArgument("BrownianPath: increments not a multiple of the noise dimension");
    }
  }

  // I.i.d. N(0, dt I_m) increments from stream (seed, stream_id).
  static BrownianPath generate(std::size_t noise_dim, double dt, std::size_t steps,
                               std::uint64_t seed, std::uint64_t stream_id,
                               double start_time = 0.0) {
    if (!(dt > 0.0)) throw InvalidArgument("BrownianPath: dt must be > 0");
    GaussianStream rng(seed, stream_id);
    const double scale = std::sqrt(dt);
    std::vector<double> inc(steps * noise_dim);
    for (double& v : inc) v = scale * rng.normal();
    return BrownianPath(noise_dim, dt, std::move(inc), start_time, seed, stream_id);
  }

  std::size_t noise_dim() const noexcept { return m_; }
  std::size_t steps() const noexcept { return increments_.size() / m_; }
  double dt() const noexcept { return dt_; }
  double start_time() const noexcept { return t0_; }
  double end_time() const noexcept { return time(steps()); }
  double time(std::size_t k) const noexcept { return t0_ + static_cast<double>(k) * dt_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }

  std::span<const double> increment(std::size_t k) const {
    return {increments_.data() + k * m_, m_};
  }

  // W_{time(k)} - W_{t0}.
  std::vector<double> displacement(std::size_t k) const {
    std::vector<double> w(m_, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t l = 0; l < m_; ++l) w[l] += increments_[j * m_ + l];
    }
    return w;
  }

  std::size_t grid_index(double t) const {
    const double k = (t - t0_) / dt_;
    const double r = std::round(k);
    if (std::abs(k - r) > 1e-9 * std::max(1.0, std::abs(k)) || r < 0.0 ||
        r > static_cast<double>(steps())) {
      throw InvalidArgument("BrownianPath: time " + format_time(t) + " is not on the grid [" +
                            format_time(t0_) + ", " + format_time(end_time()) + "] with dt " +
                            format_time(dt_));
    }
    return static_cast<std::size_t>(r);
  }

 private:
  static std::string format_time(double t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", t);
    return buf;
  }

  std::size_t m_;
  double dt_;
  double t0_;
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::vector<double> increments_;
};

struct SimulationConfig {
  double dt = 1e-3;
  double start = 0.0;
  double horizon = 1.0;
  std::size_t particles = 64;
  std::size_t replicas = 1;
  std::uint64_t seed = 0;

  // Number of steps; throws unless dt divides [start, horizon].
  std::size_t steps() const {
    if (!(dt > 0.0)) throw InvalidArgument("SimulationConfig: dt must be > 0");
    if (!(horizon >= start)) throw InvalidArgument("SimulationConfig: horizon before start");
    const double k = (horizon - start) / dt;
    const double r = std::round(k);
    if (std::abs(k - r) > 1e-9 * std::max(1.0, k)) {
      throw InvalidArgument("SimulationConfig: dt does not divide the horizon");
    }
    return static_cast<std::size_t>(r);
  }

  BrownianPath path(std::size_t noise_dim, std::uint64_t stream_id) const {
    return BrownianPath::generate(noise_dim, dt, steps(), seed, stream_id, start);
  }
};

struct Trajectory {
  std::vector<double> times;
  std::vector<TaggedEnsemble> snapshots;
  std::uint64_t path_stream = 0;

  const TaggedEnsemble& terminal() const { return snapshots.back(); }
};

namespace detail {

inline void check_update(double v, std::size_t step, std::size_t particle, bool tagged) {
  if (!std::isfinite(v) || std::abs(v) > kBlowUpThreshold) {
    throw NumericalAbort("Euler step " + std::to_string(step) + ": " +
                         (tagged ? "tagged point " : "particle ") + std::to_string(particle) +
                         " left the finite range (blow-up guard 1e12)");
  }
}

// Moves `points` (flat, d per point) one step with coefficients frozen at
// the pre-step base ensemble. Writes into `out`.
inline void euler_move(const FrozenCoefficients& frozen, std::size_t d, std::size_t m,
                       std::span<const double> points, std::span<const double> dw, double dt,
                       std::span<double> out, std::vector<double>& b, std::vector<double>& sig,
                       std::size_t step, bool tagged) {
  b.resize(d);
  sig.resize(d * m);
  for (std::size_t p = 0; p < points.size() / d; ++p) {
    const auto x = points.subspan(p * d, d);
    frozen.drift(x, b);
    frozen.diffusion(x, sig);
    for (std::size_t i = 0; i < d; ++i) {
      double v = x[i] + b[i] * dt;
      for (std::size_t l = 0; l < m; ++l) v += sig[i * m + l] * dw[l];
      check_update(v, step, p, tagged);
      out[p * d + i] = v;
    }
  }
}

inline void check_compatible(const ParticleEnsemble& mu, const CoefficientSet& coeffs,
                             const BrownianPath& path) {
  if (mu.dim() != coeffs.dim()) {
    throw InvalidArgument("ensemble dimension " + std::to_string(mu.dim()) +
                          " does not match coefficient dimension " + std::to_string(coeffs.dim()));
  }
  if (path.noise_dim() != coeffs.noise_dim()) {
    throw InvalidArgument("path noise dimension " + std::to_string(path.noise_dim()) +
                          " does not match coefficient noise dimension " +
                          std::to_string(coeffs.noise_dim()));
  }
}

}  // namespace detail

inline TaggedEnsemble euler_step(const TaggedEnsemble& state, double t,
                                 const CoefficientSet& coeffs, std::span<const double> dw,
                                 double dt, std::size_t step_index = 0) {
  const std::size_t d = coeffs.dim(), m = coeffs.noise_dim();
  if (state.dim() != d || dw.size() != m) throw InvalidArgument("euler_step: shape mismatch");
  const auto frozen = coeffs.freeze(t, state.base());
  std::vector<double> base(state.base().positions().size());
  std::vector<double> tagged(state.tagged_positions().size());
  std::vector<double> b, sig;
  detail::euler_move(*frozen, d, m, state.base().positions(), dw, dt, base, b, sig, step_index,
                     false);
  detail::euler_move(*frozen, d, m, state.tagged_positions(), dw, dt, tagged, b, sig, step_index,
                     true);
  return TaggedEnsemble(ParticleEnsemble(d, std::move(base)), std::move(tagged));
}

// Runs the scheme on [s, T] (both on the path grid) and calls
// observer(k, t_k, base, tagged_flat) at every grid index k, including s and T.
// Returns the terminal state.
template <class Observer>
TaggedEnsemble simulate_observed(const ParticleEnsemble& mu0, std::span<const double> tagged0,
                                 double s, double T, const CoefficientSet& coeffs,
                                 const BrownianPath& path, Observer&& observer) {
  detail::check_compatible(mu0, coeffs, path);
  const std::size_t d = coeffs.dim(), m = coeffs.noise_dim();
  if (tagged0.size() % d != 0) throw InvalidArgument("simulate: tagged points have wrong dimension");
  const std::size_t k0 = path.grid_index(s), k1 = path.grid_index(T);
  if (k1 < k0) throw InvalidArgument("simulate: T before s");

  ParticleEnsemble base = mu0;
  std::vector<double> tagged(tagged0.begin(), tagged0.end());
  std::vector<double> next_base(base.positions().size()), next_tagged(tagged.size());
  std::vector<double> b, sig;
  observer(k0, path.time(k0), static_cast<const ParticleEnsemble&>(base),
           std::span<const double>(tagged));
  for (std::size_t k = k0; k < k1; ++k) {
    const auto frozen = coeffs.freeze(path.time(k), base);
    const auto dw = path.increment(k);
    detail::euler_move(*frozen, d, m, base.positions(), dw, path.dt(), next_base, b, sig, k, false);
    detail::euler_move(*frozen, d, m, tagged, dw, path.dt(), next_tagged, b, sig, k, true);
    base = ParticleEnsemble(d, next_base);
    tagged.swap(next_tagged);
    observer(k + 1, path.time(k + 1), static_cast<const ParticleEnsemble&>(base),
             std::span<const double>(tagged));
  }
  return TaggedEnsemble(std::move(base), std::move(tagged));
}

// Snapshots at every `thin`-th grid point plus the terminal one.
inline Trajectory simulate(const ParticleEnsemble& mu0, std::span<const double> tagged0, double s,
                           double T, const CoefficientSet& coeffs, const BrownianPath& path,
                           std::size_t thin = 1) {
  if (thin == 0) throw InvalidArgument("simulate: thinning must be >= 1");
  Trajectory traj;
  traj.path_stream = path.stream_id();
  const std::size_t k0 = path.grid_index(s), k1 = path.grid_index(T);
  simulate_observed(mu0, tagged0, s, T, coeffs, path,
                    [&](std::size_t k, double t, const ParticleEnsemble& base,
                        std::span<const double> tagged) {
                      if ((k - k0) % thin == 0 || k == k1) {
                        traj.times.push_back(t);
                        traj.snapshots.emplace_back(base,
                                                    std::vector<double>(tagged.begin(), tagged.end()));
                      }
                    });
  return traj;
}

inline Trajectory simulate(const ParticleEnsemble& mu0, double s, double T,
                           const CoefficientSet& coeffs, const BrownianPath& path,
                           std::size_t thin = 1) {
  return simulate(mu0, std::span<const double>{}, s, T, coeffs, path, thin);
}

// ---------------------------------------------------------------------------
// Picard iteration: freeze the measure trajectory, solve the classical SDE
// driven by it, replace the trajectory by the new pushforward, repeat.

struct PicardResult {
  Trajectory trajectory;               // final iterate
  std::vector<double> distances;       // sup_k index cost between iterates n and n-1
  std::vector<double> ratios;          // distances[i] / distances[i-1]
  std::size_t iterations = 0;
  bool converged = false;
};

inline PicardResult picard_solve(const ParticleEnsemble& mu0, double s, double t_end,
                                 const CoefficientSet& coeffs, const BrownianPath& path,
                                 std::size_t max_iters = 50, double tol = 1e-8) {
  detail::check_compatible(mu0, coeffs, path);
  const std::size_t d = coeffs.dim(), m = coeffs.noise_dim();
  const std::size_t k0 = path.grid_index(s), k1 = path.grid_index(t_end);
  if (k1 < k0) throw InvalidArgument("picard_solve: end before start");
  const std::size_t len = k1 - k0 + 1;

  std::vector<ParticleEnsemble> frozen_path(len, mu0);
  PicardResult result;
  std::vector<double> next(mu0.positions().size()), b, sig;
  for (std::size_t iter = 1; iter <= max_iters; ++iter) {
    std::vector<ParticleEnsemble> iterate;
    iterate.reserve(len);
    iterate.push_back(mu0);
    for (std::size_t j = 0; j + 1 < len; ++j) {
      const std::size_t k = k0 + j;
      const auto frozen = coeffs.freeze(path.time(k), frozen_path[j]);
      detail::euler_move(*frozen, d, m, iterate.back().positions(), path.increment(k), path.dt(),
                         next, b, sig, k, false);
      iterate.emplace_back(d, next);
    }
    double dist = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      dist = std::max(dist, index_coupling_cost(iterate[j], frozen_path[j]));
    }
    if (!result.distances.empty()) {
      const double prev = result.distances.back();
      result.ratios.push_back(prev > 0.0 ? dist / prev : 0.0);
    }
    result.distances.push_back(dist);
    result.iterations = iter;
    frozen_path = std::move(iterate);
    if (dist < tol) {
      result.converged = true;
      break;
    }
  }
  result.trajectory.path_stream = path.stream_id();
  for (std::size_t j = 0; j < len; ++j) {
    result.trajectory.times.push_back(path.time(k0 + j));
    result.trajectory.snapshots.emplace_back(frozen_path[j]);
  }
  return result;
}

// ---------------------------------------------------------------------------

struct FlowDiscrepancy {
  double max_abs = 0.0;  // over every coordinate of base and tagged points
};

// Compares the direct run s -> T with s -> r followed by a restart r -> T on
// the same path tail.
inline FlowDiscrepancy flow_compose_check(const ParticleEnsemble& mu0,
                                          std::span<const double> tagged0, double s, double r,
                                          double T, const CoefficientSet& coeffs,
                                          const BrownianPath& path) {
  if (!(s <= r && r <= T)) throw InvalidArgument("flow_compose_check: need s <= r <= T");
  auto noop = [](std::size_t, double, const ParticleEnsemble&, std::span<const double>) {};
  const auto direct = simulate_observed(mu0, tagged0, s, T, coeffs, path, noop);
  const auto mid = simulate_observed(mu0, tagged0, s, r, coeffs, path, noop);
  const auto composed =
      simulate_observed(mid.base(), mid.tagged_positions(), r, T, coeffs, path, noop);
  FlowDiscrepancy out;
  auto compare = [&](std::span<const double> a, std::span<const double> b) {
    for (std::size_t i = 0; i < a.size(); ++i) out.max_abs = std::max(out.max_abs, std::abs(a[i] - b[i]));
  };
  compare(direct.base().positions(), composed.base().positions());
  compare(direct.tagged_positions(), composed.tagged_positions());
  return out;
}

// ---------------------------------------------------------------------------
// Conditional-law SDE dX = b(X, L(X_t | W)) dt + sigma(X, L(X_t | W)) dW with
// L(X_0) = mu: each initial sample rides as a tagged point on the image-SDE
// ensemble started at mu; the conditional law given W is the base pushforward.
// The samples must be drawn independently of the path's stream.

struct ConditionalSolution {
  Trajectory trajectory;

  std::size_t sample_count() const { return trajectory.terminal().tagged_count(); }
  // Empirical law of the sample terminals.
  ParticleEnsemble sample_law(std::size_t snapshot) const {
    const auto& st = trajectory.snapshots.at(snapshot);
    return ParticleEnsemble(st.dim(), std::vector<double>(st.tagged_positions().begin(),
                                                          st.tagged_positions().end()));
  }
  const ParticleEnsemble& conditional_law(std::size_t snapshot) const {
    return trajectory.snapshots.at(snapshot).base();
  }
};

inline ConditionalSolution conditional_mkv_solve(const ParticleEnsemble& mu0,
                                                 std::span<const double> samples, double s,
                                                 double T, const CoefficientSet& coeffs,
                                                 const BrownianPath& path, std::size_t thin = 1) {
  if (samples.empty()) throw InvalidArgument("conditional_mkv_solve: no initial samples");
  return {simulate(mu0, samples, s, T, coeffs, path, thin)};
}

}  // namespace p2flow

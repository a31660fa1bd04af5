#pragma once

// Lions-derivative calculus on cylindrical functionals, the generators of
// the measure-valued diffusion, square fields, martingale checks and the
// first-order derivative flows of the image SDE.
//
// For f(mu) = g(mu(h_1), ..., mu(h_k)):
//   Df(mu)(x)        = sum_i d_i g(u) grad h_i(x)
//   grad{Df(mu)}(x)  = sum_i d_i g(u) hess h_i(x)
//   D^2 f(mu)(x, y)  = sum_ij d_ij g(u) grad h_i(x) (x) grad h_j(y)
// with u = (mu(h_1), ..., mu(h_k)). On an ensemble every mu-integral is an
// exact average over particles.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "p2flow/coefficients.hpp"
#include "p2flow/functionals.hpp"
#include "p2flow/measures.hpp"
#include "p2flow/parallel.hpp"
#include "p2flow/sde_solver.hpp"
#include "p2flow/stats.hpp"

namespace p2flow {

namespace detail {

// Per-particle gradients of every inner function: grads[(p * k + i) * d + a].
inline std::vector<double> inner_gradients(const std::vector<ScalarField>& inner,
                                           const ParticleEnsemble& mu) {
  const std::size_t d = mu.dim(), k = inner.size();
  std::vector<double> out(mu.size() * k * d);
  for (std::size_t p = 0; p < mu.size(); ++p) {
    for (std::size_t i = 0; i < k; ++i) {
      inner[i].gradient(mu[p], std::span<double>(out.data() + (p * k + i) * d, d));
    }
  }
  return out;
}

inline void check_dims(const CylindricalFunctional& f, const ParticleEnsemble& mu) {
  if (f.dim() != mu.dim()) throw InvalidArgument("functional / ensemble dimension mismatch");
}

}  // namespace detail

inline Point lions_derivative_closed(const CylindricalFunctional& f, const ParticleEnsemble& mu,
                                     std::span<const double> x) {
  detail::check_dims(f, mu);
  const std::size_t d = f.dim(), k = f.arity();
  const auto u = f.moments(mu);
  std::vector<double> dg(k), gh(d);
  f.outer().gradient(u, dg);
  Point out(d, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    f.inner()[i].gradient(x, gh);
    for (std::size_t a = 0; a < d; ++a) out[a] += dg[i] * gh[a];
  }
  return out;
}

// d x d matrix [a][b] = sum_ij d_ij g * d_a h_i(x) * d_b h_j(y).
inline std::vector<double> second_lions_closed(const CylindricalFunctional& f,
                                               const ParticleEnsemble& mu,
                                               std::span<const double> x,
                                               std::span<const double> y) {
  detail::check_dims(f, mu);
  const std::size_t d = f.dim(), k = f.arity();
  const auto u = f.moments(mu);
  std::vector<double> H(k * k), gx(k * d), gy(k * d);
  f.outer().hessian(u, H);
  for (std::size_t i = 0; i < k; ++i) {
    f.inner()[i].gradient(x, std::span<double>(gx.data() + i * d, d));
    f.inner()[i].gradient(y, std::span<double>(gy.data() + i * d, d));
  }
  std::vector<double> out(d * d, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double h = H[i * k + j];
      if (h == 0.0) continue;
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = 0; b < d; ++b) out[a * d + b] += h * gx[i * d + a] * gy[j * d + b];
      }
    }
  }
  return out;
}

// <Df(mu), phi>_{L^2(mu)}
template <class Field>
double lions_directional_closed(const CylindricalFunctional& f, const ParticleEnsemble& mu,
                                Field&& phi) {
  const std::size_t d = mu.dim();
  Point dir(d);
  double s = 0.0;
  for (std::size_t p = 0; p < mu.size(); ++p) {
    const auto df = lions_derivative_closed(f, mu, mu[p]);
    phi(mu[p], std::span<double>(dir));
    for (std::size_t a = 0; a < d; ++a) s += df[a] * dir[a];
  }
  return s / static_cast<double>(mu.size());
}

// Central difference of eps -> F(mu o (Id + eps phi)^{-1}) at 0, for any
// functional F on ensembles.
template <class Functional, class Field>
double lions_derivative_numeric(Functional&& F, const ParticleEnsemble& mu, Field&& phi,
                                double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("lions_derivative_numeric: eps must be > 0");
  return (F(perturb(mu, phi, eps)) - F(perturb(mu, phi, -eps))) / (2.0 * eps);
}

// ---------------------------------------------------------------------------
// Generators.

// How the double mu(dy) mu(dz) integral of the second-order measure term is
// evaluated. Both are exact for cylindrical f; `direct` sums all n^2 pairs,
// `factorized` uses D^2 f(y, z) = sum_ij d_ij g grad h_i(y) (x) grad h_j(z)
// to split it into a product of two single sums.
enum class PairSum { factorized, direct };

struct GeneratorTerms {
  double pair = 0.0;    // 1/2 <sigma(y) sigma(z)^T, D^2 f(y, z)> mu(dy) mu(dz)
  double trace = 0.0;   // 1/2 <sigma sigma^T(y), grad{Df}(y)> mu(dy)
  double drift = 0.0;   // <b(y), Df(y)> mu(dy)
  double point = 0.0;   // lifted only: 1/2 <sigma sigma^T(x), hess_x f> + <b(x), grad_x f>
  double cross = 0.0;   // lifted only: <D grad f(x)(y), sigma(x) sigma(y)^T> mu(dy)

  double total() const { return pair + trace + drift + point + cross; }
};

namespace detail {

// Measure-slot part of the generator for outer derivatives dg (k) and
// d2g (k x k) at the current moments. Also returns v_i = mu(sigma^T grad h_i)
// (k x m) for reuse by the lifted cross term.
inline GeneratorTerms measure_generator(const std::vector<ScalarField>& inner,
                                        std::span<const double> dg, std::span<const double> d2g,
                                        const ParticleEnsemble& mu,
                                        const FrozenCoefficients& frozen, std::size_t m,
                                        PairSum mode, std::vector<double>& v) {
  const std::size_t d = mu.dim(), k = inner.size(), n = mu.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  GeneratorTerms t;
  v.assign(k * m, 0.0);
  if (k == 0) return t;

  const auto grads = inner_gradients(inner, mu);
  std::vector<double> sigmas(n * d * m), b(d), hess(d * d);
  for (std::size_t p = 0; p < n; ++p) {
    const auto y = mu[p];
    std::span<double> sig(sigmas.data() + p * d * m, d * m);
    frozen.drift(y, b);
    frozen.diffusion(y, sig);
    for (std::size_t i = 0; i < k; ++i) {
      const double* gh = grads.data() + (p * k + i) * d;
      double drift = 0.0;
      for (std::size_t a = 0; a < d; ++a) drift += b[a] * gh[a];
      t.drift += dg[i] * drift;
      if (dg[i] != 0.0) {
        inner[i].hessian(y, hess);
        double tr = 0.0;
        for (std::size_t a = 0; a < d; ++a) {
          for (std::size_t c = 0; c < d; ++c) {
            double aa = 0.0;
            for (std::size_t l = 0; l < m; ++l) aa += sig[a * m + l] * sig[c * m + l];
            tr += aa * hess[a * d + c];
          }
        }
        t.trace += 0.5 * dg[i] * tr;
      }
      for (std::size_t l = 0; l < m; ++l) {
        double s = 0.0;
        for (std::size_t a = 0; a < d; ++a) s += sig[a * m + l] * gh[a];
        v[i * m + l] += s * inv_n;
      }
    }
  }
  t.drift *= inv_n;
  t.trace *= inv_n;

  if (mode == PairSum::factorized) {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        double dot = 0.0;
        for (std::size_t l = 0; l < m; ++l) dot += v[i * m + l] * v[j * m + l];
        t.pair += 0.5 * d2g[i * k + j] * dot;
      }
    }
  } else {
    std::vector<double> d2f(d * d);
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = 0; q < n; ++q) {
        std::fill(d2f.begin(), d2f.end(), 0.0);
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const double h = d2g[i * k + j];
            if (h == 0.0) continue;
            const double* gy = grads.data() + (p * k + i) * d;
            const double* gz = grads.data() + (q * k + j) * d;
            for (std::size_t a = 0; a < d; ++a) {
              for (std::size_t c = 0; c < d; ++c) d2f[a * d + c] += h * gy[a] * gz[c];
            }
          }
        }
        const double* sy = sigmas.data() + p * d * m;
        const double* sz = sigmas.data() + q * d * m;
        for (std::size_t a = 0; a < d; ++a) {
          for (std::size_t c = 0; c < d; ++c) {
            double cov = 0.0;
            for (std::size_t l = 0; l < m; ++l) cov += sy[a * m + l] * sz[c * m + l];
            s += cov * d2f[a * d + c];
          }
        }
      }
    }
    t.pair = 0.5 * s * inv_n * inv_n;
  }
  return t;
}

}  // namespace detail

inline GeneratorTerms generator_A_terms(const CylindricalFunctional& f, const ParticleEnsemble& mu,
                                        double t, const CoefficientSet& coeffs,
                                        PairSum mode = PairSum::factorized) {
  detail::check_dims(f, mu);
  if (coeffs.dim() != f.dim()) throw InvalidArgument("generator_A: coefficient dimension mismatch");
  const std::size_t k = f.arity();
  const auto u = f.moments(mu);
  std::vector<double> dg(k), d2g(k * k), v;
  f.outer().gradient(u, dg);
  f.outer().hessian(u, d2g);
  const auto frozen = coeffs.freeze(t, mu);
  return detail::measure_generator(f.inner(), dg, d2g, mu, *frozen, coeffs.noise_dim(), mode, v);
}

inline double generator_A(const CylindricalFunctional& f, const ParticleEnsemble& mu, double t,
                          const CoefficientSet& coeffs, PairSum mode = PairSum::factorized) {
  return generator_A_terms(f, mu, t, coeffs, mode).total();
}

inline GeneratorTerms generator_A_tilde_terms(const LiftedFunctional& f, std::span<const double> x,
                                              const ParticleEnsemble& mu, double t,
                                              const CoefficientSet& coeffs,
                                              PairSum mode = PairSum::factorized) {
  if (f.dim() != mu.dim() || x.size() != mu.dim() || coeffs.dim() != mu.dim()) {
    throw InvalidArgument("generator_A_tilde: dimension mismatch");
  }
  const std::size_t d = f.dim(), k = f.arity(), m = coeffs.noise_dim(), r = d + k;
  const auto w = f.arguments(x, mu);
  std::vector<double> grad(r), hess(r * r);
  f.outer().gradient(w, grad);
  f.outer().hessian(w, hess);

  std::vector<double> dg(k), d2g(k * k);
  for (std::size_t i = 0; i < k; ++i) {
    dg[i] = grad[d + i];
    for (std::size_t j = 0; j < k; ++j) d2g[i * k + j] = hess[(d + i) * r + (d + j)];
  }
  const auto frozen = coeffs.freeze(t, mu);
  std::vector<double> v;
  GeneratorTerms terms =
      detail::measure_generator(f.inner(), dg, d2g, mu, *frozen, m, mode, v);

  std::vector<double> bx(d), sx(d * m);
  frozen->drift(x, bx);
  frozen->diffusion(x, sx);
  double point = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    point += bx[a] * grad[a];
    for (std::size_t c = 0; c < d; ++c) {
      double aa = 0.0;
      for (std::size_t l = 0; l < m; ++l) aa += sx[a * m + l] * sx[c * m + l];
      point += 0.5 * aa * hess[a * r + c];
    }
  }
  terms.point = point;

  // Mixed term. (D grad f)(x, mu)(y)[a][b] = sum_l d_{x_a} d_{u_l} g * d_b h_l(y),
  // paired with the covariation sigma(x) sigma(y)^T of X^x and the particle at y.
  double cross = 0.0;
  if (mode == PairSum::factorized) {
    for (std::size_t l = 0; l < k; ++l) {
      for (std::size_t a = 0; a < d; ++a) {
        const double mixed = hess[a * r + (d + l)];
        if (mixed == 0.0) continue;
        double sv = 0.0;
        for (std::size_t q = 0; q < m; ++q) sv += sx[a * m + q] * v[l * m + q];
        cross += mixed * sv;
      }
    }
  } else {
    std::vector<double> gh(d), sy(d * m);
    for (std::size_t p = 0; p < mu.size(); ++p) {
      frozen->diffusion(mu[p], sy);
      for (std::size_t l = 0; l < k; ++l) {
        f.inner()[l].gradient(mu[p], gh);
        for (std::size_t a = 0; a < d; ++a) {
          const double mixed = hess[a * r + (d + l)];
          for (std::size_t b = 0; b < d; ++b) {
            double cov = 0.0;
            for (std::size_t q = 0; q < m; ++q) cov += sx[a * m + q] * sy[b * m + q];
            cross += mixed * gh[b] * cov;
          }
        }
      }
    }
    cross /= static_cast<double>(mu.size());
  }
  terms.cross = cross;
  return terms;
}

inline double generator_A_tilde(const LiftedFunctional& f, std::span<const double> x,
                                const ParticleEnsemble& mu, double t, const CoefficientSet& coeffs,
                                PairSum mode = PairSum::factorized) {
  return generator_A_tilde_terms(f, x, mu, t, coeffs, mode).total();
}

// ---------------------------------------------------------------------------
// Square fields and the Laplacian on P2.

// Gamma(f, g)(mu) = mu(<Df, Dg>)
inline double square_field(const CylindricalFunctional& f, const CylindricalFunctional& g,
                           const ParticleEnsemble& mu) {
  double s = 0.0;
  for (std::size_t p = 0; p < mu.size(); ++p) {
    const auto a = lions_derivative_closed(f, mu, mu[p]);
    const auto b = lions_derivative_closed(g, mu, mu[p]);
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  }
  return s / static_cast<double>(mu.size());
}

// Delta f(mu) = mu(tr D^2 f(x, x))
inline double laplacian(const CylindricalFunctional& f, const ParticleEnsemble& mu) {
  const std::size_t d = f.dim();
  double s = 0.0;
  for (std::size_t p = 0; p < mu.size(); ++p) {
    const auto m2 = second_lions_closed(f, mu, mu[p], mu[p]);
    for (std::size_t a = 0; a < d; ++a) s += m2[a * d + a];
  }
  return s / static_cast<double>(mu.size());
}

// Gamma_t(f, g)(mu) = <mu(sigma^T Df), mu(sigma^T Dg)>
inline double square_field_t(const CylindricalFunctional& f, const CylindricalFunctional& g,
                             const ParticleEnsemble& mu, double t, const CoefficientSet& coeffs) {
  const std::size_t d = mu.dim(), m = coeffs.noise_dim();
  const auto frozen = coeffs.freeze(t, mu);
  std::vector<double> vf(m, 0.0), vg(m, 0.0), sig(d * m);
  for (std::size_t p = 0; p < mu.size(); ++p) {
    const auto a = lions_derivative_closed(f, mu, mu[p]);
    const auto b = lions_derivative_closed(g, mu, mu[p]);
    frozen->diffusion(mu[p], sig);
    for (std::size_t l = 0; l < m; ++l) {
      for (std::size_t i = 0; i < d; ++i) {
        vf[l] += sig[i * m + l] * a[i];
        vg[l] += sig[i * m + l] * b[i];
      }
    }
  }
  const double n = static_cast<double>(mu.size());
  double s = 0.0;
  for (std::size_t l = 0; l < m; ++l) s += vf[l] * vg[l];
  return s / (n * n);
}

// ---------------------------------------------------------------------------
// Martingale checks: f(L_T) - f(mu) - int_0^T A f(L_r) dr has mean zero.

struct MartingaleConfig {
  double horizon = 0.5;
  double dt = 1e-3;
  std::size_t replicas = 10000;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

namespace detail {

inline std::size_t martingale_steps(const MartingaleConfig& cfg) {
  SimulationConfig sc;
  sc.dt = cfg.dt;
  sc.horizon = cfg.horizon;
  return sc.steps();
}

}  // namespace detail

// Per-replica compensated values (trapezoid rule in time).
inline std::vector<double> martingale_samples(const CylindricalFunctional& f,
                                              const ParticleEnsemble& mu,
                                              const CoefficientSet& coeffs,
                                              const MartingaleConfig& cfg) {
  if (cfg.replicas < 2) throw InvalidArgument("martingale_test: need at least 2 replicas");
  const std::size_t steps = detail::martingale_steps(cfg);
  const double f0 = f(mu);
  return parallel_map(
      cfg.replicas,
      [&](std::size_t r) {
        const auto path = BrownianPath::generate(coeffs.noise_dim(), cfg.dt, steps, cfg.seed, r);
        double integral = 0.0, prev = 0.0, last = 0.0;
        const auto terminal = simulate_observed(
            mu, {}, 0.0, path.end_time(), coeffs, path,
            [&](std::size_t k, double t, const ParticleEnsemble& base, std::span<const double>) {
              const double a = generator_A(f, base, t, coeffs);
              if (k > 0) integral += 0.5 * (prev + a) * cfg.dt;
              prev = a;
              last = f(base);
            });
        (void)terminal;
        return last - f0 - integral;
      },
      cfg.threads);
}

inline Estimate martingale_test(const CylindricalFunctional& f, const ParticleEnsemble& mu,
                                const CoefficientSet& coeffs, const MartingaleConfig& cfg) {
  return estimate_of(martingale_samples(f, mu, coeffs, cfg));
}

inline std::vector<double> martingale_samples_tilde(const LiftedFunctional& f,
                                                    std::span<const double> x,
                                                    const ParticleEnsemble& mu,
                                                    const CoefficientSet& coeffs,
                                                    const MartingaleConfig& cfg) {
  if (cfg.replicas < 2) throw InvalidArgument("martingale_test_tilde: need at least 2 replicas");
  const std::size_t steps = detail::martingale_steps(cfg);
  const double f0 = f(x, mu);
  return parallel_map(
      cfg.replicas,
      [&](std::size_t r) {
        const auto path = BrownianPath::generate(coeffs.noise_dim(), cfg.dt, steps, cfg.seed, r);
        double integral = 0.0, prev = 0.0, last = 0.0;
        simulate_observed(
            mu, x, 0.0, path.end_time(), coeffs, path,
            [&](std::size_t k, double t, const ParticleEnsemble& base,
                std::span<const double> tagged) {
              const double a = generator_A_tilde(f, tagged, base, t, coeffs);
              if (k > 0) integral += 0.5 * (prev + a) * cfg.dt;
              prev = a;
              last = f(tagged, base);
            });
        return last - f0 - integral;
      },
      cfg.threads);
}

inline Estimate martingale_test_tilde(const LiftedFunctional& f, std::span<const double> x,
                                      const ParticleEnsemble& mu, const CoefficientSet& coeffs,
                                      const MartingaleConfig& cfg) {
  return estimate_of(martingale_samples_tilde(f, x, mu, coeffs, cfg));
}

// ---------------------------------------------------------------------------
// First-order derivative flows, integrated by the same Euler scheme on the
// same path as the state. Matrices are Jacobians: [a][b] = d X_a / d (.)_b.

struct NablaFlow {
  std::vector<double> times;
  std::vector<std::vector<double>> jacobians;  // d x d per grid time
  std::vector<Point> positions;                // X^{x, mu}_t per grid time
};

namespace detail {

// out = A * B for d x d matrices.
inline void matmul_add(std::span<const double> A, std::span<const double> B, double scale,
                       std::size_t d, std::span<double> out) {
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t c = 0; c < d; ++c) {
      const double ac = A[a * d + c] * scale;
      if (ac == 0.0) continue;
      for (std::size_t b = 0; b < d; ++b) out[a * d + b] += ac * B[c * d + b];
    }
  }
}

}  // namespace detail

// v_s = I, dv = grad b(X_t) v dt + grad sigma(X_t) v dW_t.
inline NablaFlow nabla_flow(double s, double T, std::span<const double> x,
                            const ParticleEnsemble& mu, const CoefficientSet& coeffs,
                            const BrownianPath& path) {
  detail::check_compatible(mu, coeffs, path);
  const std::size_t d = coeffs.dim(), m = coeffs.noise_dim();
  if (x.size() != d) throw InvalidArgument("nabla_flow: point has wrong dimension");
  const std::size_t k0 = path.grid_index(s), k1 = path.grid_index(T);
  if (k1 < k0) throw InvalidArgument("nabla_flow: T before s");

  NablaFlow out;
  ParticleEnsemble base = mu;
  Point X(x.begin(), x.end()), nextX(d);
  std::vector<double> v(d * d, 0.0), next_v(d * d), jb(d * d), js(m * d * d);
  for (std::size_t a = 0; a < d; ++a) v[a * d + a] = 1.0;
  std::vector<double> next_base(base.positions().size()), b, sig;
  auto record = [&](std::size_t k) {
    out.times.push_back(path.time(k));
    out.jacobians.push_back(v);
    out.positions.push_back(X);
  };
  record(k0);
  for (std::size_t k = k0; k < k1; ++k) {
    const auto frozen = coeffs.freeze(path.time(k), base);
    const auto dw = path.increment(k);
    frozen->drift_jacobian(X, jb);
    frozen->diffusion_jacobian(X, js);
    next_v = v;
    detail::matmul_add(jb, v, path.dt(), d, next_v);
    for (std::size_t l = 0; l < m; ++l) {
      detail::matmul_add(std::span<const double>(js.data() + l * d * d, d * d), v, dw[l], d, next_v);
    }
    detail::euler_move(*frozen, d, m, base.positions(), dw, path.dt(), next_base, b, sig, k, false);
    detail::euler_move(*frozen, d, m, X, dw, path.dt(), nextX, b, sig, k, true);
    base = ParticleEnsemble(d, next_base);
    X.swap(nextX);
    v.swap(next_v);
    record(k + 1);
  }
  return out;
}

inline constexpr std::size_t kMaxLionsFlowParticles = 256;

// Lions derivative DX^{x, mu}_{s,T}(y_z) for every base particle y_z.
struct LionsFlow {
  ParticleEnsemble initial;                   // mu
  Point terminal_position;                    // X^{x, mu}_T
  std::vector<double> nabla;                  // grad X^{x, mu}_T, d x d
  std::vector<std::vector<double>> lions;     // DX^{x, mu}_T(y_z), d x d per z

  // <DX(.), phi>_{L^2(mu)} = (1/n) sum_z DX(y_z) phi(y_z)
  template <class Field>
  Point directional(Field&& phi) const {
    const std::size_t d = initial.dim(), n = initial.size();
    Point out(d, 0.0), dir(d);
    for (std::size_t z = 0; z < n; ++z) {
      phi(initial[z], std::span<double>(dir));
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = 0; b < d; ++b) out[a] += lions[z][a * d + b] * dir[b];
      }
    }
    for (double& v : out) v /= static_cast<double>(n);
    return out;
  }
};

// Joint Euler integration of
//   V_j  = grad X^{y_j}           dV_j = grad b(Y_j) V_j dt + ...
//   W_jz = DX^{y_j}(y_z)          dW_jz = [grad b(Y_j) W_jz + Db(Y_j)(Y_z) V_z
//                                          + (1/n) sum_k Db(Y_j)(Y_k) W_kz] dt + ...
// and the same for the tagged point x, with the diffusion columns in place of
// b against dW. The ensemble average replaces the mu(dz) integral.
inline LionsFlow lions_flow(double s, double T, std::span<const double> x,
                            const ParticleEnsemble& mu, const CoefficientSet& coeffs,
                            const BrownianPath& path) {
  detail::check_compatible(mu, coeffs, path);
  const std::size_t d = coeffs.dim(), m = coeffs.noise_dim(), n = mu.size(), dd = d * d;
  if (x.size() != d) throw InvalidArgument("lions_flow: point has wrong dimension");
  if (n > kMaxLionsFlowParticles) {
    throw InvalidArgument("lions_flow: n = " + std::to_string(n) + " exceeds guard " +
                          std::to_string(kMaxLionsFlowParticles));
  }
  const std::size_t k0 = path.grid_index(s), k1 = path.grid_index(T);
  if (k1 < k0) throw InvalidArgument("lions_flow: T before s");
  const double inv_n = 1.0 / static_cast<double>(n);

  // Index n is the tagged point; 0..n-1 are base particles.
  const std::size_t P = n + 1;
  std::vector<double> V(P * dd, 0.0), W(P * n * dd, 0.0);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t a = 0; a < d; ++a) V[p * dd + a * d + a] = 1.0;
  }
  std::vector<double> nextV(V.size()), nextW(W.size());
  std::vector<double> jb(P * dd), js(P * m * dd), db(P * n * dd), ds(P * n * m * dd);
  std::vector<double> drift_coef(dd), noise_coef(m * dd);

  ParticleEnsemble base = mu;
  Point X(x.begin(), x.end()), nextX(d);
  std::vector<double> next_base(base.positions().size()), bv, sv;

  for (std::size_t k = k0; k < k1; ++k) {
    const auto frozen = coeffs.freeze(path.time(k), base);
    const auto dw = path.increment(k);
    const double dt = path.dt();
    auto point = [&](std::size_t p) { return p < n ? base[p] : std::span<const double>(X); };
    for (std::size_t p = 0; p < P; ++p) {
      const auto xp = point(p);
      frozen->drift_jacobian(xp, std::span<double>(jb.data() + p * dd, dd));
      frozen->diffusion_jacobian(xp, std::span<double>(js.data() + p * m * dd, m * dd));
      for (std::size_t z = 0; z < n; ++z) {
        frozen->drift_measure_derivative(xp, z, std::span<double>(db.data() + (p * n + z) * dd, dd));
        frozen->diffusion_measure_derivative(
            xp, z, std::span<double>(ds.data() + ((p * n + z) * m) * dd, m * dd));
      }
    }

    for (std::size_t p = 0; p < P; ++p) {
      // gradient flow
      std::span<const double> Vp(V.data() + p * dd, dd);
      std::span<double> nVp(nextV.data() + p * dd, dd);
      std::copy(Vp.begin(), Vp.end(), nVp.begin());
      detail::matmul_add(std::span<const double>(jb.data() + p * dd, dd), Vp, dt, d, nVp);
      for (std::size_t l = 0; l < m; ++l) {
        detail::matmul_add(std::span<const double>(js.data() + (p * m + l) * dd, dd), Vp, dw[l], d,
                           nVp);
      }
      // measure flow, one column block z at a time
      for (std::size_t z = 0; z < n; ++z) {
        std::span<const double> Wpz(W.data() + (p * n + z) * dd, dd);
        std::span<const double> Vz(V.data() + z * dd, dd);
        std::fill(drift_coef.begin(), drift_coef.end(), 0.0);
        std::fill(noise_coef.begin(), noise_coef.end(), 0.0);
        detail::matmul_add(std::span<const double>(jb.data() + p * dd, dd), Wpz, 1.0, d, drift_coef);
        detail::matmul_add(std::span<const double>(db.data() + (p * n + z) * dd, dd), Vz, 1.0, d,
                           drift_coef);
        for (std::size_t l = 0; l < m; ++l) {
          std::span<double> nc(noise_coef.data() + l * dd, dd);
          detail::matmul_add(std::span<const double>(js.data() + (p * m + l) * dd, dd), Wpz, 1.0,
                             d, nc);
          detail::matmul_add(std::span<const double>(ds.data() + ((p * n + z) * m + l) * dd, dd),
                             Vz, 1.0, d, nc);
        }
        for (std::size_t q = 0; q < n; ++q) {
          std::span<const double> Wqz(W.data() + (q * n + z) * dd, dd);
          detail::matmul_add(std::span<const double>(db.data() + (p * n + q) * dd, dd), Wqz, inv_n,
                             d, drift_coef);
          for (std::size_t l = 0; l < m; ++l) {
            detail::matmul_add(std::span<const double>(ds.data() + ((p * n + q) * m + l) * dd, dd),
                               Wqz, inv_n, d, std::span<double>(noise_coef.data() + l * dd, dd));
          }
        }
        std::span<double> out(nextW.data() + (p * n + z) * dd, dd);
        for (std::size_t e = 0; e < dd; ++e) {
          double val = Wpz[e] + drift_coef[e] * dt;
          for (std::size_t l = 0; l < m; ++l) val += noise_coef[l * dd + e] * dw[l];
          out[e] = val;
        }
      }
    }

    detail::euler_move(*frozen, d, m, base.positions(), dw, path.dt(), next_base, bv, sv, k, false);
    detail::euler_move(*frozen, d, m, X, dw, path.dt(), nextX, bv, sv, k, true);
    base = ParticleEnsemble(d, next_base);
    X.swap(nextX);
    V.swap(nextV);
    W.swap(nextW);
  }

  LionsFlow out;
  out.initial = mu;
  out.terminal_position = X;
  out.nabla.assign(V.begin() + n * dd, V.begin() + (n + 1) * dd);
  for (std::size_t z = 0; z < n; ++z) {
    out.lions.emplace_back(W.begin() + (n * n + z) * dd, W.begin() + (n * n + z + 1) * dd);
  }
  return out;
}

}  // namespace p2flow

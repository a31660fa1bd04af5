#pragma once

// Coefficients b(t, x, mu) and sigma(t, x, mu) of the image SDE.
//
// Layout conventions (all row-major, flat):
//   drift                  d
//   diffusion              d x m            sigma[i*m + l]
//   drift_jacobian         d x d            [i][j] = d b_i / d x_j
//   diffusion_jacobian     m x (d x d)      [l][i][j] = d sigma_il / d x_j
//   drift_measure_deriv    d x d            [i][j] = (D b_i(x, mu)(y_k))_j
//   diffusion_measure_der  m x (d x d)      [l][i][j] = (D sigma_il(x, mu)(y_k))_j
//
// Measure derivatives are Lions derivatives evaluated at base particle y_k:
// moving every particle by eps*phi changes b(x, .) by
// eps * (1/n) sum_k Db(x, mu)(y_k) phi(y_k) to first order.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "p2flow/error.hpp"
#include "p2flow/measures.hpp"
#include "p2flow/rng.hpp"
#include "p2flow/wasserstein.hpp"

namespace p2flow {

// Declared constants for the monotonicity hypotheses.
//   dissipative:  2<db, dx> + |dsigma|^2 <= kappa W2^2 - lambda |dx|^2
//                 |dsigma|^2 <= K (W2^2 + |dx|^2)
//                 |b|^2 + |sigma|^2 <= delta (1 + |x|^2 + ||mu||^2)
//   local growth: |b|^2 + |sigma|^2 <= growth (1 + |x|^2 + ||mu||^2)
//                 2<db, dx>^+ + |dsigma|^2 <= growth (|dx|^2 + W2^2)
// Only bounded-in-time constants are supported.
struct RegularityConstants {
  std::optional<double> lambda;
  std::optional<double> kappa;
  std::optional<double> delta;
  std::optional<double> sigma_lipschitz;  // K of the dissipative set
  std::optional<double> growth;           // K of the growth set
};

class CoefficientSet;

// Coefficients with (t, mu) fixed. Valid only while the ensemble it was
// frozen against is alive and unmodified.
class FrozenCoefficients {
 public:
  FrozenCoefficients(const CoefficientSet& parent, double t, const ParticleEnsemble& mu)
      : parent_(&parent), t_(t), mu_(&mu) {}
  virtual ~FrozenCoefficients() = default;

  virtual void drift(std::span<const double> x, std::span<double> out) const = 0;
  virtual void diffusion(std::span<const double> x, std::span<double> out) const = 0;

  virtual void drift_jacobian(std::span<const double> x, std::span<double> out) const;
  virtual void diffusion_jacobian(std::span<const double> x, std::span<double> out) const;
  virtual void drift_measure_derivative(std::span<const double> x, std::size_t k,
                                        std::span<double> out) const;
  virtual void diffusion_measure_derivative(std::span<const double> x, std::size_t k,
                                            std::span<double> out) const;

  double time() const noexcept { return t_; }
  const ParticleEnsemble& measure() const noexcept { return *mu_; }
  const CoefficientSet& parent() const noexcept { return *parent_; }

 private:
  const CoefficientSet* parent_;
  double t_;
  const ParticleEnsemble* mu_;
};

class CoefficientSet {
 public:
  virtual ~CoefficientSet() = default;

  virtual std::size_t dim() const = 0;
  virtual std::size_t noise_dim() const = 0;
  virtual std::string family() const = 0;
  virtual std::unique_ptr<FrozenCoefficients> freeze(double t, const ParticleEnsemble& mu) const = 0;
  virtual RegularityConstants constants() const { return {}; }
  virtual bool depends_on_measure() const { return true; }

  Point drift(double t, std::span<const double> x, const ParticleEnsemble& mu) const {
    Point out(dim());
    freeze(t, mu)->drift(x, out);
    return out;
  }
  std::vector<double> diffusion(double t, std::span<const double> x,
                                const ParticleEnsemble& mu) const {
    std::vector<double> out(dim() * noise_dim());
    freeze(t, mu)->diffusion(x, out);
    return out;
  }
};

namespace detail {

inline double fd_step(double v) { return 1e-6 * std::max(1.0, std::abs(v)); }

}  // namespace detail

// Central-difference fallbacks.

inline void FrozenCoefficients::drift_jacobian(std::span<const double> x,
                                               std::span<double> out) const {
  const std::size_t d = x.size();
  Point xp(x.begin(), x.end()), bp(d), bm(d);
  for (std::size_t j = 0; j < d; ++j) {
    const double h = detail::fd_step(x[j]);
    xp[j] = x[j] + h;
    drift(xp, bp);
    xp[j] = x[j] - h;
    drift(xp, bm);
    xp[j] = x[j];
    for (std::size_t i = 0; i < d; ++i) out[i * d + j] = (bp[i] - bm[i]) / (2.0 * h);
  }
}

inline void FrozenCoefficients::diffusion_jacobian(std::span<const double> x,
                                                   std::span<double> out) const {
  const std::size_t d = x.size();
  const std::size_t m = parent_->noise_dim();
  Point xp(x.begin(), x.end());
  std::vector<double> sp(d * m), sm(d * m);
  for (std::size_t j = 0; j < d; ++j) {
    const double h = detail::fd_step(x[j]);
    xp[j] = x[j] + h;
    diffusion(xp, sp);
    xp[j] = x[j] - h;
    diffusion(xp, sm);
    xp[j] = x[j];
    for (std::size_t l = 0; l < m; ++l) {
      for (std::size_t i = 0; i < d; ++i) {
        out[(l * d + i) * d + j] = (sp[i * m + l] - sm[i * m + l]) / (2.0 * h);
      }
    }
  }
}

inline void FrozenCoefficients::drift_measure_derivative(std::span<const double> x, std::size_t k,
                                                         std::span<double> out) const {
  const std::size_t d = x.size();
  const auto n = static_cast<double>(mu_->size());
  std::vector<double> moved(mu_->positions().begin(), mu_->positions().end());
  Point bp(d), bm(d);
  for (std::size_t j = 0; j < d; ++j) {
    const double y = moved[k * d + j];
    const double h = detail::fd_step(y);
    moved[k * d + j] = y + h;
    ParticleEnsemble plus(d, moved);
    parent_->freeze(t_, plus)->drift(x, bp);
    moved[k * d + j] = y - h;
    ParticleEnsemble minus(d, moved);
    parent_->freeze(t_, minus)->drift(x, bm);
    moved[k * d + j] = y;
    for (std::size_t i = 0; i < d; ++i) out[i * d + j] = n * (bp[i] - bm[i]) / (2.0 * h);
  }
}

inline void FrozenCoefficients::diffusion_measure_derivative(std::span<const double> x,
                                                             std::size_t k,
                                                             std::span<double> out) const {
  const std::size_t d = x.size();
  const std::size_t m = parent_->noise_dim();
  const auto n = static_cast<double>(mu_->size());
  std::vector<double> moved(mu_->positions().begin(), mu_->positions().end());
  std::vector<double> sp(d * m), sm(d * m);
  for (std::size_t j = 0; j < d; ++j) {
    const double y = moved[k * d + j];
    const double h = detail::fd_step(y);
    moved[k * d + j] = y + h;
    ParticleEnsemble plus(d, moved);
    parent_->freeze(t_, plus)->diffusion(x, sp);
    moved[k * d + j] = y - h;
    ParticleEnsemble minus(d, moved);
    parent_->freeze(t_, minus)->diffusion(x, sm);
    moved[k * d + j] = y;
    for (std::size_t l = 0; l < m; ++l) {
      for (std::size_t i = 0; i < d; ++i) {
        out[(l * d + i) * d + j] = n * (sp[i * m + l] - sm[i * m + l]) / (2.0 * h);
      }
    }
  }
}

// b(x, mu) = -a x + c mean(mu), sigma = sigma0 (constant d x m).
// Reads only mean(mu). Dissipative with lambda = 2a - c, kappa = c.
class LinearMeanField final : public CoefficientSet {
 public:
  LinearMeanField(double a, double c, std::size_t dim, std::size_t noise_dim,
                  std::vector<double> sigma0)
      : a_(a), c_(c), d_(dim), m_(noise_dim), sigma0_(std::move(sigma0)) {
    if (!(a_ > 0.0)) throw InvalidArgument("LinearMeanField: decay rate a must be > 0");
    if (!(c_ >= 0.0)) throw InvalidArgument("LinearMeanField: interaction c must be >= 0");
    if (d_ == 0 || m_ == 0 || sigma0_.size() != d_ * m_) {
      throw InvalidArgument("LinearMeanField: sigma0 must be a d x m matrix");
    }
  }

  // sigma0 = s * I (d = m).
  static std::shared_ptr<LinearMeanField> isotropic(double a, double c, std::size_t dim, double s) {
    std::vector<double> sig(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) sig[i * dim + i] = s;
    return std::make_shared<LinearMeanField>(a, c, dim, dim, std::move(sig));
  }

  std::size_t dim() const override { return d_; }
  std::size_t noise_dim() const override { return m_; }
  std::string family() const override { return "linear_mean_field"; }
  bool depends_on_measure() const override { return c_ != 0.0; }

  RegularityConstants constants() const override {
    double hs = 0.0;
    for (double v : sigma0_) hs += v * v;
    const double delta = std::max({2.0 * a_ * a_, 2.0 * c_ * c_, hs});
    return {2.0 * a_ - c_, c_, delta, 0.0, std::max(delta, c_)};
  }

  double decay() const noexcept { return a_; }
  double interaction() const noexcept { return c_; }
  const std::vector<double>& sigma0() const noexcept { return sigma0_; }

  std::unique_ptr<FrozenCoefficients> freeze(double t, const ParticleEnsemble& mu) const override {
    return std::make_unique<Frozen>(*this, t, mu);
  }

 private:
  class Frozen final : public FrozenCoefficients {
   public:
    Frozen(const LinearMeanField& p, double t, const ParticleEnsemble& mu)
        : FrozenCoefficients(p, t, mu), p_(p), pull_(mean(mu)) {
      for (double& v : pull_) v *= p_.c_;
    }
    void drift(std::span<const double> x, std::span<double> out) const override {
      for (std::size_t i = 0; i < p_.d_; ++i) out[i] = -p_.a_ * x[i] + pull_[i];
    }
    void diffusion(std::span<const double>, std::span<double> out) const override {
      std::copy(p_.sigma0_.begin(), p_.sigma0_.end(), out.begin());
    }
    void drift_jacobian(std::span<const double>, std::span<double> out) const override {
      identity(out, -p_.a_);
    }
    void diffusion_jacobian(std::span<const double>, std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
    }
    void drift_measure_derivative(std::span<const double>, std::size_t,
                                  std::span<double> out) const override {
      identity(out, p_.c_);
    }
    void diffusion_measure_derivative(std::span<const double>, std::size_t,
                                      std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
    }

   private:
    void identity(std::span<double> out, double scale) const {
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t i = 0; i < p_.d_; ++i) out[i * p_.d_ + i] = scale;
    }
    const LinearMeanField& p_;
    Point pull_;
  };

  double a_, c_;
  std::size_t d_, m_;
  std::vector<double> sigma0_;
};

// b = 0, sigma = sigma0: the image of mu under a common Brownian translation.
class ConstantDiffusion final : public CoefficientSet {
 public:
  ConstantDiffusion(std::size_t dim, std::size_t noise_dim, std::vector<double> sigma0)
      : d_(dim), m_(noise_dim), sigma0_(std::move(sigma0)) {
    if (d_ == 0 || m_ == 0 || sigma0_.size() != d_ * m_) {
      throw InvalidArgument("ConstantDiffusion: sigma0 must be a d x m matrix");
    }
  }

  static std::shared_ptr<ConstantDiffusion> isotropic(std::size_t dim, double s) {
    std::vector<double> sig(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) sig[i * dim + i] = s;
    return std::make_shared<ConstantDiffusion>(dim, dim, std::move(sig));
  }

  std::size_t dim() const override { return d_; }
  std::size_t noise_dim() const override { return m_; }
  std::string family() const override { return "brownian"; }
  bool depends_on_measure() const override { return false; }

  RegularityConstants constants() const override {
    double hs = 0.0;
    for (double v : sigma0_) hs += v * v;
    return {0.0, 0.0, hs, 0.0, hs};
  }

  std::unique_ptr<FrozenCoefficients> freeze(double t, const ParticleEnsemble& mu) const override {
    return std::make_unique<Frozen>(*this, t, mu);
  }

 private:
  class Frozen final : public FrozenCoefficients {
   public:
    Frozen(const ConstantDiffusion& p, double t, const ParticleEnsemble& mu)
        : FrozenCoefficients(p, t, mu), p_(p) {}
    void drift(std::span<const double>, std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
    }
    void diffusion(std::span<const double>, std::span<double> out) const override {
      std::copy(p_.sigma0_.begin(), p_.sigma0_.end(), out.begin());
    }
    void drift_jacobian(std::span<const double>, std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
    }
    void diffusion_jacobian(std::span<const double>, std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
    }
    void drift_measure_derivative(std::span<const double>, std::size_t,
                                  std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
    }
    void diffusion_measure_derivative(std::span<const double>, std::size_t,
                                      std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
    }

   private:
    const ConstantDiffusion& p_;
  };

  std::size_t d_, m_;
  std::vector<double> sigma0_;
};

// Nonlinear family with state- and measure-dependent noise (m = d):
//   b_i(x, mu)       = -a x_i + c mu(tanh(y_i - x_i))
//   sigma_ii(x, mu)  = s (1 + rho sin x_i) + r mu(sin y_i),  off-diagonal 0
class TanhInteraction final : public CoefficientSet {
 public:
  TanhInteraction(std::size_t dim, double a, double c, double s, double rho, double r)
      : d_(dim), a_(a), c_(c), s_(s), rho_(rho), r_(r) {
    if (d_ == 0) throw InvalidArgument("TanhInteraction: dimension must be positive");
  }

  std::size_t dim() const override { return d_; }
  std::size_t noise_dim() const override { return d_; }
  std::string family() const override { return "tanh_interaction"; }
  bool depends_on_measure() const override { return c_ != 0.0 || r_ != 0.0; }

  std::unique_ptr<FrozenCoefficients> freeze(double t, const ParticleEnsemble& mu) const override {
    return std::make_unique<Frozen>(*this, t, mu);
  }

 private:
  class Frozen final : public FrozenCoefficients {
   public:
    Frozen(const TanhInteraction& p, double t, const ParticleEnsemble& mu)
        : FrozenCoefficients(p, t, mu), p_(p), mean_sin_(p.d_, 0.0) {
      for (std::size_t k = 0; k < mu.size(); ++k) {
        for (std::size_t i = 0; i < p.d_; ++i) mean_sin_[i] += std::sin(mu[k][i]);
      }
      for (double& v : mean_sin_) v /= static_cast<double>(mu.size());
    }

    void drift(std::span<const double> x, std::span<double> out) const override {
      const auto& mu = measure();
      for (std::size_t i = 0; i < p_.d_; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < mu.size(); ++k) s += std::tanh(mu[k][i] - x[i]);
        out[i] = -p_.a_ * x[i] + p_.c_ * s / static_cast<double>(mu.size());
      }
    }
    void diffusion(std::span<const double> x, std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t i = 0; i < p_.d_; ++i) {
        out[i * p_.d_ + i] = p_.s_ * (1.0 + p_.rho_ * std::sin(x[i])) + p_.r_ * mean_sin_[i];
      }
    }
    void drift_jacobian(std::span<const double> x, std::span<double> out) const override {
      const auto& mu = measure();
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t i = 0; i < p_.d_; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < mu.size(); ++k) s += sech2(mu[k][i] - x[i]);
        out[i * p_.d_ + i] = -p_.a_ - p_.c_ * s / static_cast<double>(mu.size());
      }
    }
    void diffusion_jacobian(std::span<const double> x, std::span<double> out) const override {
      const std::size_t d = p_.d_;
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t i = 0; i < d; ++i) {
        out[(i * d + i) * d + i] = p_.s_ * p_.rho_ * std::cos(x[i]);
      }
    }
    void drift_measure_derivative(std::span<const double> x, std::size_t k,
                                  std::span<double> out) const override {
      const auto y = measure()[k];
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t i = 0; i < p_.d_; ++i) out[i * p_.d_ + i] = p_.c_ * sech2(y[i] - x[i]);
    }
    void diffusion_measure_derivative(std::span<const double>, std::size_t k,
                                      std::span<double> out) const override {
      const std::size_t d = p_.d_;
      const auto y = measure()[k];
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t i = 0; i < d; ++i) out[(i * d + i) * d + i] = p_.r_ * std::cos(y[i]);
    }

   private:
    static double sech2(double z) {
      const double c = std::cosh(z);
      return 1.0 / (c * c);
    }
    const TanhInteraction& p_;
    Point mean_sin_;
  };

  std::size_t d_;
  double a_, c_, s_, rho_, r_;
};

// (b0, sigma0)(t, x) = (b, sigma)(t, x, delta_x): the coefficients of the
// classical SDE whose invariant law describes the Dirac collapse.
class DiagonalRestriction final : public CoefficientSet {
 public:
  explicit DiagonalRestriction(std::shared_ptr<const CoefficientSet> inner)
      : inner_(std::move(inner)) {}

  std::size_t dim() const override { return inner_->dim(); }
  std::size_t noise_dim() const override { return inner_->noise_dim(); }
  std::string family() const override { return "diagonal(" + inner_->family() + ")"; }
  bool depends_on_measure() const override { return false; }

  std::unique_ptr<FrozenCoefficients> freeze(double t, const ParticleEnsemble& mu) const override {
    return std::make_unique<Frozen>(*this, t, mu);
  }

 private:
  class Frozen final : public FrozenCoefficients {
   public:
    Frozen(const DiagonalRestriction& p, double t, const ParticleEnsemble& mu)
        : FrozenCoefficients(p, t, mu), p_(p) {}
    void drift(std::span<const double> x, std::span<double> out) const override {
      const auto dirac = ParticleEnsemble::dirac(x);
      p_.inner_->freeze(time(), dirac)->drift(x, out);
    }
    void diffusion(std::span<const double> x, std::span<double> out) const override {
      const auto dirac = ParticleEnsemble::dirac(x);
      p_.inner_->freeze(time(), dirac)->diffusion(x, out);
    }
    void drift_measure_derivative(std::span<const double>, std::size_t,
                                  std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
    }
    void diffusion_measure_derivative(std::span<const double>, std::size_t,
                                      std::span<double> out) const override {
      std::fill(out.begin(), out.end(), 0.0);
    }

   private:
    const DiagonalRestriction& p_;
  };

  std::shared_ptr<const CoefficientSet> inner_;
};

inline std::shared_ptr<const CoefficientSet> diagonal_restriction(
    std::shared_ptr<const CoefficientSet> coeffs) {
  return std::make_shared<DiagonalRestriction>(std::move(coeffs));
}

// Wraps a coefficient set and replaces its declared constants, e.g. to probe
// a deliberately wrong declaration.
class WithDeclaredConstants final : public CoefficientSet {
 public:
  WithDeclaredConstants(std::shared_ptr<const CoefficientSet> inner, RegularityConstants declared)
      : inner_(std::move(inner)), declared_(declared) {}

  std::size_t dim() const override { return inner_->dim(); }
  std::size_t noise_dim() const override { return inner_->noise_dim(); }
  std::string family() const override { return inner_->family(); }
  bool depends_on_measure() const override { return inner_->depends_on_measure(); }
  RegularityConstants constants() const override { return declared_; }
  std::unique_ptr<FrozenCoefficients> freeze(double t, const ParticleEnsemble& mu) const override {
    return inner_->freeze(t, mu);
  }

 private:
  std::shared_ptr<const CoefficientSet> inner_;
  RegularityConstants declared_;
};

// ---------------------------------------------------------------------------
// Probing the declared constants by random sampling. This can falsify a
// declaration; it never proves one.

struct ProbeCase {
  double t = 0.0;
  Point x, y;
  ParticleEnsemble mu, nu;
};

struct InequalityCheck {
  std::string name;
  std::size_t violations = 0;
  double worst_slack = -std::numeric_limits<double>::infinity();  // lhs - rhs
  std::optional<ProbeCase> worst_case;
};

struct ProbeReport {
  std::size_t trials = 0;
  std::vector<InequalityCheck> checks;
  std::string note =
      "sampling-based falsification test: zero violations does not prove the declared constants";

  std::size_t total_violations() const {
    std::size_t v = 0;
    for (const auto& c : checks) v += c.violations;
    return v;
  }
};

// Draws equal-size pairs (x, mu), (y, nu) with mixed scales; a quarter of
// the draws reuse mu for nu and some use single-particle ensembles.
class RandomProbeSampler {
 public:
  RandomProbeSampler(std::size_t dim, std::size_t max_particles, std::uint64_t seed,
                     std::uint64_t stream = 0)
      : dim_(dim), max_n_(max_particles), rng_(seed, stream) {}

  ProbeCase operator()() {
    const std::size_t n = 1 + static_cast<std::size_t>(rng_.uniform() * max_n_) % max_n_;
    const double scale = 0.1 + 2.9 * rng_.uniform();
    auto draw_points = [&](std::size_t count) {
      std::vector<double> v(count * dim_);
      for (double& z : v) z = scale * rng_.normal();
      return v;
    };
    ProbeCase c;
    c.x = draw_points(1);
    c.y = draw_points(1);
    c.mu = ParticleEnsemble(dim_, draw_points(n));
    c.nu = rng_.uniform() < 0.25 ? c.mu : ParticleEnsemble(dim_, draw_points(n));
    return c;
  }

 private:
  std::size_t dim_, max_n_;
  GaussianStream rng_;
};

template <class Sampler>
ProbeReport probe_monotonicity(const CoefficientSet& coeffs, Sampler&& sampler, std::size_t trials) {
  const auto k = coeffs.constants();
  const std::size_t d = coeffs.dim(), m = coeffs.noise_dim();
  ProbeReport report;
  report.trials = trials;
  enum { kMonotone, kSigmaLip, kGrowthH, kGrowthA, kMonotoneA, kCount };
  const bool active[kCount] = {k.lambda && k.kappa, k.sigma_lipschitz.has_value(),
                               k.delta.has_value(), k.growth.has_value(), k.growth.has_value()};
  const char* names[kCount] = {"H:monotone", "H:sigma-lipschitz", "H:growth", "A:growth",
                               "A:monotone"};
  std::vector<InequalityCheck> checks(kCount);
  for (int i = 0; i < kCount; ++i) checks[i].name = names[i];

  Point bx(d), by(d);
  std::vector<double> sx(d * m), sy(d * m);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    ProbeCase c = sampler();
    coeffs.freeze(c.t, c.mu)->drift(c.x, bx);
    coeffs.freeze(c.t, c.mu)->diffusion(c.x, sx);
    coeffs.freeze(c.t, c.nu)->drift(c.y, by);
    coeffs.freeze(c.t, c.nu)->diffusion(c.y, sy);
    const double w2sq = std::pow(w2_assignment(c.mu, c.nu).distance, 2);
    double inner = 0.0, dx2 = 0.0, dsig = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      inner += (bx[i] - by[i]) * (c.x[i] - c.y[i]);
      dx2 += (c.x[i] - c.y[i]) * (c.x[i] - c.y[i]);
    }
    for (std::size_t i = 0; i < d * m; ++i) dsig += (sx[i] - sy[i]) * (sx[i] - sy[i]);
    const double size_x = detail::squared_norm(bx) + detail::squared_norm(sx);
    const double base_x = 1.0 + detail::squared_norm(c.x) + second_moment(c.mu);

    double lhs[kCount] = {}, rhs[kCount] = {};
    if (active[kMonotone]) {
      lhs[kMonotone] = 2.0 * inner + dsig;
      rhs[kMonotone] = *k.kappa * w2sq - *k.lambda * dx2;
    }
    if (active[kSigmaLip]) {
      lhs[kSigmaLip] = dsig;
      rhs[kSigmaLip] = *k.sigma_lipschitz * (w2sq + dx2);
    }
    if (active[kGrowthH]) {
      lhs[kGrowthH] = size_x;
      rhs[kGrowthH] = *k.delta * base_x;
    }
    if (active[kGrowthA]) {
      lhs[kGrowthA] = size_x;
      rhs[kGrowthA] = *k.growth * base_x;
      lhs[kMonotoneA] = 2.0 * std::max(inner, 0.0) + dsig;
      rhs[kMonotoneA] = *k.growth * (dx2 + w2sq);
    }
    for (int i = 0; i < kCount; ++i) {
      if (!active[i]) continue;
      const double slack = lhs[i] - rhs[i];
      // Equality cases (e.g. Dirac pairs) round either way.
      const double tol = 1e-10 * (1.0 + std::abs(lhs[i]) + std::abs(rhs[i]));
      if (slack > tol) ++checks[i].violations;
      if (slack > checks[i].worst_slack) {
        checks[i].worst_slack = slack;
        checks[i].worst_case = c;
      }
    }
  }
  for (int i = 0; i < kCount; ++i) {
    if (active[i]) report.checks.push_back(std::move(checks[i]));
  }
  return report;
}

}  // namespace p2flow

#pragma once

// Cylindrical functionals f(mu) = g(mu(h_1), ..., mu(h_k)) and their lifted
// form f(x, mu) = g(x, mu(h_1), ..., mu(h_k)). Both g and the h_i carry
// their own gradients and Hessians so Lions derivatives are closed-form.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "p2flow/error.hpp"
#include "p2flow/measures.hpp"

namespace p2flow {

// A C^2 function R^p -> R. Hessian is p x p row-major.
struct ScalarField {
  std::size_t arity = 0;
  std::function<double(std::span<const double>)> value;
  std::function<void(std::span<const double>, std::span<double>)> gradient;
  std::function<void(std::span<const double>, std::span<double>)> hessian;
};

namespace fields {

inline ScalarField constant(std::size_t p, double c) {
  return {p, [c](std::span<const double>) { return c; },
          [](std::span<const double>, std::span<double> g) { std::fill(g.begin(), g.end(), 0.0); },
          [](std::span<const double>, std::span<double> h) { std::fill(h.begin(), h.end(), 0.0); }};
}

// w . u + c
inline ScalarField affine(std::vector<double> w, double c = 0.0) {
  const std::size_t p = w.size();
  return {p,
          [w, c](std::span<const double> u) {
            double s = c;
            for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * u[i];
            return s;
          },
          [w](std::span<const double>, std::span<double> g) { std::copy(w.begin(), w.end(), g.begin()); },
          [](std::span<const double>, std::span<double> h) { std::fill(h.begin(), h.end(), 0.0); }};
}

inline ScalarField coordinate(std::size_t p, std::size_t i) {
  std::vector<double> w(p, 0.0);
  w.at(i) = 1.0;
  return affine(std::move(w));
}

// 0.5 u^T A u + w . u + c with A symmetric.
inline ScalarField quadratic(std::vector<double> A, std::vector<double> w, double c = 0.0) {
  const std::size_t p = w.size();
  if (A.size() != p * p) throw InvalidArgument("fields::quadratic: A must be p x p");
  return {p,
          [A, w, c, p](std::span<const double> u) {
            double s = c;
            for (std::size_t i = 0; i < p; ++i) {
              s += w[i] * u[i];
              for (std::size_t j = 0; j < p; ++j) s += 0.5 * A[i * p + j] * u[i] * u[j];
            }
            return s;
          },
          [A, w, p](std::span<const double> u, std::span<double> g) {
            for (std::size_t i = 0; i < p; ++i) {
              double s = w[i];
              for (std::size_t j = 0; j < p; ++j) s += 0.5 * (A[i * p + j] + A[j * p + i]) * u[j];
              g[i] = s;
            }
          },
          [A, p](std::span<const double>, std::span<double> h) {
            for (std::size_t i = 0; i < p; ++i) {
              for (std::size_t j = 0; j < p; ++j) h[i * p + j] = 0.5 * (A[i * p + j] + A[j * p + i]);
            }
          }};
}

// |u|^2
inline ScalarField squared_norm(std::size_t p) {
  std::vector<double> A(p * p, 0.0);
  for (std::size_t i = 0; i < p; ++i) A[i * p + i] = 2.0;
  return quadratic(std::move(A), std::vector<double>(p, 0.0));
}

// u_i^2
inline ScalarField square(std::size_t p, std::size_t i) {
  std::vector<double> A(p * p, 0.0);
  A.at(i * p + i) = 2.0;
  return quadratic(std::move(A), std::vector<double>(p, 0.0));
}

// u_i * u_j
inline ScalarField product(std::size_t p, std::size_t i, std::size_t j) {
  std::vector<double> A(p * p, 0.0);
  A.at(i * p + j) += 1.0;
  A.at(j * p + i) += 1.0;
  return quadratic(std::move(A), std::vector<double>(p, 0.0));
}

// amp * sin(w . u + phase)
inline ScalarField sine(std::vector<double> w, double phase = 0.0, double amp = 1.0) {
  const std::size_t p = w.size();
  auto arg = [w, phase](std::span<const double> u) {
    double s = phase;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * u[i];
    return s;
  };
  return {p, [arg, amp](std::span<const double> u) { return amp * std::sin(arg(u)); },
          [arg, w, amp](std::span<const double> u, std::span<double> g) {
            const double c = amp * std::cos(arg(u));
            for (std::size_t i = 0; i < w.size(); ++i) g[i] = c * w[i];
          },
          [arg, w, amp, p](std::span<const double> u, std::span<double> h) {
            const double s = -amp * std::sin(arg(u));
            for (std::size_t i = 0; i < p; ++i) {
              for (std::size_t j = 0; j < p; ++j) h[i * p + j] = s * w[i] * w[j];
            }
          }};
}

// amp * exp(-|u - centre|^2 / (2 width^2))
inline ScalarField gaussian_bump(std::vector<double> centre, double width, double amp = 1.0) {
  const std::size_t p = centre.size();
  const double inv = 1.0 / (width * width);
  auto val = [centre, inv, amp](std::span<const double> u) {
    double r2 = 0.0;
    for (std::size_t i = 0; i < centre.size(); ++i) r2 += (u[i] - centre[i]) * (u[i] - centre[i]);
    return amp * std::exp(-0.5 * r2 * inv);
  };
  return {p, val,
          [val, centre, inv](std::span<const double> u, std::span<double> g) {
            const double v = val(u);
            for (std::size_t i = 0; i < centre.size(); ++i) g[i] = -v * inv * (u[i] - centre[i]);
          },
          [val, centre, inv, p](std::span<const double> u, std::span<double> h) {
            const double v = val(u);
            for (std::size_t i = 0; i < p; ++i) {
              for (std::size_t j = 0; j < p; ++j) {
                h[i * p + j] = v * (inv * inv * (u[i] - centre[i]) * (u[j] - centre[j]) -
                                    (i == j ? inv : 0.0));
              }
            }
          }};
}

inline ScalarField sum(ScalarField a, ScalarField b) {
  if (a.arity != b.arity) throw InvalidArgument("fields::sum: arity mismatch");
  const std::size_t p = a.arity;
  return {p, [a, b](std::span<const double> u) { return a.value(u) + b.value(u); },
          [a, b, p](std::span<const double> u, std::span<double> g) {
            std::vector<double> tmp(p);
            a.gradient(u, g);
            b.gradient(u, tmp);
            for (std::size_t i = 0; i < p; ++i) g[i] += tmp[i];
          },
          [a, b, p](std::span<const double> u, std::span<double> h) {
            std::vector<double> tmp(p * p);
            a.hessian(u, h);
            b.hessian(u, tmp);
            for (std::size_t i = 0; i < p * p; ++i) h[i] += tmp[i];
          }};
}

// G(u, v) = a(u) * b(v) on R^{p+q}.
inline ScalarField tensor_product(ScalarField a, ScalarField b) {
  const std::size_t p = a.arity, q = b.arity, r = p + q;
  return {r,
          [a, b, p, q](std::span<const double> w) {
            return a.value(w.subspan(0, p)) * b.value(w.subspan(p, q));
          },
          [a, b, p, q](std::span<const double> w, std::span<double> g) {
            const auto u = w.subspan(0, p), v = w.subspan(p, q);
            const double av = a.value(u), bv = b.value(v);
            a.gradient(u, g.subspan(0, p));
            b.gradient(v, g.subspan(p, q));
            for (std::size_t i = 0; i < p; ++i) g[i] *= bv;
            for (std::size_t j = 0; j < q; ++j) g[p + j] *= av;
          },
          [a, b, p, q, r](std::span<const double> w, std::span<double> h) {
            const auto u = w.subspan(0, p), v = w.subspan(p, q);
            const double av = a.value(u), bv = b.value(v);
            std::vector<double> ga(p), gb(q), ha(p * p), hb(q * q);
            a.gradient(u, ga);
            b.gradient(v, gb);
            a.hessian(u, ha);
            b.hessian(v, hb);
            for (std::size_t i = 0; i < r; ++i) {
              for (std::size_t j = 0; j < r; ++j) {
                double val;
                if (i < p && j < p) val = ha[i * p + j] * bv;
                else if (i >= p && j >= p) val = av * hb[(i - p) * q + (j - p)];
                else if (i < p) val = ga[i] * gb[j - p];
                else val = ga[j] * gb[i - p];
                h[i * r + j] = val;
              }
            }
          }};
}

// c(u) = g(u_{p..p+k}) ignoring the first p arguments.
inline ScalarField ignore_leading(std::size_t p, ScalarField g) {
  const std::size_t k = g.arity, r = p + k;
  return {r, [g, p, k](std::span<const double> w) { return g.value(w.subspan(p, k)); },
          [g, p, k](std::span<const double> w, std::span<double> out) {
            std::fill(out.begin(), out.end(), 0.0);
            g.gradient(w.subspan(p, k), out.subspan(p, k));
          },
          [g, p, k, r](std::span<const double> w, std::span<double> out) {
            std::fill(out.begin(), out.end(), 0.0);
            std::vector<double> hk(k * k);
            g.hessian(w.subspan(p, k), hk);
            for (std::size_t i = 0; i < k; ++i) {
              for (std::size_t j = 0; j < k; ++j) out[(p + i) * r + (p + j)] = hk[i * k + j];
            }
          }};
}

}  // namespace fields

class CylindricalFunctional {
 public:
  CylindricalFunctional(std::size_t dim, ScalarField outer, std::vector<ScalarField> inner)
      : dim_(dim), outer_(std::move(outer)), inner_(std::move(inner)) {
    if (inner_.empty()) throw InvalidArgument("CylindricalFunctional: need k >= 1 inner functions");
    if (outer_.arity != inner_.size()) {
      throw InvalidArgument("CylindricalFunctional: outer arity must equal number of inner functions");
    }
    for (const auto& h : inner_) {
      if (h.arity != dim_) throw InvalidArgument("CylindricalFunctional: inner arity must equal d");
    }
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t arity() const noexcept { return inner_.size(); }
  const ScalarField& outer() const noexcept { return outer_; }
  const std::vector<ScalarField>& inner() const noexcept { return inner_; }

  // (mu(h_1), ..., mu(h_k))
  std::vector<double> moments(const ParticleEnsemble& mu) const {
    std::vector<double> u(inner_.size());
    for (std::size_t i = 0; i < inner_.size(); ++i) u[i] = integrate(mu, inner_[i].value);
    return u;
  }

  double operator()(const ParticleEnsemble& mu) const { return outer_.value(moments(mu)); }

 private:
  std::size_t dim_;
  ScalarField outer_;
  std::vector<ScalarField> inner_;
};

// f(x, mu) = g(x, mu(h_1), ..., mu(h_k)); g has arity d + k, x first.
class LiftedFunctional {
 public:
  LiftedFunctional(std::size_t dim, ScalarField outer, std::vector<ScalarField> inner)
      : dim_(dim), outer_(std::move(outer)), inner_(std::move(inner)) {
    if (outer_.arity != dim_ + inner_.size()) {
      throw InvalidArgument("LiftedFunctional: outer arity must be d + k");
    }
    for (const auto& h : inner_) {
      if (h.arity != dim_) throw InvalidArgument("LiftedFunctional: inner arity must equal d");
    }
  }

  // f(x, mu) = f(mu)
  static LiftedFunctional from_measure(const CylindricalFunctional& f) {
    return LiftedFunctional(f.dim(), fields::ignore_leading(f.dim(), f.outer()), f.inner());
  }
  // f(x, mu) = h(x)
  static LiftedFunctional from_point(ScalarField h) {
    const std::size_t d = h.arity;
    return LiftedFunctional(d, std::move(h), {});
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t arity() const noexcept { return inner_.size(); }
  const ScalarField& outer() const noexcept { return outer_; }
  const std::vector<ScalarField>& inner() const noexcept { return inner_; }

  // (x, mu(h_1), ..., mu(h_k))
  std::vector<double> arguments(std::span<const double> x, const ParticleEnsemble& mu) const {
    std::vector<double> w(x.begin(), x.end());
    for (const auto& h : inner_) w.push_back(integrate(mu, h.value));
    return w;
  }

  double operator()(std::span<const double> x, const ParticleEnsemble& mu) const {
    return outer_.value(arguments(x, mu));
  }

 private:
  std::size_t dim_;
  ScalarField outer_;
  std::vector<ScalarField> inner_;
};

// f * g as a single cylindrical functional on the concatenated inner list.
inline CylindricalFunctional product(const CylindricalFunctional& f, const CylindricalFunctional& g) {
  if (f.dim() != g.dim()) throw InvalidArgument("product: dimension mismatch");
  std::vector<ScalarField> inner = f.inner();
  inner.insert(inner.end(), g.inner().begin(), g.inner().end());
  return CylindricalFunctional(f.dim(), fields::tensor_product(f.outer(), g.outer()), std::move(inner));
}

}  // namespace p2flow

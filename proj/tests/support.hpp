#pragma once

// Hand-rolled generators for property tests. All draws come from the
// library's own counter-based streams, so every case is reproducible from
// its (seed, stream) pair.

#include <cmath>
#include <cstdint>
#include <vector>

#include "p2flow/functionals.hpp"
#include "p2flow/measures.hpp"
#include "p2flow/rng.hpp"

namespace p2flow::gen {

class Gen {
 public:
  explicit Gen(std::uint64_t seed, std::uint64_t stream = 0) : rng_(seed, stream) {}

  double normal() { return rng_.normal(); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * rng_.uniform(); }
  // Integer in [lo, hi].
  std::size_t integer(std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng_.next_u64() % (hi - lo + 1));
  }

  std::vector<double> normals(std::size_t k, double scale = 1.0) {
    std::vector<double> v(k);
    for (double& x : v) x = scale * normal();
    return v;
  }

  ParticleEnsemble ensemble(std::size_t d, std::size_t n, double scale = 1.0) {
    return ParticleEnsemble(d, normals(n * d, scale));
  }

  // Random C^2 inner function on R^d from a small menu.
  ScalarField inner(std::size_t d) {
    switch (integer(0, 3)) {
      case 0: return fields::affine(normals(d), normal());
      case 1: return fields::sine(normals(d, 0.7), normal(), uniform(0.5, 1.5));
      case 2: return fields::gaussian_bump(normals(d), uniform(0.8, 2.0), uniform(0.5, 2.0));
      default: {
        std::vector<double> A(d * d);
        for (std::size_t i = 0; i < d; ++i) {
          for (std::size_t j = 0; j <= i; ++j) A[i * d + j] = A[j * d + i] = normal();
        }
        return fields::quadratic(std::move(A), normals(d), normal());
      }
    }
  }

  // Random C^2 outer function on R^k.
  ScalarField outer(std::size_t k) {
    switch (integer(0, 2)) {
      case 0: return fields::affine(normals(k), normal());
      case 1: return fields::sine(normals(k, 0.5), normal(), uniform(0.5, 1.5));
      default: {
        std::vector<double> A(k * k);
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j <= i; ++j) A[i * k + j] = A[j * k + i] = normal();
        }
        return fields::quadratic(std::move(A), normals(k), normal());
      }
    }
  }

  CylindricalFunctional cylindrical(std::size_t d, std::size_t k) {
    std::vector<ScalarField> hs;
    for (std::size_t i = 0; i < k; ++i) hs.push_back(inner(d));
    return CylindricalFunctional(d, outer(k), std::move(hs));
  }

  LiftedFunctional lifted(std::size_t d, std::size_t k) {
    std::vector<ScalarField> hs;
    for (std::size_t i = 0; i < k; ++i) hs.push_back(inner(d));
    return LiftedFunctional(d, outer(d + k), std::move(hs));
  }

 private:
  GaussianStream rng_;
};

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace p2flow::gen

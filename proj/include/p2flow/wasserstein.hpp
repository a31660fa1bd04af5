#pragma once

// Exact W2 between equal-size, equal-weight ensembles.
//
// With uniform weights 1/n on both sides, an optimal transport plan can be
// taken to be a permutation (Birkhoff), so W2^2 is the value of a linear
// assignment problem on the squared-distance matrix.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "p2flow/error.hpp"
#include "p2flow/measures.hpp"

namespace p2flow {

// Matching i -> permutation[i]; cost is the mean squared displacement.
struct Coupling {
  std::vector<std::size_t> permutation;
  double cost = 0.0;
};

struct TransportResult {
  double distance = 0.0;  // W2, not squared
  Coupling coupling;
};

inline constexpr std::size_t kMaxAssignmentSize = 20000;
inline constexpr std::size_t kMaxBruteForceSize = 8;

namespace detail {

inline void require_same_shape(const ParticleEnsemble& mu, const ParticleEnsemble& nu,
                               const char* who) {
  if (mu.dim() != nu.dim()) {
    throw InvalidArgument(std::string(who) + ": dimension mismatch " + std::to_string(mu.dim()) +
                          " vs " + std::to_string(nu.dim()));
  }
  if (mu.size() != nu.size()) {
    throw InvalidArgument(std::string(who) + ": ensembles must have equal size, got " +
                          std::to_string(mu.size()) + " and " + std::to_string(nu.size()));
  }
}

inline double coupling_cost(const ParticleEnsemble& mu, const ParticleEnsemble& nu,
                            const std::vector<std::size_t>& perm) {
  double s = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) s += squared_distance(mu[i], nu[perm[i]]);
  return s / static_cast<double>(perm.size());
}

// Shortest augmenting path Hungarian method with row/column potentials
// (Jonker-Volgenant style), O(n^3). `cost` is n x n row-major. Returns the
// column assigned to each row.
inline std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based internally; index 0 is the virtual root column.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), min_slack(n + 1);
  std::vector<std::size_t> row_of_col(n + 1, 0), prev_col(n + 1, 0);
  std::vector<char> used(n + 1);

  for (std::size_t row = 1; row <= n; ++row) {
    row_of_col[0] = row;
    std::size_t col0 = 0;
    std::fill(min_slack.begin(), min_slack.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[col0] = 1;
      const std::size_t r = row_of_col[col0];
      double delta = inf;
      std::size_t col1 = 0;
      const double* crow = cost.data() + (r - 1) * n;
      for (std::size_t c = 1; c <= n; ++c) {
        if (used[c]) continue;
        const double slack = crow[c - 1] - u[r] - v[c];
        if (slack < min_slack[c]) {
          min_slack[c] = slack;
          prev_col[c] = col0;
        }
        if (min_slack[c] < delta) {
          delta = min_slack[c];
          col1 = c;
        }
      }
      for (std::size_t c = 0; c <= n; ++c) {
        if (used[c]) {
          u[row_of_col[c]] += delta;
          v[c] -= delta;
        } else {
          min_slack[c] -= delta;
        }
      }
      col0 = col1;
    } while (row_of_col[col0] != 0);
    do {
      const std::size_t c = prev_col[col0];
      row_of_col[col0] = row_of_col[c];
      col0 = c;
    } while (col0 != 0);
  }

  std::vector<std::size_t> assignment(n);
  for (std::size_t c = 1; c <= n; ++c) assignment[row_of_col[c] - 1] = c - 1;
  return assignment;
}

}  // namespace detail

// Monotone rearrangement; d must be 1.
inline double w2_1d(const ParticleEnsemble& mu, const ParticleEnsemble& nu) {
  detail::require_same_shape(mu, nu, "w2_1d");
  if (mu.dim() != 1) throw InvalidArgument("w2_1d: requires dimension 1");
  std::vector<double> a(mu.positions().begin(), mu.positions().end());
  std::vector<double> b(nu.positions().begin(), nu.positions().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

inline TransportResult w2_assignment(const ParticleEnsemble& mu, const ParticleEnsemble& nu) {
  detail::require_same_shape(mu, nu, "w2_assignment");
  const std::size_t n = mu.size();
  if (n > kMaxAssignmentSize) {
    throw InvalidArgument("w2_assignment: n = " + std::to_string(n) + " exceeds guard " +
                          std::to_string(kMaxAssignmentSize));
  }
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = detail::squared_distance(mu[i], nu[j]);
  }
  Coupling c;
  c.permutation = detail::solve_assignment(cost, n);
  c.cost = detail::coupling_cost(mu, nu, c.permutation);
  return {std::sqrt(c.cost), std::move(c)};
}

// Exhaustive oracle over all n! matchings.
inline TransportResult w2_bruteforce(const ParticleEnsemble& mu, const ParticleEnsemble& nu) {
  detail::require_same_shape(mu, nu, "w2_bruteforce");
  const std::size_t n = mu.size();
  if (n > kMaxBruteForceSize) {
    throw InvalidArgument("w2_bruteforce: n = " + std::to_string(n) + " exceeds guard " +
                          std::to_string(kMaxBruteForceSize));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Coupling best{perm, detail::coupling_cost(mu, nu, perm)};
  while (std::next_permutation(perm.begin(), perm.end())) {
    const double c = detail::coupling_cost(mu, nu, perm);
    if (c < best.cost) best = {perm, c};
  }
  return {std::sqrt(best.cost), std::move(best)};
}

// Cost of the identity matching; always >= W2^2.
inline double index_coupling_cost(const ParticleEnsemble& mu, const ParticleEnsemble& nu) {
  detail::require_same_shape(mu, nu, "index_coupling_cost");
  double s = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) s += detail::squared_distance(mu[i], nu[i]);
  return s / static_cast<double>(mu.size());
}

// nu with particles reordered so that index i is matched to mu's particle i.
inline ParticleEnsemble apply_coupling(const ParticleEnsemble& nu, const Coupling& coupling) {
  std::vector<double> flat;
  flat.reserve(nu.positions().size());
  for (std::size_t i = 0; i < coupling.permutation.size(); ++i) {
    const auto y = nu[coupling.permutation[i]];
    flat.insert(flat.end(), y.begin(), y.end());
  }
  return ParticleEnsemble(nu.dim(), std::move(flat));
}

}  // namespace p2flow

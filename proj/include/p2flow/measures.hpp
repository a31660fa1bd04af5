#pragma once

// Equal-weight particle ensembles: the finite stand-in for a measure in P2.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "p2flow/error.hpp"

namespace p2flow {

using Point = std::vector<double>;

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw InvalidArgument(std::string(what) + ": non-finite coordinate at flat index " +
                            std::to_string(i));
    }
  }
}

inline double squared_norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

inline double squared_distance(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

// n points in R^d stored row-major; particle identity is the row index.
class ParticleEnsemble {
 public:
  ParticleEnsemble() = default;

  ParticleEnsemble(std::size_t dim, std::vector<double> positions)
      : dim_(dim), positions_(std::move(positions)) {
    if (dim_ == 0) throw InvalidArgument("ParticleEnsemble: dimension must be positive");
    if (positions_.empty() || positions_.size() % dim_ != 0) {
      throw InvalidArgument("ParticleEnsemble: need n >= 1 points of dimension " +
                            std::to_string(dim_) + ", got " + std::to_string(positions_.size()) +
                            " coordinates");
    }
    detail::require_finite(positions_, "ParticleEnsemble");
  }

  static ParticleEnsemble from_points(const std::vector<Point>& points) {
    if (points.empty()) throw InvalidArgument("ParticleEnsemble: empty point list");
    const std::size_t d = points.front().size();
    std::vector<double> flat;
    flat.reserve(points.size() * d);
    for (const auto& p : points) {
      if (p.size() != d) throw InvalidArgument("ParticleEnsemble: ragged point list");
      flat.insert(flat.end(), p.begin(), p.end());
    }
    return ParticleEnsemble(d, std::move(flat));
  }

  static ParticleEnsemble dirac(std::span<const double> x) {
    return ParticleEnsemble(x.size(), std::vector<double>(x.begin(), x.end()));
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return dim_ == 0 ? 0 : positions_.size() / dim_; }

  std::span<const double> operator[](std::size_t i) const {
    return {positions_.data() + i * dim_, dim_};
  }
  std::span<const double> positions() const noexcept { return positions_; }

  bool operator==(const ParticleEnsemble&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<double> positions_;
};

// Base ensemble plus tagged points X^{x,mu} that ride the same flow without
// entering any statistic of the measure.
class TaggedEnsemble {
 public:
  TaggedEnsemble() = default;

  explicit TaggedEnsemble(ParticleEnsemble base, std::vector<double> tagged = {})
      : base_(std::move(base)), tagged_(std::move(tagged)) {
    if (tagged_.size() % base_.dim() != 0) {
      throw InvalidArgument("TaggedEnsemble: tagged coordinates not a multiple of dimension");
    }
    detail::require_finite(tagged_, "TaggedEnsemble");
  }

  const ParticleEnsemble& base() const noexcept { return base_; }
  std::size_t dim() const noexcept { return base_.dim(); }
  std::size_t tagged_count() const noexcept { return tagged_.size() / base_.dim(); }
  std::span<const double> tagged(std::size_t i) const {
    return {tagged_.data() + i * base_.dim(), base_.dim()};
  }
  std::span<const double> tagged_positions() const noexcept { return tagged_; }

  bool operator==(const TaggedEnsemble&) const = default;

 private:
  ParticleEnsemble base_;
  std::vector<double> tagged_;
};

// ||mu||_2^2 = (1/n) sum |x_i|^2
inline double second_moment(const ParticleEnsemble& mu) {
  double s = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) s += detail::squared_norm(mu[i]);
  return s / static_cast<double>(mu.size());
}

inline Point mean(const ParticleEnsemble& mu) {
  Point m(mu.dim(), 0.0);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const auto x = mu[i];
    for (std::size_t j = 0; j < mu.dim(); ++j) m[j] += x[j];
  }
  for (double& v : m) v /= static_cast<double>(mu.size());
  return m;
}

// mu(h) for a scalar test function h.
template <class Fn>
double integrate(const ParticleEnsemble& mu, Fn&& h) {
  double s = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) s += h(mu[i]);
  return s / static_cast<double>(mu.size());
}

// Image measure mu o T^{-1}. `map(x, out)` writes T(x) into out.
template <class Map>
ParticleEnsemble pushforward(const ParticleEnsemble& mu, Map&& map) {
  const std::size_t d = mu.dim();
  std::vector<double> out(mu.positions().size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    std::span<double> dst(out.data() + i * d, d);
    map(mu[i], dst);
    for (double v : dst) {
      if (!std::isfinite(v)) {
        throw InvalidArgument("pushforward: non-finite image of particle " + std::to_string(i));
      }
    }
  }
  return ParticleEnsemble(d, std::move(out));
}

// mu o (Id + eps*phi)^{-1}, exact for empirical measures.
template <class Field>
ParticleEnsemble perturb(const ParticleEnsemble& mu, Field&& phi, double eps) {
  std::vector<double> dir(mu.dim());
  return pushforward(mu, [&](std::span<const double> x, std::span<double> out) {
    phi(x, std::span<double>(dir));
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] + eps * dir[j];
  });
}

}  // namespace p2flow

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>

#include "p2flow/error.hpp"

namespace p2flow {

// Monte Carlo estimate: stderr = sample std / sqrt(count).
struct Estimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t count = 0;

  double z_score(double reference = 0.0) const {
    if (std_error == 0.0) return mean == reference ? 0.0 : INFINITY;
    return (mean - reference) / std_error;
  }
};

// (count, mean, centred sum of squares) partials; merge is associative up
// to rounding, so a fixed chunking gives a fixed result.
class RunningStats {
 public:
  void push(double x) noexcept {
    ++count_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta * (x - mean_);
  }

  void merge(const RunningStats& other) noexcept {
    if (other.count_ == 0) return;
    if (count_ == 0) {
      *this = other;
      return;
    }
    const auto na = static_cast<double>(count_), nb = static_cast<double>(other.count_);
    const double delta = other.mean_ - mean_;
    const double n = na + nb;
    mean_ += delta * nb / n;
    m2_ += other.m2_ + delta * delta * na * nb / n;
    count_ += other.count_;
  }

  std::size_t count() const noexcept { return count_; }
  double mean() const noexcept { return mean_; }
  double variance() const noexcept {
    return count_ > 1 ? m2_ / static_cast<double>(count_ - 1) : 0.0;
  }

  Estimate estimate() const {
    if (count_ < 2) throw InvalidArgument("Estimate: need at least 2 replicas");
    return {mean_, std::sqrt(variance() / static_cast<double>(count_)), count_};
  }

 private:
  std::size_t count_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

inline constexpr std::size_t kReductionChunk = 256;

inline RunningStats summarize(std::span<const double> values) {
  RunningStats total;
  for (std::size_t start = 0; start < values.size(); start += kReductionChunk) {
    RunningStats chunk;
    const std::size_t end = std::min(values.size(), start + kReductionChunk);
    for (std::size_t i = start; i < end; ++i) chunk.push(values[i]);
    total.merge(chunk);
  }
  return total;
}

inline Estimate estimate_of(std::span<const double> values) { return summarize(values).estimate(); }

}  // namespace p2flow

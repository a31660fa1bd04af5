#pragma once

// Counter-based random streams. Every stream is a pure function of
// (seed, stream_id): Philox4x32-10 keyed by the seed, with the stream id in
// the upper half of the 128-bit counter. Replicas therefore never share or
// split a sequential state.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace p2flow {

class Philox4x32 {
 public:
  using Block = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Block generate(Block ctr, Key key) noexcept {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kWeyl0;
        key[1] += kWeyl1;
      }
      const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
};

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Child stream id for nested experiments (e.g. inner replicas of an outer one).
inline std::uint64_t derive_stream_id(std::uint64_t parent, std::uint64_t child) noexcept {
  return splitmix64(splitmix64(parent) ^ (child * 0xD6E8FEB86659FD93ull + 0x632BE59BD9B4E019ull));
}

class GaussianStream {
 public:
  GaussianStream(std::uint64_t seed, std::uint64_t stream_id) noexcept
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        stream_id_(stream_id) {}

  std::uint64_t next_u64() noexcept {
    if (word_ == 4) refill();
    const std::uint64_t hi = buffer_[word_];
    const std::uint64_t lo = buffer_[word_ + 1];
    word_ += 2;
    return (hi << 32) | lo;
  }

  // Uniform on (0, 1].
  double uniform() noexcept {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; both variates of a pair are used.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  std::uint64_t stream_id() const noexcept { return stream_id_; }

 private:
  void refill() noexcept {
    const Philox4x32::Block ctr{static_cast<std::uint32_t>(block_),
                                static_cast<std::uint32_t>(block_ >> 32),
                                static_cast<std::uint32_t>(stream_id_),
                                static_cast<std::uint32_t>(stream_id_ >> 32)};
    buffer_ = Philox4x32::generate(ctr, key_);
    ++block_;
    word_ = 0;
  }

  Philox4x32::Key key_;
  std::uint64_t stream_id_;
  std::uint64_t block_ = 0;
  Philox4x32::Block buffer_{};
  int word_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline GaussianStream rng_stream(std::uint64_t seed, std::uint64_t stream_id) noexcept {
  return GaussianStream(seed, stream_id);
}

}  // namespace p2flow

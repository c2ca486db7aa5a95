#pragma once

#include <cstdint>

namespace mcblock {

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z) noexcept;

/// Counter-based, splittable 64-bit generator.
///
/// The i-th draw (0-based) of a stream with key k is
///     mix64(k + (i + 1) * 0x9E3779B97F4A7C15)
/// and `split(j)` yields the stream keyed by
///     mix64(k ^ mix64(j + 0x9E3779B97F4A7C15)).
/// Every derived quantity (uniform, normal, integer) is defined in terms of
/// these raw words so any language can reproduce the exact streams.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key = 0) noexcept : key_(key) {}

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;

  /// Independent child stream; does not advance this stream.
  CounterRng split(std::uint64_t stream) const noexcept;

  /// (next_u64() >> 11) * 2^-53, in [0, 1).
  double uniform() noexcept;
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n) via the high word of a 128-bit product.
  std::uint64_t uniform_int(std::uint64_t n) noexcept;
  /// True with probability p.
  bool bernoulli(double p) noexcept { return uniform() < p; }
  /// Box-Muller, consumes exactly two draws, no caching.
  double normal() noexcept;

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace mcblock

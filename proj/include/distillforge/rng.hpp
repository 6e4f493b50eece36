#pragma once

#include <cstdint>
#include <iterator>
#include <utility>

namespace distillforge {

/// SplitMix64 generator. The whole stream is a pure function of the seed and
/// uses only integer arithmetic plus IEEE-754 double conversions, so it is
/// reproducible on every platform. Normal draws use Box-Muller with
/// std::log/std::cos; these are the only libm-dependent paths.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept;

  /// Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Standard normal variate (consumes two draws).
  double normal() noexcept;

  /// Unbiased integer in [0, n) by rejection; n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;

  /// Independent child stream keyed by `stream`; does not advance this one.
  Rng fork(std::uint64_t stream) const noexcept;

  std::uint64_t state() const noexcept { return state_; }

  /// Fisher-Yates, high index to low.
  template <typename RandomIt>
  void shuffle(RandomIt first, RandomIt last) {
    auto n = static_cast<std::uint64_t>(std::distance(first, last));
    for (std::uint64_t i = n; i > 1; --i) {
      auto j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Finalizer of SplitMix64, exposed for seed derivation.
std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace distillforge

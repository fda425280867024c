#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace mmclip {

/// Named consumers of randomness. Each gets its own sub-stream so adding
/// draws to one never shifts another.
enum class Purpose : std::uint64_t {
  kInit = 1,
  kData = 2,
  kBatch = 3,
  kMask = 4,
  kProbe = 5,
};

/// Seeded 64-bit stream (mt19937_64 underneath). Integer and real draws are
/// derived from raw engine output by hand so sequences are identical across
/// standard library implementations.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  /// Independent child stream keyed by (this seed, purpose, a, b).
  RngStream derive(Purpose purpose, std::uint64_t a = 0, std::uint64_t b = 0) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Normal(0, std) resampled until |x| <= 2 std.
  double truncated_normal(double std);
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t mix64(std::uint64_t x);

/// Exactly k distinct elements of `population`, in draw order (partial
/// Fisher-Yates). Throws if k exceeds the population size.
std::vector<std::size_t> sample_without_replacement(RngStream& rng,
                                                    std::span<const std::size_t> population,
                                                    std::size_t k);

/// Deterministic permutation of 0..n-1.
std::vector<std::size_t> shuffled_indices(RngStream& rng, std::size_t n);

}  // namespace mmclip

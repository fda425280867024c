#include "mmclip/rng.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "mmclip/tensor.hpp"

namespace mmclip {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finaliser
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

RngStream RngStream::derive(Purpose purpose, std::uint64_t a, std::uint64_t b) const {
  std::uint64_t h = mix64(seed_ ^ 0x6a09e667f3bcc909ULL);
  h = mix64(h ^ static_cast<std::uint64_t>(purpose));
  h = mix64(h ^ a);
  h = mix64(h ^ (b + 0x3c6ef372fe94f82bULL));
  return RngStream(h);
}

double RngStream::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw Error("RngStream::below(0)");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  // Box-Muller; one value per call keeps the stream stateless beyond the engine.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double RngStream::truncated_normal(double std) {
  for (;;) {
    const double z = normal();
    if (std::abs(z) <= 2.0) return z * std;
  }
}

std::vector<std::size_t> sample_without_replacement(RngStream& rng,
                                                    std::span<const std::size_t> population,
                                                    std::size_t k) {
  if (k > population.size()) {
    throw Error("cannot sample " + std::to_string(k) + " items without replacement from " +
                std::to_string(population.size()));
  }
  std::vector<std::size_t> pool(population.begin(), population.end());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

std::vector<std::size_t> shuffled_indices(RngStream& rng, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return sample_without_replacement(rng, idx, n);
}

}  // namespace mmclip

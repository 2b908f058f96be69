#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "fewshot/errors.hpp"

namespace fewshot {

// splitmix64: tiny, public-domain, bit-exact on every platform.
// We deliberately avoid std::mt19937 + std:: distributions, whose
// real-valued outputs are not pinned down by the standard.
inline uint64_t splitmix64_next(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed and a tag path,
// e.g. mix_seed({run_seed, 2, epoch, iter}) for per-step streams.
inline uint64_t mix_seed(std::initializer_list<uint64_t> words) {
  uint64_t s = 0x8e2a1f0d3c5b7a96ull;
  for (uint64_t w : words) {
    s ^= w + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
    (void)splitmix64_next(s);
  }
  return s;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64_next(state_); }

  // Unbiased integer in [0, n) via threshold rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) throw ContractError("Rng::below: n must be positive");
    const uint64_t threshold = (0 - n) % n;  // (2^64 - n) mod n
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Uniform double in [0, 1) with 53 bits of mantissa.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller. Consumes exactly two u64 draws per call (no caching, so the
  // stream position stays easy to reason about).
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // In-place Fisher-Yates.
  template <typename V>
  void shuffle(V& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      const size_t j = static_cast<size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  // k distinct values from [0, n), order random (partial Fisher-Yates).
  std::vector<uint32_t> sample_without_replacement(uint32_t n, uint32_t k) {
    if (k > n) throw SamplingError("sample_without_replacement: k exceeds population");
    std::vector<uint32_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0u);
    for (uint32_t i = 0; i < k; ++i) {
      const uint32_t j = i + static_cast<uint32_t>(below(n - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  uint64_t state_;
};

}  // namespace fewshot

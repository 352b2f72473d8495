#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace remedi {

// Deterministic RNG used everywhere. Wraps a 64-bit SplitMix-seeded
// xoshiro-style generator with hand-rolled distributions so results do not
// depend on the standard library's <random> distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {
    // warm up so nearby seeds diverge
    for (int i = 0; i < 4; ++i) next();
  }

  uint64_t next() {
    // splitmix64
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform integer in [0, n), n > 0. Lemire's multiply-shift with rejection.
  uint64_t uniform(uint64_t n) {
    __uint128_t m = static_cast<__uint128_t>(next()) * n;
    uint64_t lo = static_cast<uint64_t>(m);
    if (lo < n) {
      uint64_t t = (0 - n) % n;
      while (lo < t) {
        m = static_cast<__uint128_t>(next()) * n;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  int uniform_int(int lo, int hi) {  // inclusive range [lo, hi]
    return lo + static_cast<int>(uniform(static_cast<uint64_t>(hi - lo + 1)));
  }

  double uniform_real() {  // [0, 1)
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  double uniform_real(double lo, double hi) {
    return lo + (hi - lo) * uniform_real();
  }

  // Box-Muller; one value per call keeps the stream position predictable.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform_real();
    } while (u1 <= 1e-300);
    u2 = uniform_real();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  bool bernoulli(double p) { return uniform_real() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  template <typename T>
  const T& choice(const std::vector<T>& v) {
    return v[uniform(v.size())];
  }

  // Independent substream derived from this seed and a label. Forking does
  // not advance the parent stream.
  Rng fork(const std::string& label) const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return Rng(state_ ^ (h | 1));
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a over raw bytes; used for config hashes and checkpoint checksums.
inline uint64_t fnv1a64(const void* bytes, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace remedi

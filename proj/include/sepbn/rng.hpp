#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace sepbn {

// SplitMix64: 64-bit splittable generator. Every random decision in the
// project flows from one of these so that (config, seed) fixes the full
// trajectory. Stream k of seed s is Rng(mix(s, k)).
class Rng {
public:
  Rng() : state_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Derive an independent stream without disturbing this one.
  Rng split(uint64_t k) const {
    Rng r(state_ + 0x632be59bd9b4e019ull * (k + 1));
    r.next_u64();
    return r;
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  // Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  uint64_t state_;
};

}  // namespace sepbn

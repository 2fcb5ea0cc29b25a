#pragma once

#include <cmath>
#include <cstdint>

namespace apex {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a;
  splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
  splitmix64(s);
  return s;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }

// Counter-free deterministic stream. Every consumer derives its own stream from
// (seed, purpose, index) so parallel workers stay reproducible.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : state_(seed) {
    // burn-in decorrelates nearby seeds
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, n)
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  int next_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // uniform in open interval (0, 1)
  double next_unit_open() {
    const double u = (static_cast<double>(next_u64() >> 11) + 0.5) / 9007199254740992.0;
    return u;
  }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit_open(); }

  // standard normal via Box-Muller; spare value cached
  double next_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = next_unit_open();
    const double u2 = next_unit_open();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace apex

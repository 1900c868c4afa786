#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace qsa {

// Counter-based pseudo-random generator built on the splitmix64 finalizer:
// output(n) = finalize(key + n * golden_gamma). State is just (key, counter),
// so skipping ahead is O(1) and independent substreams come from hashing the
// key with a child id. Bit-identical output for a fixed seed on any platform,
// which is what makes whole experiment records reproducible.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(mix(seed) ^ (stream * kSalt))) {}

  // Independent substream; children with distinct ids never collide in practice.
  CounterRng split(std::uint64_t child) const {
    CounterRng r(0);
    r.key_ = mix(key_ ^ mix(child + kSalt));
    r.counter_ = 0;
    return r;
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGolden); }

  // Uniform on [0,1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0,1], safe as a log() argument.
  double next_double_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  // Standard normal via Box-Muller (two uniforms per draw, no cached spare,
  // so the stream position is a pure function of the draw count).
  double next_gaussian() {
    const double u1 = next_double_pos();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Index drawn from an unnormalized weight vector by inverse CDF.
  // Falls back to the last strictly positive weight on rounding spill.
  int next_index(const double* w, int n) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += w[i];
    if (!(total > 0.0)) throw std::invalid_argument("next_index: nonpositive total weight");
    double t = next_double() * total;
    int last_pos = -1;
    for (int i = 0; i < n; ++i) {
      if (w[i] > 0.0) last_pos = i;
      t -= w[i];
      if (t < 0.0 && w[i] > 0.0) return i;
    }
    return last_pos;
  }

  int next_index(const std::vector<double>& w) {
    return next_index(w.data(), static_cast<int>(w.size()));
  }

  std::uint64_t counter() const { return counter_; }

  static std::uint64_t mix(std::uint64_t z) {
    z += kGolden;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
  static constexpr std::uint64_t kSalt = 0xD1B54A32D192ED03ull;
  static constexpr double kPi = 3.14159265358979323846;

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace qsa

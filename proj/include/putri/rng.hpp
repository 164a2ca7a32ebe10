#pragma once

#include <cstdint>

namespace putri {

// Deterministic 64-bit generator used everywhere randomness is needed, so
// that fixtures and pruning runs reproduce bit-for-bit across platforms.
//
// State update (xorshift64*):
//   x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27;  output = x * 2685821657736338717
//
// The seed is pre-mixed with one round of splitmix64 so that seed 0 and
// small consecutive seeds give unrelated streams:
//   z = (seed + 0x9E3779B97F4A7C15); z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; state = z ^ (z >> 31)   (1 if zero)
class Rng {
  public:
    explicit Rng(uint64_t seed) {
        uint64_t z = seed + 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        state_ = z ^ (z >> 31);
        if (state_ == 0) state_ = 1;  // xorshift state must be nonzero
    }

    uint64_t next_u64() {
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 2685821657736338717ull;
    }

    // Uniform in [0, 1), 53-bit mantissa.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [-b, b]. Avoids libm so streams are platform-exact.
    double next_symmetric(double b) {
        return (2.0 * next_double() - 1.0) * b;
    }

    // Uniform integer in [0, n). n must be positive.
    uint64_t next_below(uint64_t n) {
        return next_u64() % n;
    }

  private:
    uint64_t state_;
};

}  // namespace putri

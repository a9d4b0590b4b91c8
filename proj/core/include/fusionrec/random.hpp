#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>

namespace fusionrec {

// 64-bit FNV-1a. Used for config hashes, checkpoint ids and stream labels.
constexpr uint64_t fnv1a64(std::string_view bytes,
                           uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::string hex64(uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, value >>= 4) out[i] = kDigits[value & 0xf];
  return out;
}

// A single run seed fans out into independent named streams ("init",
// "negatives", "batch-order", "head-init", ...). Drawing more from one stream
// never shifts another.
inline std::mt19937_64 make_stream(uint64_t seed, std::string_view label) {
  return std::mt19937_64(splitmix64(seed ^ fnv1a64(label)));
}

// Portable uniform integer in [0, n). std::uniform_int_distribution is
// implementation-defined, this is not.
inline uint64_t uniform_index(std::mt19937_64& rng, uint64_t n) {
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t draw;
  do {
    draw = rng();
  } while (draw >= limit);
  return draw % n;
}

inline double uniform_real(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller, so streams reproduce across standard libraries.
class NormalSampler {
 public:
  NormalSampler(double mean, double stddev) : mean_(mean), stddev_(stddev) {}

  double operator()(std::mt19937_64& rng) {
    if (has_spare_) {
      has_spare_ = false;
      return mean_ + stddev_ * spare_;
    }
    double u1;
    do {
      u1 = uniform_real(rng);
    } while (u1 <= 0.0);
    const double u2 = uniform_real(rng);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return mean_ + stddev_ * radius * std::cos(angle);
  }

 private:
  double mean_;
  double stddev_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fusionrec

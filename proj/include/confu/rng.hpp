#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "confu/error.hpp"

namespace confu {

// splitmix64 finalizer; the building block of every random stream here.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) { return mix64(mix64(a) ^ b); }

inline double u64_to_unit(std::uint64_t x) {
  // 53 mantissa bits -> [0, 1)
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Sequential generator for parameter init, data shuffling, anchor draws.
// Box-Muller instead of std::normal_distribution so streams are identical
// across standard libraries.
class SplitMix {
 public:
  explicit SplitMix(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  double uniform() { return u64_to_unit(next_u64()); }

  // uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("SplitMix::below(0)");
    return next_u64() % n;
  }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// What a random draw inside the decode loop is for. Part of the stream key so
// baseline and confu runs can share randomness draw-by-draw.
enum class DrawPurpose : std::uint64_t {
  kProposal = 1,
  kAccept = 2,
  kResidual = 3,
  kBonus = 4,
  kPrefill = 5,
};

struct DrawKey {
  std::uint64_t round = 0;
  std::uint64_t node = 0;
  DrawPurpose purpose = DrawPurpose::kProposal;
  std::uint64_t counter = 0;
};

// Counter-based stream: a draw is a pure function of (seed, key).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  double uniform(const DrawKey& k) const {
    std::uint64_t x = mix64(seed_, k.round);
    x = mix64(x, k.node);
    x = mix64(x, static_cast<std::uint64_t>(k.purpose));
    x = mix64(x, k.counter);
    return u64_to_unit(x);
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

// Deterministic inverse-CDF draw: first index whose cumulative mass exceeds u.
// Zero-probability entries can never be returned.
inline std::size_t sample_index(std::span<const double> probs, double u) {
  double acc = 0.0;
  std::size_t last_positive = probs.size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_positive = i;
    acc += probs[i];
    if (u < acc) return i;
  }
  if (last_positive == probs.size()) throw NumericError("sample_index: no positive mass");
  return last_positive;  // u landed in rounding slack past the final entry
}

// Source of decode-time randomness. The sampling engine and the exhaustive
// enumerator both drive the same decision code through this interface.
class RandomSource {
 public:
  virtual ~RandomSource() = default;
  // Index distributed according to probs (assumed to sum to ~1).
  virtual std::size_t sample(std::span<const double> probs, const DrawKey& key) = 0;
  // True with probability p_true.
  virtual bool bernoulli(double p_true, const DrawKey& key) = 0;
};

class RngSource final : public RandomSource {
 public:
  explicit RngSource(CounterRng rng) : rng_(rng) {}

  std::size_t sample(std::span<const double> probs, const DrawKey& key) override {
    return sample_index(probs, rng_.uniform(key));
  }

  bool bernoulli(double p_true, const DrawKey& key) override {
    return rng_.uniform(key) < p_true;
  }

 private:
  CounterRng rng_;
};

}  // namespace confu

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace jstts {

// Seedable generator. Sub-streams are derived by hashing a parent seed with
// tags, so a step's randomness depends only on (seed, tags) and a resumed run
// replays exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  static uint64_t mix(uint64_t a, uint64_t b);
  static uint64_t hash(std::string_view s);
  static Rng derive(uint64_t seed, std::initializer_list<uint64_t> tags);

  uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n);
  // Box-Muller without caching so the engine alone is the full state.
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace jstts

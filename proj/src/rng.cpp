#include "jstts/rng.hpp"

#include <cmath>
#include <numbers>

namespace jstts {

uint64_t Rng::mix(uint64_t a, uint64_t b) {
  // splitmix64 finalizer over the combined words
  uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t Rng::hash(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Rng Rng::derive(uint64_t seed, std::initializer_list<uint64_t> tags) {
  uint64_t s = mix(seed, 0x5eed);
  for (uint64_t t : tags) s = mix(s, t);
  return Rng(s);
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 1) return 0;
  auto un = static_cast<uint64_t>(n);
  uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace jstts

#include "inn/rng.hpp"

namespace inn {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> words) {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (auto w : words) h = splitmix64(h ^ splitmix64(w));
  return h;
}

float Rng::uniform_open() {
  const auto bits = engine_() >> 40;  // 24 bits
  return (static_cast<float>(bits) + 0.5f) * (1.0f / 16777216.0f);
}

float Rng::uniform() {
  const auto bits = engine_() >> 40;
  return static_cast<float>(bits) * (1.0f / 16777216.0f);
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection sampling keeps the result exactly uniform and independent of
  // the standard library's distribution implementation.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return v % n;
}

float Rng::normal(float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  return dist(engine_);
}

}  // namespace inn

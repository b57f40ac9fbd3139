#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace inn {

// SplitMix64 finalizer folded over a list of words. Used to derive
// independent per-stream seeds from (master seed, stream ids...), so a
// stream's values never depend on which other streams were drawn first.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> words);

// Thin wrapper over std::mt19937_64 with the few draws the library needs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::initializer_list<std::uint64_t> words) : engine_(derive_seed(words)) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in the open interval (0,1); 24-bit resolution, exact in f32.
  float uniform_open();
  // Uniform in [0,1).
  float uniform();
  bool bernoulli(float p) { return uniform() < p; }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  float normal(float stddev);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace inn

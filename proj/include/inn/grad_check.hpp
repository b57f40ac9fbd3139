#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "inn/tape.hpp"
#include "inn/tensor.hpp"

namespace inn {

// A deterministic scalar function of one tensor, evaluated through a tape.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

// Activation pattern of the most recent evaluation of f (relu signs, pool
// argmaxes, ...). Coordinates whose +/- epsilon evaluations change the pattern
// straddle a kink and are skipped.
using PatternFn = std::function<std::vector<std::uint8_t>()>;

struct GradCheckOptions {
  float epsilon = 1e-3f;
  std::size_t max_coordinates = 48;
  std::uint64_t seed = 0;
  // The relative-error denominator is floored at this many finite-difference
  // resolutions, ulp(max |f(x +/- e)|) / 2e. 0 gives a pure relative error.
  float resolution_floor = 1000.0f;
  PatternFn pattern;
};

struct GradCheckReport {
  float max_relative_error = 0.0f;
  std::size_t coordinates_checked = 0;
  std::size_t coordinates_skipped = 0;
  std::size_t coordinates_floored = 0;  // denominator set by the floor
  std::size_t worst_coordinate = 0;
  float worst_analytic = 0.0f;
  float worst_numeric = 0.0f;
};

// Compares the tape gradient of f at `point` with central differences
// (f(x+e) - f(x-e)) / 2e on a seeded random coordinate subset. Relative error
// uses the denominator max(|analytic|, |numeric|, floor, 1e-8) where floor is
// resolution_floor finite-difference resolutions. Throws
// DeterminismError if two evaluations of f at `point` disagree bitwise.
GradCheckReport grad_check(const ScalarFn& f, const Tensor& point, const GradCheckOptions& options = {});

}  // namespace inn

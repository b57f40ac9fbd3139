#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "inn/grad_check.hpp"

namespace inn {

struct OpGradResult {
  std::string op;
  float worst_relative_error = 0.0f;
  std::size_t coordinates_checked = 0;
  std::size_t coordinates_skipped = 0;
  std::size_t coordinates_floored = 0;
  std::uint64_t worst_seed = 0;
  float worst_analytic = 0.0f;
  float worst_numeric = 0.0f;
};

// Finite-difference checks of every differentiable op and of the full
// SmallConvNet loss, each repeated for seeds first_seed .. first_seed+seeds-1.
// Inputs are drawn away from the relu and maxpool kinks.
std::vector<OpGradResult> run_grad_suite(std::size_t seeds, std::uint64_t first_seed = 1,
                                         const GradCheckOptions& base = {});

}  // namespace inn

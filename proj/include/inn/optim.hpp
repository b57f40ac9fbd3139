#pragma once

#include <span>
#include <vector>

#include "inn/tensor.hpp"

namespace inn {

// Heavy-ball SGD with L2 weight decay folded into the velocity:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - learning_rate * v
struct SgdState {
  float learning_rate = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  std::vector<std::vector<float>> velocity;

  SgdState() = default;
  SgdState(std::span<const Tensor> params, float learning_rate, float momentum, float weight_decay);
};

// Applies one update and clears every parameter's gradient. Throws
// ContractError if a parameter has no gradient or the velocity buffers do not
// match, NumericError if an updated parameter is not finite.
void sgd_momentum_step(std::span<Tensor> params, SgdState& state);

}  // namespace inn

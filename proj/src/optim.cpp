#include "inn/optim.hpp"

#include <string>

#include "inn/errors.hpp"

namespace inn {

SgdState::SgdState(std::span<const Tensor> params, float lr, float mom, float wd)
    : learning_rate(lr), momentum(mom), weight_decay(wd) {
  if (!(lr >= 0.0f)) throw ConfigError("learning rate must be non-negative");
  if (!(mom >= 0.0f && mom < 1.0f)) throw ConfigError("momentum must lie in [0,1)");
  if (!(wd >= 0.0f)) throw ConfigError("weight decay must be non-negative");
  velocity.reserve(params.size());
  for (const auto& p : params) velocity.emplace_back(p.numel(), 0.0f);
}

void sgd_momentum_step(std::span<Tensor> params, SgdState& state) {
  if (state.velocity.size() != params.size()) {
    throw ContractError("optimizer holds " + std::to_string(state.velocity.size()) + " velocity buffers for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.velocity[i].size() != params[i].numel()) {
      throw ContractError("velocity buffer " + std::to_string(i) + " does not match parameter shape " +
                          shape_str(params[i].shape()));
    }
    if (!params[i].has_grad()) {
      throw ContractError("parameter " + std::to_string(i) + " of shape " + shape_str(params[i].shape()) +
                          " has no gradient");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = params[i].grad();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j] + state.weight_decay * p[j];
      p[j] -= state.learning_rate * v[j];
    }
    check_finite(p, "sgd_momentum_step");
    params[i].clear_grad();
  }
}

}  // namespace inn

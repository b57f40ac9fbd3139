#include "inn/model.hpp"

#include <cmath>

#include "inn/errors.hpp"
#include "inn/ops.hpp"
#include "inn/rng.hpp"

namespace inn {

std::vector<std::pair<std::string, Shape>> SmallConvNet::parameter_shapes(const Architecture& a) {
  if (a.channels == 0 || a.height == 0 || a.width == 0 || a.classes == 0 || a.backgrounds == 0) {
    throw ConfigError("architecture dimensions must be positive");
  }
  if (a.height % 2 != 0 || a.width % 2 != 0) {
    throw ConfigError("input height and width must be even for the 2x2 pooling stage");
  }
  const std::size_t flat = kConv2Filters * (a.height / 2) * (a.width / 2);
  return {
      {"conv1.weight", {kConv1Filters, a.channels, 3, 3}},
      {"conv1.bias", {kConv1Filters}},
      {"conv2.weight", {kConv2Filters, kConv1Filters, 3, 3}},
      {"conv2.bias", {kConv2Filters}},
      {"fc1.weight", {flat, kHidden}},
      {"fc1.bias", {kHidden}},
      {"fc2.weight", {kHidden, a.logits()}},
      {"fc2.bias", {a.logits()}},
  };
}

SmallConvNet::SmallConvNet(const Architecture& arch, std::uint64_t seed) : arch_(arch) {
  Rng rng(seed);
  for (auto& [name, shape] : parameter_shapes(arch)) {
    Tensor t(shape, true);
    if (shape.size() > 1) {
      // fan-in: product of all but the output axis (axis 0 for conv, axis 1 for dense)
      const std::size_t fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
      const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
      for (auto& v : t.data()) v = rng.normal(stddev);
    }
    params_.push_back({name, t});
  }
}

SmallConvNet::SmallConvNet(const Architecture& arch, std::vector<NamedTensor> params) : arch_(arch) {
  const auto shapes = parameter_shapes(arch);
  if (params.size() != shapes.size()) {
    throw CheckpointError("architecture expects " + std::to_string(shapes.size()) + " tensors, found " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (params[i].name != shapes[i].first) {
      throw CheckpointError("tensor " + std::to_string(i) + " is '" + params[i].name + "', expected '" +
                            shapes[i].first + "'");
    }
    if (params[i].value.shape() != shapes[i].second) {
      throw CheckpointError("tensor '" + params[i].name + "' has shape " + shape_str(params[i].value.shape()) +
                            ", expected " + shape_str(shapes[i].second));
    }
  }
  params_ = std::move(params);
}

std::vector<Tensor> SmallConvNet::parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

std::size_t SmallConvNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

SmallConvNet SmallConvNet::copy(bool trainable) const {
  std::vector<NamedTensor> params;
  params.reserve(params_.size());
  for (const auto& p : params_) {
    Tensor t = p.value.clone();
    t.set_requires_grad(trainable);
    params.push_back({p.name, t});
  }
  return SmallConvNet(arch_, std::move(params));
}

void SmallConvNet::set_trainable(bool on) {
  for (auto& p : params_) p.value.set_requires_grad(on);
}

Tensor SmallConvNet::forward(Tape& tape, const Tensor& input) const {
  if (input.rank() != 4 || input.dim(1) != arch_.channels || input.dim(2) != arch_.height ||
      input.dim(3) != arch_.width) {
    throw DimensionError("SmallConvNet expects input [B," + std::to_string(arch_.channels) + "," +
                         std::to_string(arch_.height) + "," + std::to_string(arch_.width) + "], got " +
                         shape_str(input.shape()));
  }
  Tensor h = ops::relu(tape, ops::conv2d(tape, input, param(0), param(1), 1, 1));
  h = ops::relu(tape, ops::conv2d(tape, h, param(2), param(3), 1, 1));
  h = ops::flatten(tape, ops::maxpool2d(tape, h, 2));
  h = ops::relu(tape, ops::dense(tape, h, param(4), param(5)));
  return ops::dense(tape, h, param(6), param(7));
}

}  // namespace inn

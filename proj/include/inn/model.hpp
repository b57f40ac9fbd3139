#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "inn/tape.hpp"
#include "inn/tensor.hpp"

namespace inn {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Input geometry plus label space. The logit width is classes * backgrounds.
struct Architecture {
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t classes = 10;      // N, base classes
  std::size_t backgrounds = 1;   // K, composite slots per class

  std::size_t logits() const { return classes * backgrounds; }
  bool operator==(const Architecture&) const = default;
};

// conv(C->32, 3x3, pad 1) -> relu -> conv(32->64, 3x3, pad 1) -> relu ->
// maxpool(2) -> flatten -> dense(->128) -> relu -> dense(-> N*K).
class SmallConvNet {
 public:
  static constexpr std::size_t kConv1Filters = 32;
  static constexpr std::size_t kConv2Filters = 64;
  static constexpr std::size_t kHidden = 128;
  static constexpr const char* kArchName = "small-conv-net-v1";

  SmallConvNet() = default;
  // He-normal weights and zero biases drawn from `seed`.
  SmallConvNet(const Architecture& arch, std::uint64_t seed);
  // Adopts existing parameters; throws CheckpointError on any name or shape
  // mismatch with `arch`.
  SmallConvNet(const Architecture& arch, std::vector<NamedTensor> params);

  const Architecture& arch() const { return arch_; }
  std::vector<NamedTensor>& named_parameters() { return params_; }
  const std::vector<NamedTensor>& named_parameters() const { return params_; }
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  // Deep copy; requires_grad of the copy is set to `trainable`.
  SmallConvNet copy(bool trainable) const;
  void set_trainable(bool on);

  // input [B,C,H,W] -> logits [B, N*K]
  Tensor forward(Tape& tape, const Tensor& input) const;

  static std::vector<std::pair<std::string, Shape>> parameter_shapes(const Architecture& arch);

 private:
  const Tensor& param(std::size_t i) const { return params_[i].value; }

  Architecture arch_;
  std::vector<NamedTensor> params_;
};

}  // namespace inn

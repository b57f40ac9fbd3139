#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "inn/tape.hpp"
#include "inn/tensor.hpp"

namespace inn {

// A [C,H,W] pixel grid. Dataset images live in [0,1]; transformed images may
// exceed 1 after the background overlay.
class Image {
 public:
  Image() = default;
  explicit Image(Tensor pixels);
  static Image zeros(std::size_t c, std::size_t h, std::size_t w) { return Image(Tensor({c, h, w})); }

  const Tensor& pixels() const { return pixels_; }
  Tensor& pixels() { return pixels_; }
  std::size_t channels() const { return pixels_.dim(0); }
  std::size_t height() const { return pixels_.dim(1); }
  std::size_t width() const { return pixels_.dim(2); }
  const Shape& shape() const { return pixels_.shape(); }
  std::span<const float> values() const { return pixels_.data(); }
  std::span<float> values() { return pixels_.data(); }

 private:
  Tensor pixels_;
};

struct Background {
  Image pixels;
  int index = 0;
  std::string generator_name;
  std::uint64_t seed = 0;
};

struct InterferenceConfig {
  float alpha = 0.0f;  // background scale
  float beta = 0.0f;   // white-noise intensity
  float gamma = 0.0f;  // salt-and-pepper intensity
  int backgrounds = 1; // K
  std::uint64_t master_seed = 0;

  // Throws ConfigError on negative alpha/beta, gamma outside [0,1], or K < 1.
  void validate() const;
  bool is_identity() const { return alpha == 0.0f && beta == 0.0f && gamma == 0.0f; }
  bool operator==(const InterferenceConfig&) const = default;
};

// Which consumer a noise draw belongs to. Each stream is independent, so the
// defender's test-time draws never coincide with the attacker's or with the
// training draws for the same image.
enum class NoiseStream : std::uint64_t { train = 1, eval = 2, attack = 3 };

struct NoiseRealization {
  Tensor white;                      // [C,H,W], uniforms in (0,1)
  std::vector<std::uint8_t> sp_mask; // H*W, 1 = replaced
  std::vector<std::uint8_t> sp_value;// H*W, 1 = salt (1.0), 0 = pepper (0.0)
  int background_index = 0;
};

struct BlendedInput {
  Image pixels;
  NoiseRealization realization;
};

// Fully determined by (master_seed, stream, image_id, counter).
NoiseRealization draw_realization(const InterferenceConfig& cfg, const Shape& image_shape, NoiseStream stream,
                                  std::uint64_t image_id, std::uint64_t counter);

// (x + beta * white) / (1 + beta)
Image white_noise(const Image& x, float beta, const Tensor& white);

// Masked pixels replaced in every channel by 1 (salt) or 0 (pepper).
Image salt_pepper(const Image& x, float gamma, std::span<const std::uint8_t> sp_mask,
                  std::span<const std::uint8_t> sp_value);

// x' + alpha * y, not renormalized.
Image overlay(const Image& x_prime, const Background& bg, float alpha);

// white_noise -> salt_pepper -> overlay with backgrounds[realization.background_index].
BlendedInput apply_interference(const Image& x, const InterferenceConfig& cfg, std::span<const Background> backgrounds,
                                const NoiseRealization& realization);

// Batched, differentiable form of apply_interference for x[B,C,H,W]. The
// forward values are bit-identical to apply_interference per image. The
// gradient is scaled by 1/(1+beta), zero on salt-and-pepper pixels, and
// passes the overlay unchanged.
Tensor interfere(Tape& tape, const Tensor& batch, const InterferenceConfig& cfg, std::span<const Background> backgrounds,
                 std::span<const NoiseRealization> realizations);

// Composite label codec: base_class * K + background_index.
int encode_label(int base_class, int background_index, int backgrounds);
std::pair<int, int> decode_label(int composite, int backgrounds);

// Names of the built-in procedural recipes, in the order they are assigned to
// background indices 0..7. Index k >= 8 reuses recipe k % 8 with parameters
// varied by its seed.
const std::vector<std::string>& background_recipes();

std::vector<Background> generate_backgrounds(int count, std::size_t channels, std::size_t height, std::size_t width,
                                             std::uint64_t master_seed);

// Stacks images into a [B,C,H,W] tensor.
Tensor stack_images(std::span<const Image> images);
Image image_from_batch(const Tensor& batch, std::size_t index);

}  // namespace inn

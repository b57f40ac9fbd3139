#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "inn/interference.hpp"
#include "inn/model.hpp"

namespace inn {

// INN1: the gradient flows through the interference transform applied with a
// fixed attacker-side realization, against the composite label.
// INN2: the gradient is taken on the raw image against the marginal
// base-class objective -log sum_k p(c, k).
enum class AttackMode { inn1, inn2 };

std::string to_string(AttackMode mode);
AttackMode attack_mode_from_string(const std::string& s);

struct AttackConfig {
  float epsilon = 0.0f;            // L-inf radius in [0,1]
  std::size_t iterations = 50;     // T
  std::optional<float> step_size;  // defaults to 2.5 * epsilon / T
  AttackMode mode = AttackMode::inn1;
  std::size_t snapshot_index = 2;  // third fine-tuning epoch
  bool eot_resample = false;       // redraw the INN1 realization every iteration
  bool random_start = false;
  std::uint64_t seed = 0;

  float step() const;
  void validate() const;
  bool operator==(const AttackConfig&) const = default;
};

// The model an attacker differentiates, together with the transform that
// INN1 pushes the gradient through. An identity config with K = 1 describes
// an undefended classifier.
struct AttackTarget {
  const SmallConvNet* model = nullptr;
  InterferenceConfig interference;
  std::span<const Background> backgrounds;
};

struct AdversarialExample {
  Image original;
  Image perturbed;
  float epsilon = 0.0f;
  AttackMode mode = AttackMode::inn1;
  float achieved_loss = 0.0f;
};

struct AttackGradient {
  Tensor gradient;  // [B,C,H,W]
  std::vector<float> loss;  // per image
};

// Gradients of the per-image attack objective for a batch x[B,C,H,W].
// `realizations` must hold one entry per image for INN1 and is ignored for
// INN2. Each image's gradient is independent of the rest of the batch.
AttackGradient attack_gradient(const Tensor& batch, std::span<const int> base_labels, const AttackTarget& target,
                               AttackMode mode, std::span<const NoiseRealization> realizations);

// Loss oracle for the sign-gradient iteration: per-image losses and
// gradients at `batch`. `iteration` is the step index, used to redraw the
// INN1 realization under EOT.
using ObjectiveFn = std::function<AttackGradient(const Tensor& batch, std::size_t iteration)>;

struct SignAttackResult {
  Tensor adversarial;
  std::vector<float> loss;  // objective at the final iterate
};

// Iterates x <- clip(clip(x + step * sign(grad), x0 +- epsilon), 0, 1) from
// `start`, `iterations` times. `single_step` instead sets x0 + epsilon * sign
// (FGSM). sign(0) = 0.
SignAttackResult sign_attack(const Tensor& x0, const Tensor& start, const ObjectiveFn& objective, float epsilon,
                             float step, std::size_t iterations, bool single_step);

// The attacker's own realization for an image (independent of training and
// defender draws).
NoiseRealization attacker_realization(const AttackTarget& target, const AttackConfig& cfg, const Shape& shape,
                                      std::uint64_t image_id, std::uint64_t iteration);

AdversarialExample fgsm(const Image& x, int base_label, std::uint64_t image_id, const AttackTarget& target,
                        const AttackConfig& cfg);
AdversarialExample pgd(const Image& x, int base_label, std::uint64_t image_id, const AttackTarget& target,
                       const AttackConfig& cfg);

// PGD over many images, processed in minibatches and spread over up to
// `threads` workers. The output is identical for any batch size or thread
// count.
std::vector<AdversarialExample> pgd_many(std::span<const Image> images, std::span<const int> base_labels,
                                         std::span<const std::uint64_t> image_ids, const AttackTarget& target,
                                         const AttackConfig& cfg, std::size_t threads = 1,
                                         std::size_t batch_size = 32);

// Adversarial set file ("INNA"), little-endian:
//   magic "INNA" | u32 version (=1) | f32 epsilon | u32 T | u32 mode
//   (0 = INN1, 1 = INN2) | u32 snapshot index | u64 seed | u32 count |
//   u32 C | u32 H | u32 W | count x (u32 image id, C*H*W raw f32 pixels).
struct AdversarialSet {
  static constexpr std::uint32_t kVersion = 1;
  float epsilon = 0.0f;
  std::uint32_t iterations = 0;
  AttackMode mode = AttackMode::inn1;
  std::uint32_t snapshot_index = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> ids;
  std::vector<Image> images;
};

std::vector<std::uint8_t> encode_adversarial_set(const AdversarialSet& set);
AdversarialSet decode_adversarial_set(std::span<const std::uint8_t> bytes);

}  // namespace inn

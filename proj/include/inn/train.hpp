#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "inn/checkpoint.hpp"
#include "inn/dataset.hpp"
#include "inn/interference.hpp"
#include "inn/model.hpp"

namespace inn {

struct TrainConfig {
  std::size_t batch_size = 128;  // 512 in the ImageNet setting
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  float learning_rate = 0.01f;
  std::size_t epochs = 4;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct TrainResult {
  SmallConvNet model;
  std::vector<float> epoch_loss;  // mean minibatch loss per epoch
};

// Clean training of a fresh SmallConvNet with `classes` logits (K = 1, no
// transform). Throws TrainingError naming the epoch and step on divergence.
TrainResult pretrain(const Dataset& data, const TrainConfig& cfg, std::size_t classes);

// Widens the final layer from N to N*K logits: composite (c,k) starts from
// the pretrained output row for c plus N(0, jitter_std) noise drawn from
// `seed`. All other layers are copied.
SmallConvNet transfer_expand(const SmallConvNet& pretrained, std::size_t classes, std::size_t backgrounds,
                             std::uint64_t seed, float jitter_std = 0.01f);

struct SnapshotMeta {
  std::size_t classes = 0;
  std::size_t backgrounds = 1;
  InterferenceConfig interference;
  TrainConfig train;
  std::string dataset_id;
};

// One checkpoint per fine-tuning epoch, used together for soft voting.
struct SnapshotSet {
  std::vector<SmallConvNet> snapshots;
  SnapshotMeta meta;

  std::size_t size() const { return snapshots.size(); }
  bool empty() const { return snapshots.empty(); }
  // Non-empty, shared architecture matching meta (N, K).
  void validate() const;
};

struct FinetuneResult {
  SnapshotSet snapshots;
  std::vector<float> epoch_loss;
  std::vector<std::size_t> transforms_per_epoch;
};

// Fine-tunes on interference-transformed inputs. Every epoch draws one fresh
// noise realization per training image and trains against the composite label
// encode_label(y, background_index, K); the training set is never enlarged.
FinetuneResult finetune_inn(const SmallConvNet& model, const Dataset& data, const InterferenceConfig& icfg,
                            const TrainConfig& tcfg, std::span<const Background> backgrounds);

// Mean composite cross-entropy over `data` with the realizations training
// would use in epoch `epoch` (0-based).
float mean_training_loss(const SmallConvNet& model, const Dataset& data, const InterferenceConfig& icfg,
                         std::span<const Background> backgrounds, std::size_t epoch);

// Fraction of `data` whose argmax logit matches the label (no transform, K = 1).
float plain_accuracy(const SmallConvNet& model, const Dataset& data);

// Checkpoint conversion. Metadata always carries arch, N, K, alpha, beta,
// gamma, seed and epoch, plus the input geometry and training settings.
Checkpoint to_checkpoint(const SmallConvNet& model, const SnapshotMeta& meta, std::size_t epoch);
SmallConvNet model_from_checkpoint(const Checkpoint& ckpt);
SnapshotMeta meta_from_checkpoint(const Checkpoint& ckpt);
SnapshotSet snapshots_from_checkpoints(std::span<const Checkpoint> ckpts);

}  // namespace inn

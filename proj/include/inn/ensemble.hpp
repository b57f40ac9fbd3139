#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "inn/attacks.hpp"
#include "inn/interference.hpp"
#include "inn/train.hpp"

namespace inn {

// Softmax over the N*K composite label space.
struct ClassDistribution {
  std::vector<float> probs;  // composite index c*K + k
  int classes = 0;           // N
  int backgrounds = 1;       // K

  // P(c) = sum_k P(c, k), summed in k order.
  std::vector<float> base_probabilities() const;
  // Argmax of base_probabilities, smallest index on exact ties.
  int base_argmax() const;
};

// Smallest index holding the maximum.
int argmax_first(std::span<const float> values);

struct Prediction {
  int base_class = 0;
  float max_probability = 0.0f;  // marginal probability of base_class
  ClassDistribution distribution;
};

// Defended inference for one image: one defender realization (stream eval,
// master seed `seed`, counter 0) produces a blended input that every snapshot
// classifies; their softmax outputs are averaged with equal weight and
// marginalized over backgrounds. Throws ConfigError when icfg disagrees with
// the snapshot metadata.
Prediction defended_predict(const Image& x, std::uint64_t image_id, const SnapshotSet& snapshots,
                            const InterferenceConfig& icfg, std::span<const Background> backgrounds,
                            std::uint64_t seed);

// Batched form; entry i equals defended_predict(images[i], ids[i], ...).
std::vector<Prediction> defended_predict_many(std::span<const Image> images, std::span<const std::uint64_t> image_ids,
                                              const SnapshotSet& snapshots, const InterferenceConfig& icfg,
                                              std::span<const Background> backgrounds, std::uint64_t seed,
                                              std::size_t threads = 1, std::size_t batch_size = 64);

// A snapshot set holding one model with the identity transform and K = 1,
// i.e. an undefended classifier expressed in ensemble terms.
SnapshotSet undefended_ensemble(const SmallConvNet& model);
InterferenceConfig undefended_interference();
// The single all-zero background that goes with undefended_interference().
std::vector<Background> undefended_backgrounds(const Shape& image_shape);

struct EvalRecord {
  std::uint64_t id = 0;
  int true_label = 0;
  int predicted = 0;
  float max_probability = 0.0f;
};

struct EvalResult {
  float accuracy = 0.0f;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<EvalRecord> records;
};

// Top-1 base-class accuracy. Throws LabelError for a missing or out-of-range
// label and ContractError for an empty input.
EvalResult evaluate(std::span<const Image> images, std::span<const int> labels, std::span<const std::uint64_t> image_ids,
                    const SnapshotSet& snapshots, const InterferenceConfig& icfg,
                    std::span<const Background> backgrounds, std::uint64_t seed, std::size_t threads = 1);

// Line-delimited `id,true,pred,maxprob` records.
std::string render_eval_log(const EvalResult& result);

enum class CurveMode { inn1, inn2, undefended };
std::string to_string(CurveMode mode);
CurveMode curve_mode_from_string(const std::string& s);

struct CurveRow {
  float epsilon = 0.0f;
  CurveMode mode = CurveMode::inn1;
  float accuracy = 0.0f;
  std::size_t n_images = 0;
  std::uint64_t seed = 0;
};

struct RobustnessCurve {
  std::vector<CurveRow> rows;  // sorted by (mode, epsilon)

  // Header `epsilon,mode,top1_base_accuracy,n_images,seed`, 6-decimal floats.
  std::string to_csv() const;
  const CurveRow* find(CurveMode mode, float epsilon) const;
};

struct CurveInputs {
  std::span<const Image> images;
  std::span<const int> labels;
  std::span<const std::uint64_t> image_ids;
  const SnapshotSet* defended = nullptr;  // needed for INN1 / INN2 rows
  InterferenceConfig interference;
  std::span<const Background> backgrounds;
  const SmallConvNet* undefended = nullptr;  // needed for undefended rows
};

// Called once per attacked (epsilon, mode) with the generated set and the
// evaluation of it.
using CurveObserver = std::function<void(const CurveRow&, const AdversarialSet&, const EvalResult&)>;

// For every (epsilon, mode): PGD against the attack snapshot (or the
// undefended model), then defended evaluation. epsilon = 0 evaluates the clean
// images. `attack_template` supplies T, step rule, snapshot index, EOT and the
// attacker seed; its epsilon and mode are overwritten.
RobustnessCurve robustness_curve(std::span<const float> epsilons, std::span<const CurveMode> modes,
                                 const CurveInputs& inputs, const AttackConfig& attack_template, std::uint64_t seed,
                                 std::size_t threads = 1, const CurveObserver& observer = {});

}  // namespace inn

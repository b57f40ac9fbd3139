#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "inn/attacks.hpp"
#include "inn/ensemble.hpp"
#include "inn/interference.hpp"
#include "inn/train.hpp"

namespace inn {

struct DatasetSource {
  // "synth-digits" (generated, path unused), "idx" (directory holding the
  // four MNIST-named IDX files) or "cifar" (directory holding data_batch_*.bin
  // and test_batch.bin).
  std::string format = "synth-digits";
  std::string path;
  std::size_t train_count = 30000;  // 0 keeps every training image
  std::size_t test_count = 2000;

  bool operator==(const DatasetSource&) const = default;
};

struct ExperimentConfig {
  std::optional<std::string> preset;
  DatasetSource dataset;
  std::uint64_t seed = 1;                     // master seed; INN_SEED overrides it
  std::optional<std::uint64_t> pretrain_seed; // defaults to the master seed
  InterferenceConfig interference;            // master_seed mirrors `seed`
  TrainConfig pretrain{128, 0.9f, 5e-4f, 0.01f, 2, 0};
  TrainConfig finetune{128, 0.9f, 5e-4f, 0.01f, 4, 0};
  AttackConfig attack;                        // epsilon and mode come from the grid
  std::vector<float> epsilons = {0.0f, 2.0f / 255.0f, 4.0f / 255.0f, 8.0f / 255.0f, 16.0f / 255.0f};
  std::vector<CurveMode> modes = {CurveMode::inn1, CurveMode::inn2, CurveMode::undefended};
  std::size_t eval_count = 1000;  // seeded evaluation subset of the test split
  std::string out = "out";

  // Fills in seeds derived from the master seed and checks every field.
  void finalize();
  void validate() const;
  std::uint64_t effective_pretrain_seed() const { return pretrain_seed.value_or(seed); }
  bool operator==(const ExperimentConfig&) const = default;
};

// Interference settings of a named preset (fig3-blue, fig3-green, fig3-red,
// fig3-purple). Throws ConfigError for an unknown name.
InterferenceConfig preset_interference(const std::string& name);
const std::vector<std::string>& preset_names();
void apply_preset(ExperimentConfig& cfg, const std::string& name);

// Flat `key = value` lines, `#` starts a comment. A `preset` line is applied
// before any other key regardless of its position.
ExperimentConfig parse_config(std::string_view text);
std::string render_config(const ExperimentConfig& cfg);

// "k/255", a bare integer k (also read as k/255) or a decimal with a point or
// exponent ("0.3", "1e-2"). The result must lie in [0,1].
float parse_epsilon(std::string_view text);
std::vector<float> parse_epsilon_list(std::string_view text);
// Shortest decimal that parses back to the same float.
std::string format_epsilon(float epsilon);

// INN_SEED from the environment, if set. Throws ConfigError when malformed.
std::optional<std::uint64_t> seed_from_env();

}  // namespace inn

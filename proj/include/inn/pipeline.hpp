#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "inn/config.hpp"
#include "inn/dataset.hpp"
#include "inn/ensemble.hpp"
#include "inn/train.hpp"

// File-level workflow shared by the command-line tool and the acceptance
// suite. Every file is written atomically.
namespace inn::pipeline {

using Log = std::function<void(const std::string&)>;

struct Splits {
  Dataset train;
  Dataset test;
};

// The synthetic digits use fixed generator seeds, so the data does not depend
// on the experiment's master seed. Other formats keep a seeded subset of
// train_count / test_count images when those are non-zero.
Splits load_dataset(const DatasetSource& source);

// Seeded evaluation subset of the test split; ids are test-split indices.
struct EvalSubset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;
};
EvalSubset eval_subset(const Dataset& test, std::size_t count, std::uint64_t seed);

std::filesystem::path pretrained_path(const std::filesystem::path& out);
std::filesystem::path snapshot_path(const std::filesystem::path& out, std::size_t epoch);  // 1-based
std::filesystem::path adversarial_path(const std::filesystem::path& out, float epsilon, CurveMode mode);
std::filesystem::path curve_path(const std::filesystem::path& out);
std::filesystem::path eval_log_path(const std::filesystem::path& out, const std::string& tag);
std::string epsilon_tag(float epsilon);

std::vector<Background> backgrounds_for(const ExperimentConfig& cfg, const Shape& image_shape);
Checkpoint backgrounds_checkpoint(std::span<const Background> backgrounds, std::uint64_t seed);

SmallConvNet run_pretrain(const ExperimentConfig& cfg, const Dataset& train, const Log& log = {});
SmallConvNet load_pretrained(const std::filesystem::path& path);

SnapshotSet run_finetune(const ExperimentConfig& cfg, const SmallConvNet& pretrained, const Dataset& train,
                         const Log& log = {});
SnapshotSet load_snapshots(const std::filesystem::path& out, std::size_t epochs);

struct CurveRun {
  RobustnessCurve curve;
  std::optional<SmallConvNet> pretrained;
  std::optional<SnapshotSet> snapshots;
};

// pretrain (unless `pretrained` is given) -> transfer -> fine-tune -> attack
// -> evaluate, writing snapshots, adversarial sets, logs and the CSV.
CurveRun run_curve(const ExperimentConfig& cfg, std::size_t threads, const SmallConvNet* pretrained = nullptr,
                   const Log& log = {});

}  // namespace inn::pipeline

#include "inn/pipeline.hpp"

#include <algorithm>
#include <cstdio>

#include "inn/errors.hpp"
#include "inn/io.hpp"
#include "inn/rng.hpp"

namespace inn::pipeline {

namespace {

enum : std::uint64_t {
  kSynthTrainSeed = 0x5e7d1,
  kSynthTestSeed = 0x5e7d2,
  kTagSubset = 0xe5a1,
  kTagTrainSubset = 0x7a1,
  kTagTestSubset = 0x7e5,
};

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

Dataset keep(const Dataset& d, std::size_t count, std::uint64_t tag) {
  if (count == 0 || count >= d.size()) return d;
  return d.sample(count, tag);
}

SnapshotMeta pretrain_meta(const ExperimentConfig& cfg, const Dataset& train) {
  return SnapshotMeta{static_cast<std::size_t>(train.classes), 1, InterferenceConfig{}, cfg.pretrain, train.id};
}

}  // namespace

Splits load_dataset(const DatasetSource& source) {
  Splits s;
  const std::filesystem::path dir = source.path;
  if (source.format == "synth-digits") {
    s.train = make_synthetic_digits(source.train_count, kSynthTrainSeed, "train");
    s.test = make_synthetic_digits(source.test_count, kSynthTestSeed, "test");
    s.train.id = "synth-digits-train-" + std::to_string(source.train_count);
    s.test.id = "synth-digits-test-" + std::to_string(source.test_count);
    return s;
  }
  if (source.format == "idx") {
    s.train = read_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    s.test = read_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  } else if (source.format == "cifar") {
    std::vector<std::filesystem::path> batches;
    for (int i = 1; i <= 5; ++i) {
      const auto p = dir / ("data_batch_" + std::to_string(i) + ".bin");
      if (std::filesystem::exists(p)) batches.push_back(p);
    }
    if (batches.empty()) throw ParseError("no data_batch_*.bin files in " + dir.string());
    const std::filesystem::path test_batch[] = {dir / "test_batch.bin"};
    s.train = read_cifar_binary(batches);
    s.test = read_cifar_binary(test_batch);
  } else {
    throw ConfigError("unknown dataset format '" + source.format + "'");
  }
  s.train.split = "train";
  s.test.split = "test";
  const int classes = std::max(s.train.classes, s.test.classes);
  s.train.classes = s.test.classes = classes;
  s.train = keep(s.train, source.train_count, kTagTrainSubset);
  s.test = keep(s.test, source.test_count, kTagTestSubset);
  s.train.id = source.format + ":" + dir.filename().string() + ":train-" + std::to_string(s.train.size());
  s.test.id = source.format + ":" + dir.filename().string() + ":test-" + std::to_string(s.test.size());
  s.train.validate();
  s.test.validate();
  return s;
}

EvalSubset eval_subset(const Dataset& test, std::size_t count, std::uint64_t seed) {
  if (test.empty()) throw ContractError("test split is empty");
  std::vector<std::size_t> idx(test.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (count < test.size()) {
    Rng rng({seed, kTagSubset});
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
  }
  EvalSubset s;
  for (std::size_t i : idx) {
    s.images.push_back(test.images[i]);
    s.labels.push_back(test.labels[i]);
    s.ids.push_back(i);
  }
  return s;
}

std::filesystem::path pretrained_path(const std::filesystem::path& out) { return out / "pretrained.innc"; }

std::filesystem::path snapshot_path(const std::filesystem::path& out, std::size_t epoch) {
  return out / "snapshots" / ("epoch" + std::to_string(epoch) + ".innc");
}

std::string epsilon_tag(float epsilon) { return fmt("eps%.6f", static_cast<double>(epsilon)); }

std::filesystem::path adversarial_path(const std::filesystem::path& out, float epsilon, CurveMode mode) {
  return out / "adv" / (epsilon_tag(epsilon) + "_" + to_string(mode) + ".inna");
}

std::filesystem::path curve_path(const std::filesystem::path& out) { return out / "curves" / "robustness.csv"; }

std::filesystem::path eval_log_path(const std::filesystem::path& out, const std::string& tag) {
  return out / "logs" / ("eval_" + tag + ".txt");
}

std::vector<Background> backgrounds_for(const ExperimentConfig& cfg, const Shape& image_shape) {
  return generate_backgrounds(cfg.interference.backgrounds, image_shape.at(0), image_shape.at(1), image_shape.at(2),
                              cfg.seed);
}

Checkpoint backgrounds_checkpoint(std::span<const Background> backgrounds, std::uint64_t seed) {
  Checkpoint ck;
  ck.set("kind", "backgrounds");
  ck.set("K", std::to_string(backgrounds.size()));
  ck.set("seed", std::to_string(seed));
  for (const auto& bg : backgrounds) {
    ck.set("background." + std::to_string(bg.index), bg.generator_name);
    ck.tensors.push_back({"background." + std::to_string(bg.index), bg.pixels.pixels().clone()});
  }
  return ck;
}

SmallConvNet run_pretrain(const ExperimentConfig& cfg, const Dataset& train, const Log& log) {
  say(log, "pretraining on " + std::to_string(train.size()) + " images for " + std::to_string(cfg.pretrain.epochs) +
               " epochs");
  TrainResult r = pretrain(train, cfg.pretrain, static_cast<std::size_t>(train.classes));
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
    say(log, "  epoch " + std::to_string(e + 1) + " loss " + fmt("%.4f", r.epoch_loss[e]));
  }
  save_checkpoint(pretrained_path(cfg.out), to_checkpoint(r.model, pretrain_meta(cfg, train), cfg.pretrain.epochs));
  return std::move(r.model);
}

SmallConvNet load_pretrained(const std::filesystem::path& path) {
  SmallConvNet m = model_from_checkpoint(load_checkpoint(path));
  if (m.arch().backgrounds != 1) throw CheckpointError(path.string() + " is not a K=1 pretrained model");
  return m;
}

SnapshotSet run_finetune(const ExperimentConfig& cfg, const SmallConvNet& pretrained, const Dataset& train,
                         const Log& log) {
  const auto bgs = backgrounds_for(cfg, train.image_shape());
  const SmallConvNet expanded = transfer_expand(pretrained, static_cast<std::size_t>(train.classes),
                                                static_cast<std::size_t>(cfg.interference.backgrounds), cfg.seed);
  say(log, "fine-tuning K=" + std::to_string(cfg.interference.backgrounds) + " on " + std::to_string(train.size()) +
               " images for " + std::to_string(cfg.finetune.epochs) + " epochs");
  FinetuneResult r = finetune_inn(expanded, train, cfg.interference, cfg.finetune, bgs);
  for (std::size_t e = 0; e < r.snapshots.size(); ++e) {
    say(log, "  epoch " + std::to_string(e + 1) + " loss " + fmt("%.4f", r.epoch_loss[e]));
    save_checkpoint(snapshot_path(cfg.out, e + 1), to_checkpoint(r.snapshots.snapshots[e], r.snapshots.meta, e + 1));
  }
  return std::move(r.snapshots);
}

SnapshotSet load_snapshots(const std::filesystem::path& out, std::size_t epochs) {
  std::vector<Checkpoint> ckpts;
  for (std::size_t e = 1; e <= epochs; ++e) ckpts.push_back(load_checkpoint(snapshot_path(out, e)));
  return snapshots_from_checkpoints(ckpts);
}

CurveRun run_curve(const ExperimentConfig& cfg, std::size_t threads, const SmallConvNet* pretrained, const Log& log) {
  cfg.validate();
  const Splits data = load_dataset(cfg.dataset);
  CurveRun run;
  if (pretrained) {
    run.pretrained = pretrained->copy(false);
  } else {
    run.pretrained = run_pretrain(cfg, data.train, log);
  }
  const bool defended = std::any_of(cfg.modes.begin(), cfg.modes.end(), [](CurveMode m) { return m != CurveMode::undefended; });
  const auto bgs = backgrounds_for(cfg, data.train.image_shape());
  if (defended) run.snapshots = run_finetune(cfg, *run.pretrained, data.train, log);

  const EvalSubset subset = eval_subset(data.test, cfg.eval_count, cfg.seed);
  CurveInputs in{subset.images, subset.labels, subset.ids, run.snapshots ? &*run.snapshots : nullptr,
                 cfg.interference, bgs, &*run.pretrained};
  const std::filesystem::path out = cfg.out;
  auto observer = [&](const CurveRow& row, const AdversarialSet& set, const EvalResult& result) {
    io::write_file_atomic(adversarial_path(out, row.epsilon, row.mode), encode_adversarial_set(set));
    io::write_text_atomic(eval_log_path(out, epsilon_tag(row.epsilon) + "_" + to_string(row.mode)),
                          render_eval_log(result));
    say(log, "  " + to_string(row.mode) + " " + epsilon_tag(row.epsilon) + " accuracy " +
                 fmt("%.4f", row.accuracy));
  };
  say(log, "attacking " + std::to_string(subset.images.size()) + " images with PGD-" +
               std::to_string(cfg.attack.iterations));
  run.curve = robustness_curve(cfg.epsilons, cfg.modes, in, cfg.attack, cfg.seed, threads, observer);
  for (const auto& row : run.curve.rows) {
    if (row.epsilon == 0.0f) say(log, "  " + to_string(row.mode) + " clean accuracy " + fmt("%.4f", row.accuracy));
  }
  io::write_text_atomic(curve_path(out), run.curve.to_csv());
  io::write_text_atomic(out / "config.txt", render_config(cfg));
  return run;
}

}  // namespace inn::pipeline

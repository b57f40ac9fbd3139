#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "inn/config.hpp"
#include "inn/errors.hpp"
#include "inn/grad_suite.hpp"
#include "inn/io.hpp"
#include "inn/pipeline.hpp"

namespace fs = std::filesystem;
using namespace inn;

namespace {

// Flags shared by the pipeline subcommands; each overrides the config file.
struct CommonFlags {
  std::string config_file;
  std::optional<std::string> preset;
  std::optional<std::string> dataset;
  std::optional<std::string> format;
  std::optional<std::size_t> train_count;
  std::optional<std::size_t> test_count;
  std::optional<std::size_t> eval_count;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> eps;
  std::optional<std::string> modes;
  std::optional<std::size_t> iterations;
  std::optional<std::size_t> pretrain_epochs;
  std::optional<std::size_t> finetune_epochs;
  std::optional<float> finetune_lr;
  std::optional<std::string> pretrained;
  bool eot = false;
  std::size_t threads = 1;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_file, "Config file of key = value lines")->check(CLI::ExistingFile);
  app->add_option("--preset", f.preset, "Interference preset (fig3-blue, fig3-green, fig3-red, fig3-purple)");
  app->add_option("--dataset", f.dataset, "Dataset directory");
  app->add_option("--format", f.format, "Dataset format: synth-digits, idx or cifar");
  app->add_option("--train-count", f.train_count, "Training images to keep (0 = all)");
  app->add_option("--test-count", f.test_count, "Test images to keep (0 = all)");
  app->add_option("--eval-count", f.eval_count, "Size of the seeded evaluation subset");
  app->add_option("--seed", f.seed, "Master seed (overrides INN_SEED)");
  app->add_option("--out", f.out, "Output directory");
  app->add_option("--eps", f.eps, "Epsilon grid, e.g. 0,2,4,8,16 (units of 1/255) or 0.1,0.3");
  app->add_option("--modes", f.modes, "Comma-separated modes: INN1, INN2, undefended");
  app->add_option("--iterations", f.iterations, "PGD iterations T");
  app->add_option("--pretrain-epochs", f.pretrain_epochs, "Clean pretraining epochs");
  app->add_option("--finetune-epochs", f.finetune_epochs, "Fine-tuning epochs (one snapshot each)");
  app->add_option("--finetune-lr", f.finetune_lr, "Fine-tuning learning rate");
  app->add_option("--pretrained", f.pretrained, "Existing pretrained checkpoint to reuse");
  app->add_flag("--eot", f.eot, "Redraw the INN1 attack realization every iteration");
  app->add_option("--threads", f.threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
}

ExperimentConfig build_config(const CommonFlags& f) {
  ExperimentConfig cfg;
  if (!f.config_file.empty()) {
    const auto bytes = io::read_file(f.config_file);
    cfg = parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  }
  if (f.preset) apply_preset(cfg, *f.preset);
  if (f.dataset) cfg.dataset.path = *f.dataset;
  if (f.format) cfg.dataset.format = *f.format;
  if (f.dataset && !f.format && cfg.dataset.format == "synth-digits") cfg.dataset.format = "idx";
  if (f.train_count) cfg.dataset.train_count = *f.train_count;
  if (f.test_count) cfg.dataset.test_count = *f.test_count;
  if (f.eval_count) cfg.eval_count = *f.eval_count;
  if (auto env = seed_from_env()) cfg.seed = *env;
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.out = *f.out;
  if (f.eps) cfg.epsilons = parse_epsilon_list(*f.eps);
  if (f.modes) {
    cfg.modes.clear();
    std::string m = *f.modes;
    std::size_t start = 0;
    while (start <= m.size()) {
      const auto comma = m.find(',', start);
      cfg.modes.push_back(curve_mode_from_string(m.substr(start, comma == std::string::npos ? comma : comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  if (f.iterations) cfg.attack.iterations = *f.iterations;
  if (f.pretrain_epochs) cfg.pretrain.epochs = *f.pretrain_epochs;
  if (f.finetune_epochs) cfg.finetune.epochs = *f.finetune_epochs;
  if (f.finetune_lr) cfg.finetune.learning_rate = *f.finetune_lr;
  if (f.eot) cfg.attack.eot_resample = true;
  cfg.finalize();
  return cfg;
}

void log_line(const std::string& s) { std::cout << s << std::endl; }

SmallConvNet pretrained_for(const CommonFlags& f, const ExperimentConfig& cfg) {
  return pipeline::load_pretrained(f.pretrained ? fs::path(*f.pretrained) : pipeline::pretrained_path(cfg.out));
}

int cmd_gen_dataset(const CommonFlags& f) {
  const ExperimentConfig cfg = build_config(f);
  DatasetSource src = cfg.dataset;
  src.format = "synth-digits";
  const auto splits = pipeline::load_dataset(src);
  const fs::path out = cfg.out;
  io::write_file_atomic(out / "train-images-idx3-ubyte", encode_idx_images(splits.train));
  io::write_file_atomic(out / "train-labels-idx1-ubyte", encode_idx_labels(splits.train));
  io::write_file_atomic(out / "t10k-images-idx3-ubyte", encode_idx_images(splits.test));
  io::write_file_atomic(out / "t10k-labels-idx1-ubyte", encode_idx_labels(splits.test));
  std::cout << "wrote " << splits.train.size() << " training and " << splits.test.size() << " test images to "
            << out.string() << "\n";
  return 0;
}

int cmd_pretrain(const CommonFlags& f) {
  const ExperimentConfig cfg = build_config(f);
  const auto splits = pipeline::load_dataset(cfg.dataset);
  const SmallConvNet model = pipeline::run_pretrain(cfg, splits.train, log_line);
  std::printf("clean test accuracy %.4f\nwrote %s\n", static_cast<double>(plain_accuracy(model, splits.test)),
              pipeline::pretrained_path(cfg.out).string().c_str());
  return 0;
}

int cmd_finetune(const CommonFlags& f) {
  const ExperimentConfig cfg = build_config(f);
  const auto splits = pipeline::load_dataset(cfg.dataset);
  const SmallConvNet pre = pretrained_for(f, cfg);
  const SnapshotSet set = pipeline::run_finetune(cfg, pre, splits.train, log_line);
  for (std::size_t e = 1; e <= set.size(); ++e) std::cout << "wrote " << pipeline::snapshot_path(cfg.out, e).string() << "\n";
  return 0;
}

struct Models {
  std::optional<SmallConvNet> pretrained;
  std::optional<SnapshotSet> snapshots;
  std::vector<Background> backgrounds;
};

Models load_models(const CommonFlags& f, const ExperimentConfig& cfg, const Shape& shape) {
  Models m;
  m.backgrounds = pipeline::backgrounds_for(cfg, shape);
  for (auto mode : cfg.modes) {
    if (mode == CurveMode::undefended && !m.pretrained) m.pretrained = pretrained_for(f, cfg);
    if (mode != CurveMode::undefended && !m.snapshots) {
      m.snapshots = pipeline::load_snapshots(cfg.out, cfg.finetune.epochs);
      const auto& meta = m.snapshots->meta.interference;
      if (meta.alpha != cfg.interference.alpha || meta.beta != cfg.interference.beta ||
          meta.gamma != cfg.interference.gamma || meta.backgrounds != cfg.interference.backgrounds ||
          meta.master_seed != cfg.interference.master_seed) {
        throw ConfigError("snapshots in " + cfg.out + " were fine-tuned with a different interference config or seed");
      }
    }
  }
  return m;
}

int cmd_attack(const CommonFlags& f) {
  const ExperimentConfig cfg = build_config(f);
  const auto splits = pipeline::load_dataset(cfg.dataset);
  const auto subset = pipeline::eval_subset(splits.test, cfg.eval_count, cfg.seed);
  const Models m = load_models(f, cfg, splits.test.image_shape());
  for (auto mode : cfg.modes) {
    if (mode == CurveMode::undefended) continue;
    if (cfg.attack.snapshot_index >= m.snapshots->size()) throw ConfigError("attack snapshot index out of range");
  }
  const auto plain_bgs = undefended_backgrounds(splits.test.image_shape());
  for (auto mode : cfg.modes) {
    for (float eps : cfg.epsilons) {
      AttackConfig acfg = cfg.attack;
      acfg.epsilon = eps;
      acfg.mode = mode == CurveMode::inn1 ? AttackMode::inn1 : AttackMode::inn2;
      AttackTarget target = mode == CurveMode::undefended
                                ? AttackTarget{&*m.pretrained, undefended_interference(), plain_bgs}
                                : AttackTarget{&m.snapshots->snapshots[acfg.snapshot_index], cfg.interference,
                                               m.backgrounds};
      const auto adv = pgd_many(subset.images, subset.labels, subset.ids, target, acfg, f.threads);
      AdversarialSet set;
      set.epsilon = eps;
      set.iterations = static_cast<std::uint32_t>(acfg.iterations);
      set.mode = acfg.mode;
      set.snapshot_index = mode == CurveMode::undefended ? 0 : static_cast<std::uint32_t>(acfg.snapshot_index);
      set.seed = acfg.seed;
      for (std::size_t i = 0; i < adv.size(); ++i) {
        set.ids.push_back(static_cast<std::uint32_t>(subset.ids[i]));
        set.images.push_back(adv[i].perturbed);
      }
      const auto path = pipeline::adversarial_path(cfg.out, eps, mode);
      io::write_file_atomic(path, encode_adversarial_set(set));
      std::cout << "wrote " << path.string() << "\n";
    }
  }
  return 0;
}

int cmd_eval(const CommonFlags& f, const std::vector<std::string>& adv_files, bool undefended) {
  ExperimentConfig cfg = build_config(f);
  cfg.modes = {undefended ? CurveMode::undefended : CurveMode::inn1};
  const auto splits = pipeline::load_dataset(cfg.dataset);
  const Models m = load_models(f, cfg, splits.test.image_shape());
  const auto plain_bgs = undefended_backgrounds(splits.test.image_shape());
  const SnapshotSet ensemble = undefended ? undefended_ensemble(*m.pretrained) : *m.snapshots;
  const InterferenceConfig icfg = undefended ? undefended_interference() : cfg.interference;
  const std::span<const Background> bgs = undefended ? std::span<const Background>(plain_bgs) : m.backgrounds;
  const std::string who = undefended ? "undefended" : "defended";

  auto run = [&](const std::vector<Image>& images, const std::vector<std::uint64_t>& ids, const std::string& tag) {
    std::vector<int> labels;
    for (auto id : ids) {
      if (id >= splits.test.size()) throw LabelError("image id " + std::to_string(id) + " has no test label");
      labels.push_back(splits.test.labels[id]);
    }
    const EvalResult r = evaluate(images, labels, ids, ensemble, icfg, bgs, cfg.seed, f.threads);
    const auto path = pipeline::eval_log_path(cfg.out, tag);
    io::write_text_atomic(path, render_eval_log(r));
    std::printf("%s accuracy %.4f (%zu/%zu), log %s\n", tag.c_str(), static_cast<double>(r.accuracy), r.correct, r.total,
                path.string().c_str());
  };

  if (adv_files.empty()) {
    const auto subset = pipeline::eval_subset(splits.test, cfg.eval_count, cfg.seed);
    run(subset.images, subset.ids, "clean_" + who);
  }
  for (const auto& file : adv_files) {
    const AdversarialSet set = decode_adversarial_set(io::read_file(file));
    std::vector<std::uint64_t> ids(set.ids.begin(), set.ids.end());
    run(set.images, ids, fs::path(file).stem().string() + "_" + who);
  }
  return 0;
}

int cmd_curve(const CommonFlags& f) {
  const ExperimentConfig cfg = build_config(f);
  std::optional<SmallConvNet> pre;
  if (f.pretrained) pre = pipeline::load_pretrained(*f.pretrained);
  const auto run = pipeline::run_curve(cfg, f.threads, pre ? &*pre : nullptr, log_line);
  std::cout << run.curve.to_csv();
  std::cout << "wrote " << pipeline::curve_path(cfg.out).string() << "\n";
  return 0;
}

int cmd_gen_backgrounds(const CommonFlags& f, std::size_t channels, std::size_t height, std::size_t width) {
  const ExperimentConfig cfg = build_config(f);
  const auto bgs = pipeline::backgrounds_for(cfg, {channels, height, width});
  const auto path = fs::path(cfg.out) / "backgrounds.innc";
  save_checkpoint(path, pipeline::backgrounds_checkpoint(bgs, cfg.seed));
  for (const auto& bg : bgs) std::cout << bg.index << " " << bg.generator_name << "\n";
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t seeds, float threshold) {
  const auto results = run_grad_suite(seeds);
  bool ok = true;
  std::printf("%-30s %12s %8s %8s %8s\n", "op", "max_rel_err", "checked", "skipped", "floored");
  for (const auto& r : results) {
    const bool pass = r.worst_relative_error < threshold;
    ok = ok && pass;
    std::printf("%-30s %12.3e %8zu %8zu %8zu %s\n", r.op.c_str(), static_cast<double>(r.worst_relative_error),
                r.coordinates_checked, r.coordinates_skipped, r.coordinates_floored, pass ? "ok" : "FAIL");
  }
  std::printf("%s: threshold %.1e over %zu seeds\n", ok ? "pass" : "fail", static_cast<double>(threshold), seeds);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interference-defended classifier: training, attacks and evaluation"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* gen_dataset = app.add_subcommand("gen-dataset", "Write the synthetic digit dataset as IDX files");
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Clean pretraining (K = 1)");
  auto* finetune_cmd = app.add_subcommand("finetune", "Expand to N*K outputs and fine-tune on interfered inputs");
  auto* attack_cmd = app.add_subcommand("attack", "Generate PGD adversarial sets");
  auto* eval_cmd = app.add_subcommand("eval", "Defended (or undefended) accuracy on clean or adversarial images");
  auto* curve_cmd = app.add_subcommand("curve", "Full pipeline and robustness CSV");
  auto* bg_cmd = app.add_subcommand("gen-backgrounds", "Write the procedural backgrounds as a checkpoint");
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  for (auto* c : {gen_dataset, pretrain_cmd, finetune_cmd, attack_cmd, eval_cmd, curve_cmd, bg_cmd}) add_common(c, flags);

  std::vector<std::string> adv_files;
  bool undefended = false;
  eval_cmd->add_option("--adv", adv_files, "Adversarial set files (.inna)")->check(CLI::ExistingFile);
  eval_cmd->add_flag("--undefended", undefended, "Evaluate the pretrained model without the defense");
  std::size_t bg_channels = 1, bg_height = 28, bg_width = 28;
  bg_cmd->add_option("--channels", bg_channels, "Channels")->check(CLI::PositiveNumber);
  bg_cmd->add_option("--height", bg_height, "Height")->check(CLI::PositiveNumber);
  bg_cmd->add_option("--width", bg_width, "Width")->check(CLI::PositiveNumber);
  std::size_t grad_seeds = 20;
  float grad_threshold = 1e-2f;
  grad_cmd->add_option("--seeds", grad_seeds, "Number of seeds")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--threshold", grad_threshold, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_dataset) return cmd_gen_dataset(flags);
    if (*pretrain_cmd) return cmd_pretrain(flags);
    if (*finetune_cmd) return cmd_finetune(flags);
    if (*attack_cmd) return cmd_attack(flags);
    if (*eval_cmd) return cmd_eval(flags, adv_files, undefended);
    if (*curve_cmd) return cmd_curve(flags);
    if (*bg_cmd) return cmd_gen_backgrounds(flags, bg_channels, bg_height, bg_width);
    if (*grad_cmd) return cmd_gradcheck(grad_seeds, grad_threshold);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

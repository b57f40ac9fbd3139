#include "inn/ensemble.hpp"

#include <algorithm>
#include <cstdio>

#include "inn/errors.hpp"
#include "inn/ops.hpp"
#include "inn/parallel.hpp"

namespace inn {

int argmax_first(std::span<const float> values) {
  if (values.empty()) throw ContractError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<int>(best);
}

std::vector<float> ClassDistribution::base_probabilities() const {
  if (classes < 1 || backgrounds < 1 || probs.size() != static_cast<std::size_t>(classes) * backgrounds) {
    throw DimensionError("class distribution has " + std::to_string(probs.size()) + " entries for N=" +
                         std::to_string(classes) + ", K=" + std::to_string(backgrounds));
  }
  std::vector<float> base(classes, 0.0f);
  for (int c = 0; c < classes; ++c) {
    for (int k = 0; k < backgrounds; ++k) base[c] += probs[c * backgrounds + k];
  }
  return base;
}

int ClassDistribution::base_argmax() const { return argmax_first(base_probabilities()); }

namespace {

void check_ensemble(const SnapshotSet& snapshots, const InterferenceConfig& icfg,
                    std::span<const Background> backgrounds) {
  if (snapshots.empty()) throw ContractError("snapshot set is empty");
  snapshots.validate();
  icfg.validate();
  const auto& m = snapshots.meta.interference;
  if (m.alpha != icfg.alpha || m.beta != icfg.beta || m.gamma != icfg.gamma || m.backgrounds != icfg.backgrounds) {
    throw ConfigError("interference config does not match the snapshot metadata");
  }
  if (backgrounds.size() != static_cast<std::size_t>(icfg.backgrounds)) {
    throw ConfigError("expected " + std::to_string(icfg.backgrounds) + " backgrounds, got " +
                      std::to_string(backgrounds.size()));
  }
}

std::vector<Prediction> predict_batch(std::span<const Image> images, std::span<const std::uint64_t> ids,
                                      const SnapshotSet& snapshots, const InterferenceConfig& icfg,
                                      std::span<const Background> backgrounds, std::uint64_t seed) {
  InterferenceConfig defender = icfg;
  defender.master_seed = seed;
  std::vector<Image> blended;
  blended.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    NoiseRealization r = draw_realization(defender, images[i].shape(), NoiseStream::eval, ids[i], 0);
    blended.push_back(apply_interference(images[i], defender, backgrounds, r).pixels);
  }
  const Tensor batch = stack_images(blended);
  const auto n = static_cast<int>(snapshots.meta.classes);
  const int k = icfg.backgrounds;
  const std::size_t width = static_cast<std::size_t>(n) * k;

  std::vector<float> sum(images.size() * width, 0.0f);
  for (const auto& model : snapshots.snapshots) {
    Tape tape(Tape::Mode::inference);
    const std::vector<float> p = ops::softmax_rows(model.forward(tape, batch));
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += p[j];
  }
  const float count = static_cast<float>(snapshots.size());
  std::vector<Prediction> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    ClassDistribution d;
    d.classes = n;
    d.backgrounds = k;
    d.probs.assign(sum.begin() + i * width, sum.begin() + (i + 1) * width);
    for (float& v : d.probs) v /= count;
    const std::vector<float> base = d.base_probabilities();
    out[i].base_class = argmax_first(base);
    out[i].max_probability = base[out[i].base_class];
    out[i].distribution = std::move(d);
  }
  return out;
}

}  // namespace

Prediction defended_predict(const Image& x, std::uint64_t image_id, const SnapshotSet& snapshots,
                            const InterferenceConfig& icfg, std::span<const Background> backgrounds,
                            std::uint64_t seed) {
  check_ensemble(snapshots, icfg, backgrounds);
  return predict_batch(std::span(&x, 1), std::span(&image_id, 1), snapshots, icfg, backgrounds, seed).front();
}

std::vector<Prediction> defended_predict_many(std::span<const Image> images, std::span<const std::uint64_t> image_ids,
                                              const SnapshotSet& snapshots, const InterferenceConfig& icfg,
                                              std::span<const Background> backgrounds, std::uint64_t seed,
                                              std::size_t threads, std::size_t batch_size) {
  check_ensemble(snapshots, icfg, backgrounds);
  if (images.size() != image_ids.size()) throw ContractError("images and ids differ in length");
  if (batch_size < 1) throw ConfigError("evaluation batch size must be >= 1");
  std::vector<Prediction> out(images.size());
  const std::size_t jobs = (images.size() + batch_size - 1) / batch_size;
  parallel_for(jobs, threads, [&](std::size_t j) {
    const std::size_t start = j * batch_size;
    const std::size_t len = std::min(batch_size, images.size() - start);
    auto part = predict_batch(images.subspan(start, len), image_ids.subspan(start, len), snapshots, icfg,
                              backgrounds, seed);
    std::move(part.begin(), part.end(), out.begin() + static_cast<std::ptrdiff_t>(start));
  });
  return out;
}

InterferenceConfig undefended_interference() { return InterferenceConfig{}; }

std::vector<Background> undefended_backgrounds(const Shape& image_shape) {
  if (image_shape.size() != 3) throw DimensionError("image shape must be [C,H,W], got " + shape_str(image_shape));
  return {Background{Image(Tensor(image_shape)), 0, "none", 0}};
}

SnapshotSet undefended_ensemble(const SmallConvNet& model) {
  if (model.arch().backgrounds != 1) throw ConfigError("an undefended model must have K = 1");
  SnapshotSet set;
  set.snapshots.push_back(model.copy(false));
  set.meta.classes = model.arch().classes;
  set.meta.backgrounds = 1;
  set.meta.interference = undefended_interference();
  return set;
}

EvalResult evaluate(std::span<const Image> images, std::span<const int> labels, std::span<const std::uint64_t> image_ids,
                    const SnapshotSet& snapshots, const InterferenceConfig& icfg,
                    std::span<const Background> backgrounds, std::uint64_t seed, std::size_t threads) {
  if (images.empty()) throw ContractError("cannot evaluate an empty dataset");
  if (labels.size() != images.size()) {
    throw LabelError("evaluation has " + std::to_string(images.size()) + " images but " +
                     std::to_string(labels.size()) + " labels");
  }
  const auto n = static_cast<int>(snapshots.meta.classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n) {
      throw LabelError("label " + std::to_string(labels[i]) + " of image " + std::to_string(i) + " outside [0," +
                       std::to_string(n) + ")");
    }
  }
  const auto preds = defended_predict_many(images, image_ids, snapshots, icfg, backgrounds, seed, threads);
  EvalResult r;
  r.total = images.size();
  r.records.resize(r.total);
  for (std::size_t i = 0; i < r.total; ++i) {
    r.records[i] = {image_ids[i], labels[i], preds[i].base_class, preds[i].max_probability};
    if (preds[i].base_class == labels[i]) ++r.correct;
  }
  r.accuracy = static_cast<float>(static_cast<double>(r.correct) / static_cast<double>(r.total));
  return r;
}

std::string render_eval_log(const EvalResult& result) {
  std::string out;
  char buf[64];
  for (const auto& rec : result.records) {
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(rec.max_probability));
    out += std::to_string(rec.id) + "," + std::to_string(rec.true_label) + "," + std::to_string(rec.predicted) + "," +
           buf + "\n";
  }
  return out;
}

std::string to_string(CurveMode mode) {
  switch (mode) {
    case CurveMode::inn1: return "INN1";
    case CurveMode::inn2: return "INN2";
    case CurveMode::undefended: return "undefended";
  }
  return "?";
}

CurveMode curve_mode_from_string(const std::string& s) {
  if (s == "INN1" || s == "inn1") return CurveMode::inn1;
  if (s == "INN2" || s == "inn2") return CurveMode::inn2;
  if (s == "undefended") return CurveMode::undefended;
  throw ConfigError("unknown curve mode '" + s + "' (expected INN1, INN2 or undefended)");
}

std::string RobustnessCurve::to_csv() const {
  std::string out = "epsilon,mode,top1_base_accuracy,n_images,seed\n";
  char buf[64];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(row.epsilon));
    out += buf;
    out += "," + to_string(row.mode) + ",";
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(row.accuracy));
    out += buf;
    out += "," + std::to_string(row.n_images) + "," + std::to_string(row.seed) + "\n";
  }
  return out;
}

const CurveRow* RobustnessCurve::find(CurveMode mode, float epsilon) const {
  for (const auto& row : rows) {
    if (row.mode == mode && row.epsilon == epsilon) return &row;
  }
  return nullptr;
}

RobustnessCurve robustness_curve(std::span<const float> epsilons, std::span<const CurveMode> modes,
                                 const CurveInputs& inputs, const AttackConfig& attack_template, std::uint64_t seed,
                                 std::size_t threads, const CurveObserver& observer) {
  if (epsilons.empty()) throw ConfigError("epsilon grid is empty");
  if (modes.empty()) throw ConfigError("no curve modes requested");
  std::vector<float> grid(epsilons.begin(), epsilons.end());
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  std::vector<CurveMode> mode_list(modes.begin(), modes.end());
  std::sort(mode_list.begin(), mode_list.end());
  mode_list.erase(std::unique(mode_list.begin(), mode_list.end()), mode_list.end());

  if (inputs.images.empty()) throw ContractError("robustness curve needs at least one image");
  const std::vector<Background> plain_bgs = undefended_backgrounds(inputs.images.front().shape());
  RobustnessCurve curve;
  for (CurveMode mode : mode_list) {
    const bool defended = mode != CurveMode::undefended;
    SnapshotSet undefended_set;
    const SnapshotSet* ensemble = nullptr;
    AttackTarget target;
    if (defended) {
      if (!inputs.defended) throw ConfigError(to_string(mode) + " rows need fine-tuned snapshots");
      if (attack_template.snapshot_index >= inputs.defended->size()) {
        throw ConfigError("attack snapshot index " + std::to_string(attack_template.snapshot_index) +
                          " is out of range for " + std::to_string(inputs.defended->size()) + " snapshots");
      }
      ensemble = inputs.defended;
      target = {&inputs.defended->snapshots[attack_template.snapshot_index], inputs.interference, inputs.backgrounds};
    } else {
      if (!inputs.undefended) throw ConfigError("undefended rows need a pretrained model");
      undefended_set = undefended_ensemble(*inputs.undefended);
      ensemble = &undefended_set;
      target = {&undefended_set.snapshots.front(), undefended_interference(), plain_bgs};
    }
    const InterferenceConfig& icfg = defended ? inputs.interference : target.interference;
    const std::span<const Background> bgs = defended ? inputs.backgrounds : std::span<const Background>(plain_bgs);

    for (float eps : grid) {
      AttackConfig acfg = attack_template;
      acfg.epsilon = eps;
      acfg.mode = mode == CurveMode::inn1 ? AttackMode::inn1 : AttackMode::inn2;
      acfg.validate();
      EvalResult result;
      CurveRow row{eps, mode, 0.0f, inputs.images.size(), seed};
      if (eps == 0.0f) {
        result = evaluate(inputs.images, inputs.labels, inputs.image_ids, *ensemble, icfg, bgs, seed, threads);
        row.accuracy = result.accuracy;
        curve.rows.push_back(row);
        continue;
      }
      auto adv = pgd_many(inputs.images, inputs.labels, inputs.image_ids, target, acfg, threads);
      AdversarialSet set;
      set.epsilon = eps;
      set.iterations = static_cast<std::uint32_t>(acfg.iterations);
      set.mode = acfg.mode;
      set.snapshot_index = defended ? static_cast<std::uint32_t>(acfg.snapshot_index) : 0;
      set.seed = acfg.seed;
      for (std::size_t i = 0; i < adv.size(); ++i) {
        set.ids.push_back(static_cast<std::uint32_t>(inputs.image_ids[i]));
        set.images.push_back(std::move(adv[i].perturbed));
      }
      result = evaluate(set.images, inputs.labels, inputs.image_ids, *ensemble, icfg, bgs, seed, threads);
      row.accuracy = result.accuracy;
      curve.rows.push_back(row);
      if (observer) observer(row, set, result);
    }
  }
  return curve;
}

}  // namespace inn

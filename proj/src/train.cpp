#include "inn/train.hpp"

#include <algorithm>
#include <numeric>

#include "inn/errors.hpp"
#include "inn/ops.hpp"
#include "inn/optim.hpp"
#include "inn/rng.hpp"

namespace inn {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(learning_rate >= 0.0f)) throw ConfigError("learning rate must be >= 0");
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw ConfigError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0f)) throw ConfigError("weight decay must be >= 0");
}

namespace {

enum : std::uint64_t { kTagInit = 0x1417, kTagShuffle = 0x5817, kTagJitter = 0x7177 };

Architecture arch_for(const Dataset& data, std::size_t classes, std::size_t backgrounds) {
  const Shape s = data.image_shape();
  return Architecture{s[0], s[1], s[2], classes, backgrounds};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng({seed, kTagShuffle, epoch});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

// Assembles the minibatch input and training labels for `indices`.
struct Batch {
  Tensor input;
  std::vector<int> labels;
};

Batch assemble(const Dataset& data, std::span<const std::size_t> indices, const InterferenceConfig* icfg,
               std::span<const Background> backgrounds, std::size_t epoch, std::size_t* transforms) {
  std::vector<Image> images;
  images.reserve(indices.size());
  Batch b;
  b.labels.reserve(indices.size());
  for (std::size_t idx : indices) {
    if (icfg) {
      NoiseRealization r = draw_realization(*icfg, data.images[idx].shape(), NoiseStream::train, idx, epoch);
      images.push_back(apply_interference(data.images[idx], *icfg, backgrounds, r).pixels);
      b.labels.push_back(encode_label(data.labels[idx], r.background_index, icfg->backgrounds));
      if (transforms) ++*transforms;
    } else {
      images.push_back(data.images[idx]);
      b.labels.push_back(data.labels[idx]);
    }
  }
  b.input = stack_images(images);
  return b;
}

struct EpochLoop {
  SmallConvNet& model;
  const Dataset& data;
  const TrainConfig& cfg;
  const InterferenceConfig* icfg;
  std::span<const Background> backgrounds;
  SgdState& opt;

  float run(std::size_t epoch, std::size_t* transforms) {
    const auto order = epoch_order(data.size(), cfg.seed, epoch);
    std::vector<Tensor> params = model.parameters();
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++steps) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      Batch batch = assemble(data, std::span(order).subspan(start, len), icfg, backgrounds, epoch, transforms);
      try {
        Tape tape;
        Tensor loss = ops::softmax_cross_entropy(tape, model.forward(tape, batch.input), batch.labels);
        tape.backward(loss);
        sgd_momentum_step(params, opt);
        total += loss.item();
      } catch (const NumericError& e) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch + 1) + " step " +
                            std::to_string(steps + 1) + ": " + e.what());
      }
    }
    return static_cast<float>(total / static_cast<double>(std::max<std::size_t>(steps, 1)));
  }
};

}  // namespace

TrainResult pretrain(const Dataset& data, const TrainConfig& cfg, std::size_t classes) {
  cfg.validate();
  data.validate();
  if (data.empty()) throw ConfigError("cannot pretrain on an empty dataset");
  if (static_cast<std::size_t>(data.classes) > classes) {
    throw LabelError("dataset has " + std::to_string(data.classes) + " classes but the model has " +
                     std::to_string(classes) + " outputs");
  }
  TrainResult result{SmallConvNet(arch_for(data, classes, 1), derive_seed({cfg.seed, kTagInit})), {}};
  SgdState opt(result.model.parameters(), cfg.learning_rate, cfg.momentum, cfg.weight_decay);
  EpochLoop loop{result.model, data, cfg, nullptr, {}, opt};
  for (std::size_t e = 0; e < cfg.epochs; ++e) result.epoch_loss.push_back(loop.run(e, nullptr));
  result.model.set_trainable(false);
  return result;
}

SmallConvNet transfer_expand(const SmallConvNet& pretrained, std::size_t classes, std::size_t backgrounds,
                             std::uint64_t seed, float jitter_std) {
  const Architecture& src = pretrained.arch();
  if (src.backgrounds != 1 || src.classes != classes) {
    throw CheckpointError("transfer_expand needs a pretrained model with " + std::to_string(classes) +
                          " plain outputs, got N=" + std::to_string(src.classes) +
                          " K=" + std::to_string(src.backgrounds));
  }
  if (backgrounds < 1) throw ConfigError("K must be >= 1");
  if (!(jitter_std >= 0.0f)) throw ConfigError("jitter std must be >= 0");
  Architecture dst = src;
  dst.backgrounds = backgrounds;

  std::vector<NamedTensor> params;
  const auto& old = pretrained.named_parameters();
  for (std::size_t i = 0; i + 2 < old.size(); ++i) params.push_back({old[i].name, old[i].value.clone()});

  Rng rng({seed, kTagJitter});
  const Tensor& w_old = old[old.size() - 2].value;  // [hidden, N]
  const Tensor& b_old = old.back().value;           // [N]
  const std::size_t hidden = w_old.dim(0);
  const std::size_t wide = classes * backgrounds;
  Tensor w({hidden, wide});
  Tensor b({wide});
  auto wo = w_old.data();
  auto wn = w.data();
  for (std::size_t h = 0; h < hidden; ++h) {
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t k = 0; k < backgrounds; ++k) {
        const float jitter = jitter_std > 0.0f ? rng.normal(jitter_std) : 0.0f;
        wn[h * wide + c * backgrounds + k] = wo[h * classes + c] + jitter;
      }
    }
  }
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t k = 0; k < backgrounds; ++k) {
      const float jitter = jitter_std > 0.0f ? rng.normal(jitter_std) : 0.0f;
      b.data()[c * backgrounds + k] = b_old.data()[c] + jitter;
    }
  }
  params.push_back({old[old.size() - 2].name, w});
  params.push_back({old.back().name, b});
  return SmallConvNet(dst, std::move(params));
}

void SnapshotSet::validate() const {
  if (snapshots.empty()) throw ConfigError("snapshot set is empty");
  const Architecture& a = snapshots.front().arch();
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    if (!(snapshots[i].arch() == a)) throw ConfigError("snapshot " + std::to_string(i) + " has a different architecture");
  }
  if (a.classes != meta.classes || a.backgrounds != meta.backgrounds) {
    throw ConfigError("snapshot architecture N=" + std::to_string(a.classes) + " K=" + std::to_string(a.backgrounds) +
                      " disagrees with metadata N=" + std::to_string(meta.classes) +
                      " K=" + std::to_string(meta.backgrounds));
  }
}

FinetuneResult finetune_inn(const SmallConvNet& model, const Dataset& data, const InterferenceConfig& icfg,
                            const TrainConfig& tcfg, std::span<const Background> backgrounds) {
  icfg.validate();
  tcfg.validate();
  data.validate();
  if (data.empty()) throw ConfigError("cannot fine-tune on an empty dataset");
  const auto k = static_cast<std::size_t>(icfg.backgrounds);
  if (model.arch().backgrounds != k) {
    throw ConfigError("model has K=" + std::to_string(model.arch().backgrounds) + " but the interference config has K=" +
                      std::to_string(k));
  }
  if (static_cast<std::size_t>(data.classes) > model.arch().classes) {
    throw LabelError("dataset has " + std::to_string(data.classes) + " classes, model has " +
                     std::to_string(model.arch().classes));
  }
  if (backgrounds.size() != k) {
    throw ConfigError(std::to_string(backgrounds.size()) + " backgrounds supplied for K=" + std::to_string(k));
  }

  FinetuneResult result;
  result.snapshots.meta = SnapshotMeta{model.arch().classes, k, icfg, tcfg, data.id};
  SmallConvNet working = model.copy(true);
  SgdState opt(working.parameters(), tcfg.learning_rate, tcfg.momentum, tcfg.weight_decay);
  EpochLoop loop{working, data, tcfg, &icfg, backgrounds, opt};
  for (std::size_t e = 0; e < tcfg.epochs; ++e) {
    std::size_t transforms = 0;
    result.epoch_loss.push_back(loop.run(e, &transforms));
    result.transforms_per_epoch.push_back(transforms);
    result.snapshots.snapshots.push_back(working.copy(false));
  }
  return result;
}

float mean_training_loss(const SmallConvNet& model, const Dataset& data, const InterferenceConfig& icfg,
                         std::span<const Background> backgrounds, std::size_t epoch) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  double total = 0.0;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < all.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, all.size() - start);
    Batch batch = assemble(data, std::span(all).subspan(start, len), &icfg, backgrounds, epoch, nullptr);
    Tape tape(Tape::Mode::inference);
    Tensor loss = ops::softmax_cross_entropy(tape, model.forward(tape, batch.input), batch.labels);
    total += static_cast<double>(loss.item()) * static_cast<double>(len);
  }
  return static_cast<float>(total / static_cast<double>(data.size()));
}

float plain_accuracy(const SmallConvNet& model, const Dataset& data) {
  if (data.empty()) throw ContractError("accuracy of an empty dataset is undefined");
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, data.size() - start);
    Tensor input = stack_images(std::span(data.images).subspan(start, len));
    Tape tape(Tape::Mode::inference);
    Tensor logits = model.forward(tape, input);
    const std::size_t width = logits.dim(1);
    auto z = logits.data();
    for (std::size_t i = 0; i < len; ++i) {
      const auto row = z.subspan(i * width, width);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == data.labels[start + i]) ++correct;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(data.size());
}

Checkpoint to_checkpoint(const SmallConvNet& model, const SnapshotMeta& meta, std::size_t epoch) {
  const Architecture& a = model.arch();
  Checkpoint c;
  c.set("arch", SmallConvNet::kArchName);
  c.set("N", std::to_string(a.classes));
  c.set("K", std::to_string(a.backgrounds));
  c.set("alpha", format_float_exact(meta.interference.alpha));
  c.set("beta", format_float_exact(meta.interference.beta));
  c.set("gamma", format_float_exact(meta.interference.gamma));
  c.set("seed", std::to_string(meta.interference.master_seed));
  c.set("epoch", std::to_string(epoch));
  c.set("C", std::to_string(a.channels));
  c.set("H", std::to_string(a.height));
  c.set("W", std::to_string(a.width));
  c.set("train_seed", std::to_string(meta.train.seed));
  c.set("batch_size", std::to_string(meta.train.batch_size));
  c.set("learning_rate", format_float_exact(meta.train.learning_rate));
  c.set("momentum", format_float_exact(meta.train.momentum));
  c.set("weight_decay", format_float_exact(meta.train.weight_decay));
  c.set("epochs", std::to_string(meta.train.epochs));
  c.set("dataset", meta.dataset_id);
  for (const auto& p : model.named_parameters()) c.tensors.push_back({p.name, p.value.clone().set_requires_grad(false)});
  return c;
}

namespace {
std::uint64_t parse_u64(const Checkpoint& c, const std::string& key) {
  const std::string& v = c.require(key);
  try {
    std::size_t used = 0;
    const auto out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw CheckpointError("metadata '" + key + "' is not an integer: '" + v + "'");
  }
}

float parse_f32(const Checkpoint& c, const std::string& key) {
  const std::string& v = c.require(key);
  try {
    std::size_t used = 0;
    const float out = std::stof(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw CheckpointError("metadata '" + key + "' is not a number: '" + v + "'");
  }
}
}  // namespace

SmallConvNet model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.require("arch") != SmallConvNet::kArchName) {
    throw CheckpointError("architecture mismatch: checkpoint is '" + ckpt.require("arch") + "', expected '" +
                          SmallConvNet::kArchName + "'");
  }
  Architecture a{parse_u64(ckpt, "C"), parse_u64(ckpt, "H"), parse_u64(ckpt, "W"), parse_u64(ckpt, "N"),
                 parse_u64(ckpt, "K")};
  std::vector<NamedTensor> params;
  for (const auto& t : ckpt.tensors) params.push_back({t.name, t.value.clone().set_requires_grad(false)});
  return SmallConvNet(a, std::move(params));
}

SnapshotMeta meta_from_checkpoint(const Checkpoint& ckpt) {
  SnapshotMeta m;
  m.classes = parse_u64(ckpt, "N");
  m.backgrounds = parse_u64(ckpt, "K");
  m.interference.alpha = parse_f32(ckpt, "alpha");
  m.interference.beta = parse_f32(ckpt, "beta");
  m.interference.gamma = parse_f32(ckpt, "gamma");
  m.interference.backgrounds = static_cast<int>(m.backgrounds);
  m.interference.master_seed = parse_u64(ckpt, "seed");
  if (ckpt.get("train_seed")) {
    m.train.seed = parse_u64(ckpt, "train_seed");
    m.train.batch_size = parse_u64(ckpt, "batch_size");
    m.train.learning_rate = parse_f32(ckpt, "learning_rate");
    m.train.momentum = parse_f32(ckpt, "momentum");
    m.train.weight_decay = parse_f32(ckpt, "weight_decay");
    m.train.epochs = parse_u64(ckpt, "epochs");
  }
  m.dataset_id = ckpt.get("dataset").value_or("");
  return m;
}

SnapshotSet snapshots_from_checkpoints(std::span<const Checkpoint> ckpts) {
  if (ckpts.empty()) throw ConfigError("no snapshot checkpoints given");
  SnapshotSet set;
  set.meta = meta_from_checkpoint(ckpts.front());
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    const SnapshotMeta m = meta_from_checkpoint(ckpts[i]);
    if (!(m.interference == set.meta.interference) || m.classes != set.meta.classes ||
        m.backgrounds != set.meta.backgrounds) {
      throw ConfigError("snapshot " + std::to_string(i) + " metadata differs from snapshot 0");
    }
    set.snapshots.push_back(model_from_checkpoint(ckpts[i]));
  }
  set.validate();
  return set;
}

}  // namespace inn

#include "inn/attacks.hpp"

#include <algorithm>
#include <cstring>

#include "inn/errors.hpp"
#include "inn/io.hpp"
#include "inn/ops.hpp"
#include "inn/parallel.hpp"
#include "inn/rng.hpp"

namespace inn {

std::string to_string(AttackMode mode) { return mode == AttackMode::inn1 ? "INN1" : "INN2"; }

AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "INN1" || s == "inn1") return AttackMode::inn1;
  if (s == "INN2" || s == "inn2") return AttackMode::inn2;
  throw ConfigError("unknown attack mode '" + s + "' (expected INN1 or INN2)");
}

float AttackConfig::step() const {
  if (step_size) return *step_size;
  return 2.5f * epsilon / static_cast<float>(iterations);
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0f && epsilon <= 1.0f)) throw ConfigError("epsilon must lie in [0,1], got " + std::to_string(epsilon));
  if (iterations < 1) throw ConfigError("PGD needs at least one iteration");
  if (step_size && !(*step_size >= 0.0f)) throw ConfigError("step size must be >= 0");
}

namespace {

void check_target(const AttackTarget& target) {
  if (!target.model) throw ContractError("attack target has no model");
  for (const auto& p : target.model->named_parameters()) {
    if (p.value.requires_grad()) {
      throw ContractError("attack target parameters must be frozen (parameter '" + p.name + "' requires grad)");
    }
  }
  target.interference.validate();
  if (target.model->arch().backgrounds != static_cast<std::size_t>(target.interference.backgrounds)) {
    throw ConfigError("attack target model has K=" + std::to_string(target.model->arch().backgrounds) +
                      " but its interference config has K=" + std::to_string(target.interference.backgrounds));
  }
}

float sign_of(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

enum : std::uint64_t { kTagRandomStart = 0x2a57 };

}  // namespace

AttackGradient attack_gradient(const Tensor& batch, std::span<const int> base_labels, const AttackTarget& target,
                               AttackMode mode, std::span<const NoiseRealization> realizations) {
  check_target(target);
  if (batch.rank() != 4 || base_labels.size() != batch.dim(0)) {
    throw LabelError("attack_gradient: " + std::to_string(base_labels.size()) + " labels for batch " +
                     shape_str(batch.shape()));
  }
  const int k = target.interference.backgrounds;
  const auto classes = static_cast<int>(target.model->arch().classes);
  for (int label : base_labels) {
    if (label < 0 || label >= classes) {
      throw LabelError("attack label " + std::to_string(label) + " outside [0," + std::to_string(classes) + ")");
    }
  }

  Tensor x = batch.clone();
  x.set_requires_grad(true);
  Tape tape;
  AttackGradient out;
  if (mode == AttackMode::inn1) {
    Tensor blended = interfere(tape, x, target.interference, target.backgrounds, realizations);
    std::vector<int> composite(base_labels.size());
    for (std::size_t i = 0; i < composite.size(); ++i) {
      composite[i] = encode_label(base_labels[i], realizations[i].background_index, k);
    }
    Tensor logits = target.model->forward(tape, blended);
    out.loss = ops::cross_entropy_rows(logits, composite);
    tape.backward(ops::softmax_cross_entropy(tape, logits, composite, ops::Reduction::sum));
  } else {
    Tensor logits = target.model->forward(tape, x);
    out.loss = ops::marginal_cross_entropy_rows(logits, base_labels, k);
    tape.backward(ops::marginal_cross_entropy(tape, logits, base_labels, k, ops::Reduction::sum));
  }
  check_finite(x.grad(), "attack gradient");
  out.gradient = Tensor(batch.shape(), std::vector<float>(x.grad().begin(), x.grad().end()));
  return out;
}

NoiseRealization attacker_realization(const AttackTarget& target, const AttackConfig& cfg, const Shape& shape,
                                      std::uint64_t image_id, std::uint64_t iteration) {
  InterferenceConfig icfg = target.interference;
  icfg.master_seed = cfg.seed;
  return draw_realization(icfg, shape, NoiseStream::attack, image_id, cfg.eot_resample ? iteration : 0);
}

SignAttackResult sign_attack(const Tensor& x0, const Tensor& start, const ObjectiveFn& objective, float epsilon,
                             float step, std::size_t iterations, bool single_step) {
  if (start.shape() != x0.shape()) {
    throw DimensionError("attack start " + shape_str(start.shape()) + " does not match input " + shape_str(x0.shape()));
  }
  Tensor xt = start.clone();
  for (std::size_t t = 0; t < iterations; ++t) {
    AttackGradient g = objective(xt, t);
    auto grad = g.gradient.data();
    for (std::size_t j = 0; j < xt.numel(); ++j) {
      const float s = sign_of(grad[j]);
      float v;
      if (single_step) {
        v = x0[j] + epsilon * s;
      } else {
        v = std::clamp(xt[j] + step * s, x0[j] - epsilon, x0[j] + epsilon);
      }
      xt[j] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  AttackGradient last = objective(xt, iterations);
  return SignAttackResult{xt, std::move(last.loss)};
}

namespace {

// PGD on a batch. `single_step` gives FGSM (one step of exactly epsilon).
std::vector<AdversarialExample> run_batch(std::span<const Image> images, std::span<const int> labels,
                                          std::span<const std::uint64_t> ids, const AttackTarget& target,
                                          const AttackConfig& cfg, bool single_step) {
  const std::size_t b = images.size();
  const Tensor x0 = stack_images(images);
  const std::size_t per = x0.numel() / b;
  const Shape shape = images.front().shape();
  const float eps = cfg.epsilon;

  Tensor start = x0.clone();
  if (cfg.random_start && !single_step) {
    for (std::size_t i = 0; i < b; ++i) {
      Rng rng({cfg.seed, kTagRandomStart, ids[i]});
      for (std::size_t p = 0; p < per; ++p) {
        const float v = x0[i * per + p] + eps * (2.0f * rng.uniform() - 1.0f);
        start[i * per + p] = std::clamp(std::clamp(v, x0[i * per + p] - eps, x0[i * per + p] + eps), 0.0f, 1.0f);
      }
    }
  }

  auto realizations_for = [&](std::uint64_t iteration) {
    std::vector<NoiseRealization> rs;
    if (cfg.mode == AttackMode::inn1) {
      rs.reserve(b);
      for (std::size_t i = 0; i < b; ++i) rs.push_back(attacker_realization(target, cfg, shape, ids[i], iteration));
    }
    return rs;
  };

  const std::vector<NoiseRealization> fixed = realizations_for(0);
  ObjectiveFn objective = [&](const Tensor& xt, std::size_t iteration) {
    if (!cfg.eot_resample) return attack_gradient(xt, labels, target, cfg.mode, fixed);
    return attack_gradient(xt, labels, target, cfg.mode, realizations_for(iteration));
  };
  SignAttackResult res = sign_attack(x0, start, objective, eps, single_step ? eps : cfg.step(),
                                     single_step ? 1 : cfg.iterations, single_step);
  const Tensor& xt = res.adversarial;
  std::vector<AdversarialExample> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i].original = images[i];
    out[i].perturbed = image_from_batch(xt, i);
    out[i].epsilon = eps;
    out[i].mode = cfg.mode;
    out[i].achieved_loss = res.loss[i];
  }
  return out;
}

}  // namespace

AdversarialExample fgsm(const Image& x, int base_label, std::uint64_t image_id, const AttackTarget& target,
                        const AttackConfig& cfg) {
  cfg.validate();
  const std::uint64_t ids[] = {image_id};
  return run_batch(std::span(&x, 1), std::span(&base_label, 1), ids, target, cfg, true).front();
}

AdversarialExample pgd(const Image& x, int base_label, std::uint64_t image_id, const AttackTarget& target,
                       const AttackConfig& cfg) {
  cfg.validate();
  const std::uint64_t ids[] = {image_id};
  return run_batch(std::span(&x, 1), std::span(&base_label, 1), ids, target, cfg, false).front();
}

std::vector<AdversarialExample> pgd_many(std::span<const Image> images, std::span<const int> base_labels,
                                         std::span<const std::uint64_t> image_ids, const AttackTarget& target,
                                         const AttackConfig& cfg, std::size_t threads, std::size_t batch_size) {
  cfg.validate();
  if (images.size() != base_labels.size() || images.size() != image_ids.size()) {
    throw LabelError("pgd_many: images, labels and ids differ in length");
  }
  if (batch_size < 1) throw ConfigError("attack batch size must be >= 1");
  std::vector<AdversarialExample> out(images.size());
  const std::size_t jobs = (images.size() + batch_size - 1) / batch_size;
  parallel_for(jobs, threads, [&](std::size_t j) {
    const std::size_t start = j * batch_size;
    const std::size_t len = std::min(batch_size, images.size() - start);
    auto part = run_batch(images.subspan(start, len), base_labels.subspan(start, len), image_ids.subspan(start, len),
                          target, cfg, false);
    std::move(part.begin(), part.end(), out.begin() + static_cast<std::ptrdiff_t>(start));
  });
  return out;
}

namespace {
constexpr char kAdvMagic[4] = {'I', 'N', 'N', 'A'};
}

std::vector<std::uint8_t> encode_adversarial_set(const AdversarialSet& set) {
  if (set.ids.size() != set.images.size()) throw ContractError("adversarial set ids and images differ in length");
  io::ByteWriter w;
  w.text(std::string_view(kAdvMagic, 4));
  w.u32(AdversarialSet::kVersion);
  w.f32(set.epsilon);
  w.u32(set.iterations);
  w.u32(set.mode == AttackMode::inn1 ? 0 : 1);
  w.u32(set.snapshot_index);
  w.u64(set.seed);
  w.u32(static_cast<std::uint32_t>(set.images.size()));
  Shape shape = set.images.empty() ? Shape{0, 0, 0} : set.images.front().shape();
  for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    if (set.images[i].shape() != shape) throw DimensionError("adversarial set images differ in shape");
    w.u32(set.ids[i]);
    for (float v : set.images[i].values()) w.f32(v);
  }
  return w.take();
}

AdversarialSet decode_adversarial_set(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kAdvMagic, 4) != 0) {
    throw FormatMagicError("not an adversarial set: magic bytes are not \"INNA\"");
  }
  io::ByteReader r(bytes.subspan(4));
  AdversarialSet set;
  std::uint32_t version = 0, mode = 0, count = 0, c = 0, h = 0, w = 0;
  if (!r.u32(version)) throw LengthMismatchError("adversarial set truncated in header");
  if (version != AdversarialSet::kVersion) {
    throw ParseError("adversarial set version " + std::to_string(version) + " is not supported");
  }
  if (!r.f32(set.epsilon) || !r.u32(set.iterations) || !r.u32(mode) || !r.u32(set.snapshot_index) ||
      !r.u64(set.seed) || !r.u32(count) || !r.u32(c) || !r.u32(h) || !r.u32(w)) {
    throw LengthMismatchError("adversarial set truncated in header");
  }
  if (mode > 1) throw ParseError("adversarial set has unknown mode " + std::to_string(mode));
  set.mode = mode == 0 ? AttackMode::inn1 : AttackMode::inn2;
  const std::size_t per = static_cast<std::size_t>(c) * h * w;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t id = 0;
    if (!r.u32(id) || r.remaining() / 4 < per) {
      throw LengthMismatchError("adversarial set truncated in record " + std::to_string(i));
    }
    Image img = Image::zeros(c, h, w);
    for (auto& v : img.values()) r.f32(v);
    set.ids.push_back(id);
    set.images.push_back(std::move(img));
  }
  if (r.remaining() != 0) throw LengthMismatchError("adversarial set has trailing bytes");
  return set;
}

}  // namespace inn

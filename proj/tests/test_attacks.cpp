#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "inn/attacks.hpp"
#include "inn/dataset.hpp"
#include "inn/ensemble.hpp"
#include "inn/errors.hpp"
#include "inn/grad_check.hpp"
#include "inn/ops.hpp"
#include "inn/train.hpp"
#include "test_util.hpp"

using namespace inn;

namespace {

SmallConvNet frozen_net(const Architecture& a, std::uint64_t seed) {
  SmallConvNet m(a, seed);
  m.set_trainable(false);
  return m;
}

std::vector<Image> random_images(Rng& rng, std::size_t n, const Shape& s) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(testutil::random_tensor(rng, s, 0.0f, 1.0f));
  return out;
}

float linf(const Image& a, const Image& b) {
  return testutil::max_abs_diff(a.values(), b.values());
}

void check_box(const AdversarialExample& ex, float eps) {
  REQUIRE(linf(ex.perturbed, ex.original) <= eps + 1e-6f);
  for (float v : ex.perturbed.values()) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
}

// Binary linear classifier z = x W + b on flattened pixels.
struct LinearModel {
  Tensor w;  // [D,2]
  Tensor b;  // [2]

  AttackGradient objective(const Tensor& batch, std::span<const int> labels) const {
    Tensor x = batch.clone();
    x.set_requires_grad(true);
    Tape tape;
    Tensor z = ops::dense(tape, ops::flatten(tape, x), w, b);
    AttackGradient out;
    out.loss = ops::cross_entropy_rows(z, labels);
    tape.backward(ops::softmax_cross_entropy(tape, z, labels, ops::Reduction::sum));
    out.gradient = Tensor(batch.shape(), std::vector<float>(x.grad().begin(), x.grad().end()));
    return out;
  }

  // Closed-form loss softplus(z_other - z_true) in double.
  double loss(std::span<const float> x, int label) const {
    double m = static_cast<double>(b[1 - label]) - b[label];
    for (std::size_t j = 0; j < x.size(); ++j) m += static_cast<double>(x[j]) * (w[j * 2 + 1 - label] - w[j * 2 + label]);
    return m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
  }
};

LinearModel random_linear(Rng& rng, std::size_t d) {
  return LinearModel{testutil::random_tensor(rng, {d, 2}), testutil::random_tensor(rng, {2}, -0.1f, 0.1f)};
}

}  // namespace

TEST_CASE("attack configuration and step rule") {
  AttackConfig c;
  c.epsilon = 16.0f / 255.0f;
  c.iterations = 500;
  CHECK(c.step() == 2.5f * (16.0f / 255.0f) / 500.0f);
  CHECK(c.step() == doctest::Approx(3.137e-4).epsilon(1e-3));
  c.step_size = 0.01f;
  CHECK(c.step() == 0.01f);
  CHECK_NOTHROW(c.validate());

  AttackConfig bad;
  bad.epsilon = 1.5f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.epsilon = 0.1f;
  bad.iterations = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  CHECK(to_string(AttackMode::inn1) == "INN1");
  CHECK(attack_mode_from_string("INN2") == AttackMode::inn2);
  CHECK_THROWS(attack_mode_from_string("INN3"));
}

TEST_CASE("sign attack on a linear model matches the closed form") {
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    LinearModel lin = random_linear(rng, 16);
    Tensor x0 = testutil::random_tensor(rng, {1, 1, 4, 4}, 0.0f, 1.0f);
    const int label = trial % 2;
    const float eps = 0.05f + 0.2f * rng.uniform();
    std::vector<int> labels{label};
    ObjectiveFn f = [&](const Tensor& x, std::size_t) { return lin.objective(x, labels); };

    SignAttackResult fg = sign_attack(x0, x0, f, eps, eps, 1, true);
    for (std::size_t j = 0; j < 16; ++j) {
      const float dir = lin.w[j * 2 + 1 - label] - lin.w[j * 2 + label];
      const float s_j = dir > 0 ? 1.0f : (dir < 0 ? -1.0f : 0.0f);
      REQUIRE(fg.adversarial[j] == std::clamp(x0[j] + eps * s_j, 0.0f, 1.0f));
    }
    const double fg_loss = lin.loss(fg.adversarial.data(), label);
    CHECK(fg.loss[0] == doctest::Approx(fg_loss).epsilon(1e-5));

    SignAttackResult pg = sign_attack(x0, x0, f, eps, 2.5f * eps / 10.0f, 10, false);
    const double pg_loss = lin.loss(pg.adversarial.data(), label);
    CHECK(pg_loss >= fg_loss - 1e-6);
    CHECK(pg_loss >= lin.loss(x0.data(), label));
  }
}

TEST_CASE("zero epsilon and single-step PGD reduce to the identity and FGSM") {
  Rng rng(102);
  SmallConvNet net = frozen_net(Architecture{1, 8, 8, 3, 1}, 5);
  AttackTarget target{&net, InterferenceConfig{}, {}};
  std::vector<Background> bgs = generate_backgrounds(1, 1, 8, 8, 0);
  target.backgrounds = bgs;
  Image x(testutil::random_tensor(rng, {1, 8, 8}, 0.0f, 1.0f));

  AttackConfig zero;
  zero.epsilon = 0.0f;
  zero.mode = AttackMode::inn2;
  CHECK(testutil::bit_equal(fgsm(x, 1, 0, target, zero).perturbed.values(), x.values()));
  CHECK(testutil::bit_equal(pgd(x, 1, 0, target, zero).perturbed.values(), x.values()));

  for (AttackMode mode : {AttackMode::inn1, AttackMode::inn2}) {
    AttackConfig one;
    one.epsilon = 0.1f;
    one.iterations = 1;
    one.step_size = 0.25f;
    one.mode = mode;
    AdversarialExample a = pgd(x, 2, 7, target, one);
    AdversarialExample b = fgsm(x, 2, 7, target, one);
    CHECK(testutil::bit_equal(a.perturbed.values(), b.perturbed.values()));
    CHECK(a.achieved_loss == b.achieved_loss);
    check_box(a, 0.1f);
  }
}

TEST_CASE("INN1 equals INN2 under the identity transform with K=1") {
  Rng rng(103);
  SmallConvNet net = frozen_net(Architecture{2, 8, 8, 4, 1}, 6);
  std::vector<Background> bgs = generate_backgrounds(1, 2, 8, 8, 0);
  AttackTarget target{&net, InterferenceConfig{}, bgs};
  Tensor batch = testutil::random_tensor(rng, {5, 2, 8, 8}, 0.0f, 1.0f);
  std::vector<int> labels{0, 1, 2, 3, 1};
  std::vector<NoiseRealization> rs;
  for (std::uint64_t i = 0; i < 5; ++i) rs.push_back(draw_realization(target.interference, {2, 8, 8}, NoiseStream::attack, i, 0));
  AttackGradient g1 = attack_gradient(batch, labels, target, AttackMode::inn1, rs);
  AttackGradient g2 = attack_gradient(batch, labels, target, AttackMode::inn2, {});
  CHECK(testutil::bit_equal(g1.gradient.data(), g2.gradient.data()));
  CHECK(testutil::bit_equal(g1.loss, g2.loss));
}

TEST_CASE("INN1 gradient is masked, scaled, and matches finite differences") {
  Rng rng(104);
  InterferenceConfig icfg{0.5f, 0.4f, 0.4f, 4, 3};
  SmallConvNet net = frozen_net(Architecture{1, 8, 8, 3, 4}, 7);
  auto bgs = generate_backgrounds(4, 1, 8, 8, 3);
  AttackTarget target{&net, icfg, bgs};
  Tensor batch = testutil::random_tensor(rng, {2, 1, 8, 8}, 0.05f, 0.95f);
  std::vector<int> labels{2, 0};
  std::vector<NoiseRealization> rs{draw_realization(icfg, {1, 8, 8}, NoiseStream::attack, 0, 0),
                                   draw_realization(icfg, {1, 8, 8}, NoiseStream::attack, 1, 0)};
  AttackGradient g = attack_gradient(batch, labels, target, AttackMode::inn1, rs);
  std::size_t masked = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t p = 0; p < 64; ++p) {
      if (rs[i].sp_mask[p]) {
        ++masked;
        CHECK(g.gradient[i * 64 + p] == 0.0f);
      }
    }
  }
  CHECK(masked > 0);

  // Same objective written directly with tape ops, checked against central differences.
  std::vector<int> composite{encode_label(2, rs[0].background_index, 4), encode_label(0, rs[1].background_index, 4)};
  ScalarFn f = [&](Tape& tape, const Tensor& x) {
    Tensor logits = net.forward(tape, interfere(tape, x, icfg, bgs, rs));
    return ops::softmax_cross_entropy(tape, logits, composite, ops::Reduction::sum);
  };
  Tensor point = batch.clone();
  point.set_requires_grad(true);
  Tape tape;
  tape.backward(f(tape, point));
  CHECK(testutil::bit_equal(point.grad(), g.gradient.data()));
  GradCheckOptions opts;
  opts.max_coordinates = 64;
  opts.seed = 5;
  GradCheckReport rep = grad_check(f, batch, opts);
  CHECK(rep.max_relative_error < 1e-2f);

  double total = 0.0;
  for (float l : g.loss) total += l;
  Tape t2(Tape::Mode::inference);
  CHECK(f(t2, batch).item() == doctest::Approx(total).epsilon(1e-5));
}

TEST_CASE("attack preconditions") {
  SmallConvNet net(Architecture{1, 8, 8, 3, 1}, 8);
  std::vector<Background> bgs = generate_backgrounds(1, 1, 8, 8, 0);
  AttackTarget target{&net, InterferenceConfig{}, bgs};
  Image x = Image::zeros(1, 8, 8);
  AttackConfig c;
  c.epsilon = 0.1f;
  CHECK_THROWS_AS(fgsm(x, 0, 0, target, c), ContractError);
  net.set_trainable(false);
  CHECK_THROWS_AS(fgsm(x, 3, 0, target, c), LabelError);
  CHECK_THROWS_AS(fgsm(x, -1, 0, target, c), LabelError);
  InterferenceConfig k2;
  k2.backgrounds = 2;
  AttackTarget mismatch{&net, k2, bgs};
  CHECK_THROWS_AS(fgsm(x, 0, 0, mismatch, c), ConfigError);
  AttackTarget empty;
  CHECK_THROWS_AS(fgsm(x, 0, 0, empty, c), ContractError);
}

TEST_CASE("box constraints hold for boundary and random images") {
  Rng rng(105);
  InterferenceConfig icfg{0.5f, 0.4f, 0.4f, 8, 2};
  SmallConvNet net = frozen_net(Architecture{1, 8, 8, 3, 8}, 9);
  auto bgs = generate_backgrounds(8, 1, 8, 8, 2);
  AttackTarget target{&net, icfg, bgs};
  std::vector<Image> imgs = random_images(rng, 30, {1, 8, 8});
  imgs.push_back(Image::zeros(1, 8, 8));
  Image ones = Image::zeros(1, 8, 8);
  std::fill(ones.values().begin(), ones.values().end(), 1.0f);
  imgs.push_back(ones);
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    labels.push_back(static_cast<int>(i % 3));
    ids.push_back(i);
  }
  std::size_t checked = 0;
  for (AttackMode mode : {AttackMode::inn1, AttackMode::inn2}) {
    for (float eps : {0.0f, 0.02f, 0.3f, 1.0f}) {
      AttackConfig c;
      c.epsilon = eps;
      c.iterations = 5;
      c.mode = mode;
      for (const auto& ex : pgd_many(imgs, labels, ids, target, c)) {
        check_box(ex, eps);
        ++checked;
      }
      c.random_start = true;
      for (const auto& ex : pgd_many(imgs, labels, ids, target, c)) {
        check_box(ex, eps);
        ++checked;
      }
      check_box(fgsm(imgs.back(), 0, 0, target, c), eps);
    }
  }
  CHECK(checked == 16 * imgs.size());
}

TEST_CASE("pgd is deterministic and invariant to batching and threads") {
  Rng rng(106);
  InterferenceConfig icfg{0.3f, 0.3f, 0.4f, 4, 4};
  SmallConvNet net = frozen_net(Architecture{1, 8, 8, 3, 4}, 10);
  auto bgs = generate_backgrounds(4, 1, 8, 8, 4);
  AttackTarget target{&net, icfg, bgs};
  std::vector<Image> imgs = random_images(rng, 13, {1, 8, 8});
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    labels.push_back(static_cast<int>(i % 3));
    ids.push_back(100 + i);
  }
  for (bool eot : {false, true}) {
    AttackConfig c;
    c.epsilon = 0.1f;
    c.iterations = 6;
    c.eot_resample = eot;
    c.seed = 77;
    auto ref = pgd_many(imgs, labels, ids, target, c, 1, 32);
    for (auto [threads, batch] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {3, 4}, {2, 13}, {4, 5}}) {
      auto other = pgd_many(imgs, labels, ids, target, c, threads, batch);
      for (std::size_t i = 0; i < imgs.size(); ++i) {
        REQUIRE(testutil::bit_equal(ref[i].perturbed.values(), other[i].perturbed.values()));
        REQUIRE(ref[i].achieved_loss == other[i].achieved_loss);
      }
    }
    AdversarialExample single = pgd(imgs[4], labels[4], ids[4], target, c);
    CHECK(testutil::bit_equal(single.perturbed.values(), ref[4].perturbed.values()));
  }
}

TEST_CASE("attacker realizations are fixed unless EOT resampling is on") {
  InterferenceConfig icfg{0.5f, 0.4f, 0.4f, 8, 1};
  SmallConvNet net = frozen_net(Architecture{1, 8, 8, 3, 8}, 11);
  auto bgs = generate_backgrounds(8, 1, 8, 8, 1);
  AttackTarget target{&net, icfg, bgs};
  AttackConfig c;
  c.seed = 9;
  auto r0 = attacker_realization(target, c, {1, 8, 8}, 3, 0);
  auto r5 = attacker_realization(target, c, {1, 8, 8}, 3, 5);
  CHECK(testutil::bit_equal(r0.white.data(), r5.white.data()));
  c.eot_resample = true;
  auto e0 = attacker_realization(target, c, {1, 8, 8}, 3, 0);
  auto e5 = attacker_realization(target, c, {1, 8, 8}, 3, 5);
  CHECK(testutil::bit_equal(e0.white.data(), r0.white.data()));
  CHECK_FALSE(testutil::bit_equal(e0.white.data(), e5.white.data()));
  // Attacker draws never reuse the defender's stream.
  auto defender = draw_realization(InterferenceConfig{0.5f, 0.4f, 0.4f, 8, 9}, {1, 8, 8}, NoiseStream::eval, 3, 0);
  CHECK_FALSE(testutil::bit_equal(defender.white.data(), r0.white.data()));
}

TEST_CASE("adversarial set encoding round trips and rejects damage") {
  Rng rng(107);
  AdversarialSet set;
  set.epsilon = 8.0f / 255.0f;
  set.iterations = 50;
  set.mode = AttackMode::inn2;
  set.snapshot_index = 2;
  set.seed = 0x1234567890ULL;
  for (std::uint32_t i = 0; i < 3; ++i) {
    set.ids.push_back(i * 7);
    set.images.emplace_back(testutil::random_tensor(rng, {3, 4, 5}, 0.0f, 1.0f));
  }
  const auto bytes = encode_adversarial_set(set);
  CHECK(bytes.size() == 4 + 4 + 4 + 4 + 4 + 4 + 8 + 4 + 12 + 3 * (4 + 60 * 4));
  AdversarialSet back = decode_adversarial_set(bytes);
  CHECK(back.epsilon == set.epsilon);
  CHECK(back.iterations == 50);
  CHECK(back.mode == AttackMode::inn2);
  CHECK(back.snapshot_index == 2);
  CHECK(back.seed == set.seed);
  CHECK(back.ids == set.ids);
  for (std::size_t i = 0; i < 3; ++i) CHECK(testutil::bit_equal(back.images[i].values(), set.images[i].values()));
  CHECK(encode_adversarial_set(back) == bytes);

  auto magic = bytes;
  magic[3] = 'B';
  CHECK_THROWS_AS(decode_adversarial_set(magic), FormatMagicError);
  auto version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(decode_adversarial_set(version), ParseError);
  auto mode = bytes;
  mode[16] = 5;
  CHECK_THROWS_AS(decode_adversarial_set(mode), ParseError);
  CHECK_THROWS_AS(decode_adversarial_set(std::span(bytes).first(bytes.size() - 3)), LengthMismatchError);
  auto trailing = bytes;
  trailing.push_back(1);
  CHECK_THROWS_AS(decode_adversarial_set(trailing), LengthMismatchError);
}

namespace {

const SmallConvNet& digit_model() {
  static const SmallConvNet m = [] {
    TrainConfig c;
    c.epochs = 2;
    c.seed = 5;
    return pretrain(make_synthetic_digits(1000, 0xa1, "train"), c, 10).model;
  }();
  return m;
}

}  // namespace

TEST_CASE("multi-step PGD dominates FGSM on a trained model") {
  const SmallConvNet& net = digit_model();
  Dataset test = make_synthetic_digits(200, 0xa2, "test");
  std::vector<Background> bgs = undefended_backgrounds({1, 28, 28});
  AttackTarget target{&net, InterferenceConfig{}, bgs};
  std::vector<std::uint64_t> ids(test.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  AttackConfig c;
  c.epsilon = 8.0f / 255.0f;
  c.iterations = 20;
  c.mode = AttackMode::inn2;
  auto p = pgd_many(test.images, test.labels, ids, target, c);
  std::size_t wins = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (p[i].achieved_loss >= fgsm(test.images[i], test.labels[i], i, target, c).achieved_loss) ++wins;
  }
  CHECK(static_cast<double>(wins) / static_cast<double>(test.size()) >= 0.9);
}

TEST_CASE("undefended accuracy does not rise with epsilon") {
  const SmallConvNet& net = digit_model();
  Dataset test = make_synthetic_digits(100, 0xa3, "test");
  std::vector<Background> bgs = undefended_backgrounds({1, 28, 28});
  AttackTarget target{&net, InterferenceConfig{}, bgs};
  std::vector<std::uint64_t> ids(test.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  double prev = 2.0;
  for (float k : {0.0f, 2.0f, 4.0f, 8.0f, 16.0f}) {
    AttackConfig c;
    c.epsilon = k / 255.0f;
    c.iterations = 20;
    c.mode = AttackMode::inn2;
    auto adv = pgd_many(test.images, test.labels, ids, target, c);
    std::vector<Image> imgs;
    for (auto& a : adv) imgs.push_back(a.perturbed);
    Dataset d = test;
    d.images = imgs;
    const double acc = plain_accuracy(net, d);
    CHECK(acc <= prev + 0.01);
    prev = acc;
  }
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "inn/ensemble.hpp"
#include "inn/errors.hpp"
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

SnapshotSet make_set(std::vector<SmallConvNet> models, const InterferenceConfig& icfg) {
  SnapshotSet s;
  s.meta.classes = models.front().arch().classes;
  s.meta.backgrounds = models.front().arch().backgrounds;
  s.meta.interference = icfg;
  s.snapshots = std::move(models);
  return s;
}

struct Fixture {
  InterferenceConfig icfg{0.5f, 0.4f, 0.4f, 4, 21};
  std::vector<Background> bgs = generate_backgrounds(4, 1, 8, 8, 21);
  std::vector<Image> images;
  std::vector<std::uint64_t> ids;

  explicit Fixture(std::size_t n) {
    Rng rng(55);
    for (std::size_t i = 0; i < n; ++i) {
      images.emplace_back(testutil::random_tensor(rng, {1, 8, 8}, 0.0f, 1.0f));
      ids.push_back(1000 + i);
    }
  }
};

// The defended prediction recomputed step by step for a single model.
ClassDistribution manual_distribution(const SmallConvNet& m, const Image& x, std::uint64_t id,
                                      const InterferenceConfig& icfg, std::span<const Background> bgs,
                                      std::uint64_t seed) {
  InterferenceConfig c = icfg;
  c.master_seed = seed;
  NoiseRealization r = draw_realization(c, x.shape(), NoiseStream::eval, id, 0);
  Image blended = apply_interference(x, c, bgs, r).pixels;
  Tape tape(Tape::Mode::inference);
  Tensor logits = m.forward(tape, stack_images(std::span(&blended, 1)));
  ClassDistribution d;
  d.probs = ops::softmax_rows(logits);
  d.classes = static_cast<int>(m.arch().classes);
  d.backgrounds = static_cast<int>(m.arch().backgrounds);
  return d;
}

}  // namespace

TEST_CASE("argmax takes the smallest index on ties") {
  std::vector<float> v{0.1f, 0.4f, 0.4f, 0.1f};
  CHECK(argmax_first(v) == 1);
  std::vector<float> flat(5, 0.2f);
  CHECK(argmax_first(flat) == 0);
  ClassDistribution d{{0.25f, 0.25f, 0.25f, 0.25f}, 2, 2};
  CHECK(d.base_argmax() == 0);
}

TEST_CASE("marginal base probabilities match brute-force sums") {
  Rng rng(1);
  for (int n = 1; n <= 10; ++n) {
    for (int k = 1; k <= 8; ++k) {
      Tensor logits = testutil::random_tensor(rng, {1, static_cast<std::size_t>(n * k)}, -8.0f, 8.0f);
      ClassDistribution d{ops::softmax_rows(logits), n, k};
      std::vector<float> base = d.base_probabilities();
      REQUIRE(base.size() == static_cast<std::size_t>(n));
      double total = 0.0;
      for (int c = 0; c < n; ++c) {
        double brute = 0.0;
        for (std::size_t j = 0; j < d.probs.size(); ++j) {
          if (static_cast<int>(j) / k == c) brute += d.probs[j];
        }
        REQUIRE(std::fabs(base[static_cast<std::size_t>(c)] - brute) <= 1e-6);
        total += base[static_cast<std::size_t>(c)];
      }
      REQUIRE(std::fabs(total - 1.0) <= 1e-5);
    }
  }
}

TEST_CASE("marginalization ignores the order of background slots") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 10, k = 8;
    Tensor logits = testutil::random_tensor(rng, {1, 80}, -4.0f, 4.0f);
    ClassDistribution d{ops::softmax_rows(logits), n, k};
    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    ClassDistribution p = d;
    for (int c = 0; c < n; ++c) {
      for (int j = 0; j < k; ++j) p.probs[static_cast<std::size_t>(c * k + perm[j])] = d.probs[static_cast<std::size_t>(c * k + j)];
    }
    auto a = d.base_probabilities();
    auto b = p.base_probabilities();
    for (int c = 0; c < n; ++c) REQUIRE(a[c] == doctest::Approx(b[c]).epsilon(1e-6));
    REQUIRE(d.base_argmax() == p.base_argmax());
  }
}

TEST_CASE("a single-snapshot ensemble is that snapshot's own prediction") {
  Fixture f(100);
  SmallConvNet m = frozen_net(Architecture{1, 8, 8, 3, 4}, 3);
  SnapshotSet set = make_set({m}, f.icfg);
  auto preds = defended_predict_many(f.images, f.ids, set, f.icfg, f.bgs, 9);
  for (std::size_t i = 0; i < f.images.size(); ++i) {
    ClassDistribution d = manual_distribution(m, f.images[i], f.ids[i], f.icfg, f.bgs, 9);
    REQUIRE(testutil::bit_equal(preds[i].distribution.probs, d.probs));
    REQUIRE(preds[i].base_class == d.base_argmax());
    REQUIRE(preds[i].max_probability == d.base_probabilities()[static_cast<std::size_t>(d.base_argmax())]);
  }
}

TEST_CASE("soft voting averages snapshot distributions") {
  Fixture f(20);
  SmallConvNet a = frozen_net(Architecture{1, 8, 8, 3, 4}, 4);
  SmallConvNet b = frozen_net(Architecture{1, 8, 8, 3, 4}, 5);
  SnapshotSet twins = make_set({a, a}, f.icfg);
  SnapshotSet pair = make_set({a, b}, f.icfg);
  for (std::size_t i = 0; i < f.images.size(); ++i) {
    Prediction single = defended_predict(f.images[i], f.ids[i], make_set({a}, f.icfg), f.icfg, f.bgs, 2);
    Prediction doubled = defended_predict(f.images[i], f.ids[i], twins, f.icfg, f.bgs, 2);
    CHECK(testutil::bit_equal(single.distribution.probs, doubled.distribution.probs));

    Prediction mixed = defended_predict(f.images[i], f.ids[i], pair, f.icfg, f.bgs, 2);
    ClassDistribution da = manual_distribution(a, f.images[i], f.ids[i], f.icfg, f.bgs, 2);
    ClassDistribution db = manual_distribution(b, f.images[i], f.ids[i], f.icfg, f.bgs, 2);
    double total = 0.0;
    for (std::size_t j = 0; j < da.probs.size(); ++j) {
      const float want = (da.probs[j] + db.probs[j]) / 2.0f;
      CHECK(mixed.distribution.probs[j] == doctest::Approx(want).epsilon(1e-6));
      CHECK(mixed.distribution.probs[j] >= 0.0f);
      total += mixed.distribution.probs[j];
    }
    CHECK(std::fabs(total - 1.0) <= 1e-5);
  }
}

TEST_CASE("batched prediction is independent of batching and threads") {
  Fixture f(37);
  SnapshotSet set = make_set({frozen_net(Architecture{1, 8, 8, 3, 4}, 6), frozen_net(Architecture{1, 8, 8, 3, 4}, 7)},
                             f.icfg);
  auto ref = defended_predict_many(f.images, f.ids, set, f.icfg, f.bgs, 3, 1, 64);
  auto other = defended_predict_many(f.images, f.ids, set, f.icfg, f.bgs, 3, 3, 5);
  for (std::size_t i = 0; i < f.images.size(); ++i) {
    CHECK(testutil::bit_equal(ref[i].distribution.probs, other[i].distribution.probs));
    Prediction one = defended_predict(f.images[i], f.ids[i], set, f.icfg, f.bgs, 3);
    CHECK(testutil::bit_equal(ref[i].distribution.probs, one.distribution.probs));
  }
}

TEST_CASE("ensemble configuration mismatches are rejected") {
  Fixture f(2);
  SmallConvNet m = frozen_net(Architecture{1, 8, 8, 3, 4}, 8);
  SnapshotSet set = make_set({m}, f.icfg);
  InterferenceConfig other = f.icfg;
  other.alpha = 0.3f;
  CHECK_THROWS_AS(defended_predict(f.images[0], 0, set, other, f.bgs, 1), ConfigError);
  other = f.icfg;
  other.backgrounds = 2;
  CHECK_THROWS_AS(defended_predict(f.images[0], 0, set, other, std::span(f.bgs).first(2), 1), ConfigError);
  CHECK_THROWS_AS(defended_predict(f.images[0], 0, set, f.icfg, std::span(f.bgs).first(3), 1), ConfigError);
  SnapshotSet empty;
  empty.meta = set.meta;
  CHECK_THROWS_AS(defended_predict(f.images[0], 0, empty, f.icfg, f.bgs, 1), ContractError);
  CHECK_THROWS_AS(undefended_ensemble(m), ConfigError);
}

TEST_CASE("accuracy against an oracle labelling and a permuted labelling") {
  Fixture f(60);
  SmallConvNet m = frozen_net(Architecture{1, 8, 8, 3, 4}, 9);
  SnapshotSet set = make_set({m}, f.icfg);
  auto preds = defended_predict_many(f.images, f.ids, set, f.icfg, f.bgs, 4);
  std::vector<int> oracle;
  for (const auto& p : preds) oracle.push_back(p.base_class);
  EvalResult perfect = evaluate(f.images, oracle, f.ids, set, f.icfg, f.bgs, 4);
  CHECK(perfect.accuracy == 1.0f);
  CHECK(perfect.correct == 60);

  // Permutation with fixed point 1: 0 -> 2, 1 -> 1, 2 -> 0.
  const int perm[3] = {2, 1, 0};
  std::vector<int> permuted;
  std::size_t fixed = 0;
  for (int y : oracle) {
    permuted.push_back(perm[y]);
    if (perm[y] == y) ++fixed;
  }
  EvalResult partial = evaluate(f.images, permuted, f.ids, set, f.icfg, f.bgs, 4, 2);
  CHECK(partial.correct == fixed);
  CHECK(partial.accuracy == static_cast<float>(fixed) / 60.0f);
  REQUIRE(partial.records.size() == 60);
  CHECK(partial.records[5].id == f.ids[5]);
  CHECK(partial.records[5].true_label == permuted[5]);
  CHECK(partial.records[5].predicted == oracle[5]);

  CHECK_THROWS_AS(evaluate({}, {}, {}, set, f.icfg, f.bgs, 4), ContractError);
  CHECK_THROWS_AS(evaluate(f.images, std::span(oracle).first(59), f.ids, set, f.icfg, f.bgs, 4), LabelError);
  std::vector<int> bad = oracle;
  bad[3] = 3;
  CHECK_THROWS_AS(evaluate(f.images, bad, f.ids, set, f.icfg, f.bgs, 4), LabelError);
}

TEST_CASE("evaluation log lines") {
  EvalResult r;
  r.records = {{7, 3, 1, 0.5f}, {8, 0, 0, 1.0f / 3.0f}};
  CHECK(render_eval_log(r) == "7,3,1,0.500000\n8,0,0,0.333333\n");
}

TEST_CASE("undefended ensemble is the identity transform with one zero background") {
  SmallConvNet m = frozen_net(Architecture{1, 8, 8, 3, 1}, 10);
  SnapshotSet set = undefended_ensemble(m);
  CHECK(set.size() == 1);
  CHECK(undefended_interference().is_identity());
  auto bgs = undefended_backgrounds({1, 8, 8});
  REQUIRE(bgs.size() == 1);
  for (float v : bgs[0].pixels.values()) CHECK(v == 0.0f);

  Fixture f(10);
  for (std::size_t i = 0; i < f.images.size(); ++i) {
    Prediction p = defended_predict(f.images[i], f.ids[i], set, undefended_interference(), bgs, 1);
    Tape tape(Tape::Mode::inference);
    auto probs = ops::softmax_rows(m.forward(tape, stack_images(std::span(&f.images[i], 1))));
    CHECK(testutil::bit_equal(p.distribution.probs, probs));
  }
}

TEST_CASE("curve mode names") {
  CHECK(to_string(CurveMode::undefended) == "undefended");
  CHECK(curve_mode_from_string("INN1") == CurveMode::inn1);
  CHECK_THROWS(curve_mode_from_string("inn9"));
}

TEST_CASE("robustness curve rows, CSV layout and determinism") {
  Fixture f(12);
  std::vector<int> labels;
  for (std::size_t i = 0; i < f.images.size(); ++i) labels.push_back(static_cast<int>(i % 3));
  SnapshotSet set = make_set({frozen_net(Architecture{1, 8, 8, 3, 4}, 11), frozen_net(Architecture{1, 8, 8, 3, 4}, 12),
                              frozen_net(Architecture{1, 8, 8, 3, 4}, 13)},
                             f.icfg);
  SmallConvNet plain = frozen_net(Architecture{1, 8, 8, 3, 1}, 14);
  auto zero_bg = undefended_backgrounds({1, 8, 8});
  CurveInputs in;
  in.images = f.images;
  in.labels = labels;
  in.image_ids = f.ids;
  in.defended = &set;
  in.interference = f.icfg;
  in.backgrounds = f.bgs;
  in.undefended = &plain;
  AttackConfig tmpl;
  tmpl.iterations = 3;
  tmpl.seed = 5;
  std::vector<float> eps{0.3f, 0.0f, 0.1f};
  std::vector<CurveMode> modes{CurveMode::undefended, CurveMode::inn1, CurveMode::inn2};
  std::size_t observed = 0;
  RobustnessCurve c = robustness_curve(eps, modes, in, tmpl, 7, 1,
                                       [&](const CurveRow& row, const AdversarialSet& adv, const EvalResult& ev) {
                                         ++observed;
                                         CHECK(adv.images.size() == 12);
                                         CHECK(adv.epsilon == row.epsilon);
                                         CHECK(ev.accuracy == row.accuracy);
                                       });
  REQUIRE(c.rows.size() == 9);
  CHECK(observed == 6);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(c.rows[i].mode == static_cast<CurveMode>(i / 3));
    CHECK(c.rows[i].n_images == 12);
    CHECK(c.rows[i].seed == 7);
    if (i % 3 != 0) CHECK(c.rows[i].epsilon > c.rows[i - 1].epsilon);
  }

  const float clean_defended = evaluate(f.images, labels, f.ids, set, f.icfg, f.bgs, 7).accuracy;
  const float clean_plain =
      evaluate(f.images, labels, f.ids, undefended_ensemble(plain), undefended_interference(), zero_bg, 7).accuracy;
  CHECK(c.find(CurveMode::inn1, 0.0f)->accuracy == clean_defended);
  CHECK(c.find(CurveMode::inn2, 0.0f)->accuracy == clean_defended);
  CHECK(c.find(CurveMode::undefended, 0.0f)->accuracy == clean_plain);
  CHECK(c.find(CurveMode::inn1, 0.5f) == nullptr);

  const std::string csv = c.to_csv();
  CHECK(csv.rfind("epsilon,mode,top1_base_accuracy,n_images,seed\n", 0) == 0);
  CHECK(csv.find("0.000000,INN1,") != std::string::npos);
  CHECK(csv.find("0.300000,undefended,") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);

  RobustnessCurve again = robustness_curve(eps, modes, in, tmpl, 7, 3);
  CHECK(again.to_csv() == csv);

  CHECK_THROWS(robustness_curve(std::vector<float>{}, modes, in, tmpl, 7));
}

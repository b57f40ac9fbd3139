#include "inn/grad_suite.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>

#include "inn/interference.hpp"
#include "inn/model.hpp"
#include "inn/ops.hpp"
#include "inn/rng.hpp"

namespace inn {

namespace {

Tensor uniform_tensor(Rng& rng, const Shape& shape, float lo, float hi) {
  Tensor t(shape);
  for (float& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Magnitudes in [0.05, 1] with random sign, so a 1e-3 step never crosses zero.
Tensor away_from_zero(Rng& rng, const Shape& shape) {
  Tensor t(shape);
  for (float& v : t.data()) {
    const float m = 0.05f + 0.95f * rng.uniform();
    v = rng.bernoulli(0.5f) ? m : -m;
  }
  return t;
}

// A random permutation of an evenly spaced grid: every pair of entries differs
// by at least 0.01, so a 1e-3 step never changes a window's argmax.
Tensor distinct_values(Rng& rng, const Shape& shape) {
  Tensor t(shape);
  std::vector<std::size_t> order(t.numel());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng.engine());
  for (std::size_t i = 0; i < order.size(); ++i) t[i] = -1.0f + 0.01f * static_cast<float>(order[i]);
  return t;
}

// sum(y * weights) with a fixed random weighting, reducing any op to a scalar.
Tensor weighted_sum(Tape& tape, const Tensor& y, const Tensor& weights) {
  return ops::sum(tape, ops::mul(tape, y, weights));
}

using Case = std::function<GradCheckReport(std::uint64_t seed, const GradCheckOptions&)>;

struct NamedCase {
  std::string name;
  Case run;
};

std::vector<NamedCase> cases() {
  std::vector<NamedCase> out;
  out.push_back({"add", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 1});
                   Tensor a = uniform_tensor(rng, {3, 5}, -1, 1), b = uniform_tensor(rng, {3, 5}, -1, 1);
                   Tensor w = uniform_tensor(rng, {3, 5}, -1, 1);
                   return grad_check([&](Tape& t, const Tensor& x) { return weighted_sum(t, ops::add(t, x, b), w); },
                                     a, o);
                 }});
  out.push_back({"mul", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 2});
                   Tensor a = uniform_tensor(rng, {4, 6}, -1, 1), b = away_from_zero(rng, {4, 6});
                   Tensor w = away_from_zero(rng, {4, 6});
                   return grad_check([&](Tape& t, const Tensor& x) { return weighted_sum(t, ops::mul(t, x, b), w); },
                                     a, o);
                 }});
  out.push_back({"scale", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 3});
                   Tensor a = uniform_tensor(rng, {10}, -1, 1), w = away_from_zero(rng, {10});
                   const float f = 0.5f + rng.uniform();
                   return grad_check([&](Tape& t, const Tensor& x) { return weighted_sum(t, ops::scale(t, x, f), w); },
                                     a, o);
                 }});
  out.push_back({"sum", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 4});
                   Tensor a = uniform_tensor(rng, {2, 3, 4}, -1, 1);
                   return grad_check([&](Tape& t, const Tensor& x) { return ops::sum(t, x); }, a, o);
                 }});
  out.push_back({"relu", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 5});
                   Tensor a = away_from_zero(rng, {6, 7}), w = away_from_zero(rng, {6, 7});
                   return grad_check([&](Tape& t, const Tensor& x) { return weighted_sum(t, ops::relu(t, x), w); }, a,
                                     o);
                 }});
  out.push_back({"conv2d.input", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 6});
                   Tensor x = uniform_tensor(rng, {2, 3, 6, 6}, -1, 1), k = uniform_tensor(rng, {4, 3, 3, 3}, -1, 1);
                   Tensor b = uniform_tensor(rng, {4}, -1, 1), w = away_from_zero(rng, {2, 4, 6, 6});
                   return grad_check(
                       [&](Tape& t, const Tensor& v) { return weighted_sum(t, ops::conv2d(t, v, k, b, 1, 1), w); }, x,
                       o);
                 }});
  out.push_back({"conv2d.kernel", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 7});
                   Tensor x = uniform_tensor(rng, {2, 2, 7, 7}, -1, 1), k = uniform_tensor(rng, {3, 2, 3, 3}, -1, 1);
                   Tensor b = uniform_tensor(rng, {3}, -1, 1), w = away_from_zero(rng, {2, 3, 3, 3});
                   return grad_check(
                       [&](Tape& t, const Tensor& v) { return weighted_sum(t, ops::conv2d(t, x, v, b, 2, 0), w); }, k,
                       o);
                 }});
  out.push_back({"conv2d.bias", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 8});
                   Tensor x = uniform_tensor(rng, {2, 2, 5, 5}, -1, 1), k = uniform_tensor(rng, {3, 2, 3, 3}, -1, 1);
                   Tensor b = uniform_tensor(rng, {3}, -1, 1), w = away_from_zero(rng, {2, 3, 5, 5});
                   return grad_check(
                       [&](Tape& t, const Tensor& v) { return weighted_sum(t, ops::conv2d(t, x, k, v, 1, 1), w); }, b,
                       o);
                 }});
  out.push_back({"maxpool2d", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 9});
                   Tensor x = distinct_values(rng, {2, 2, 6, 6}), w = away_from_zero(rng, {2, 2, 3, 3});
                   return grad_check([&](Tape& t, const Tensor& v) { return weighted_sum(t, ops::maxpool2d(t, v, 2), w); },
                                     x, o);
                 }});
  out.push_back({"flatten", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 10});
                   Tensor x = uniform_tensor(rng, {3, 2, 2, 2}, -1, 1), w = away_from_zero(rng, {3, 8});
                   return grad_check([&](Tape& t, const Tensor& v) { return weighted_sum(t, ops::flatten(t, v), w); }, x,
                                     o);
                 }});
  out.push_back({"dense.input", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 11});
                   Tensor x = uniform_tensor(rng, {4, 7}, -1, 1), wt = uniform_tensor(rng, {7, 5}, -1, 1);
                   Tensor b = uniform_tensor(rng, {5}, -1, 1), w = away_from_zero(rng, {4, 5});
                   return grad_check([&](Tape& t, const Tensor& v) { return weighted_sum(t, ops::dense(t, v, wt, b), w); },
                                     x, o);
                 }});
  out.push_back({"dense.weight", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 12});
                   Tensor x = uniform_tensor(rng, {4, 7}, -1, 1), wt = uniform_tensor(rng, {7, 5}, -1, 1);
                   Tensor b = uniform_tensor(rng, {5}, -1, 1), w = away_from_zero(rng, {4, 5});
                   return grad_check([&](Tape& t, const Tensor& v) { return weighted_sum(t, ops::dense(t, x, v, b), w); },
                                     wt, o);
                 }});
  out.push_back({"dense.bias", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 13});
                   Tensor x = uniform_tensor(rng, {4, 7}, -1, 1), wt = uniform_tensor(rng, {7, 5}, -1, 1);
                   Tensor b = uniform_tensor(rng, {5}, -1, 1), w = away_from_zero(rng, {4, 5});
                   return grad_check([&](Tape& t, const Tensor& v) { return weighted_sum(t, ops::dense(t, x, wt, v), w); },
                                     b, o);
                 }});
  out.push_back({"softmax_cross_entropy", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 14});
                   Tensor z = uniform_tensor(rng, {5, 6}, -3, 3);
                   std::vector<int> labels(5);
                   for (int& l : labels) l = static_cast<int>(rng.below(6));
                   return grad_check([&](Tape& t, const Tensor& v) { return ops::softmax_cross_entropy(t, v, labels); },
                                     z, o);
                 }});
  out.push_back({"marginal_cross_entropy", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 15});
                   Tensor z = uniform_tensor(rng, {5, 12}, -3, 3);
                   std::vector<int> labels(5);
                   for (int& l : labels) l = static_cast<int>(rng.below(4));
                   return grad_check(
                       [&](Tape& t, const Tensor& v) { return ops::marginal_cross_entropy(t, v, labels, 3); }, z, o);
                 }});
  out.push_back({"interfere", [](std::uint64_t s, const GradCheckOptions& o) {
                   Rng rng({s, 16});
                   InterferenceConfig cfg{0.5f, 0.4f, 0.4f, 3, s};
                   const auto bgs = generate_backgrounds(3, 2, 6, 6, s);
                   Tensor x = uniform_tensor(rng, {2, 2, 6, 6}, 0, 1), w = away_from_zero(rng, {2, 2, 6, 6});
                   std::vector<NoiseRealization> rs;
                   for (std::uint64_t i = 0; i < 2; ++i) rs.push_back(draw_realization(cfg, {2, 6, 6}, NoiseStream::train, i, 0));
                   return grad_check(
                       [&](Tape& t, const Tensor& v) { return weighted_sum(t, interfere(t, v, cfg, bgs, rs), w); }, x,
                       o);
                 }});
  // The full network loss on a small geometry with composite labels, checked
  // for the input and for parameters. The forward mirrors SmallConvNet and
  // records relu signs and pool argmaxes so kink-straddling steps are skipped.
  auto network_case = [](std::uint64_t s, GradCheckOptions o, int which) {
    const Architecture arch{1, 8, 8, 3, 2};
    SmallConvNet net(arch, derive_seed({s, 17}));
    Rng rng({s, 18});
    Tensor x = uniform_tensor(rng, {2, 1, 8, 8}, 0, 1);
    std::vector<int> labels = {static_cast<int>(rng.below(6)), static_cast<int>(rng.below(6))};
    auto pattern = std::make_shared<std::vector<std::uint8_t>>();
    const auto& params = net.named_parameters();
    const std::size_t idx = which < 0 ? params.size() : static_cast<std::size_t>(which);
    auto loss = [&, pattern](Tape& t, const Tensor& v) {
      const Tensor& input = which < 0 ? v : x;
      auto p = [&](std::size_t i) -> const Tensor& { return i == idx ? v : params[i].value; };
      pattern->clear();
      auto signs = [&](const Tensor& pre) {
        for (float z : pre.data()) pattern->push_back(z > 0.0f ? 1 : 0);
        return ops::relu(t, pre);
      };
      Tensor h = signs(ops::conv2d(t, input, p(0), p(1), 1, 1));
      h = signs(ops::conv2d(t, h, p(2), p(3), 1, 1));
      const std::size_t planes = h.dim(0) * h.dim(1), hh = h.dim(2), ww = h.dim(3);
      for (std::size_t q = 0; q < planes; ++q) {
        for (std::size_t i = 0; i < hh; i += 2) {
          for (std::size_t j = 0; j < ww; j += 2) {
            std::uint8_t best = 0;
            float m = h[(q * hh + i) * ww + j];
            for (std::uint8_t d = 1; d < 4; ++d) {
              const float z = h[(q * hh + i + d / 2) * ww + j + d % 2];
              if (z > m) m = z, best = d;
            }
            pattern->push_back(best);
          }
        }
      }
      h = ops::flatten(t, ops::maxpool2d(t, h, 2));
      h = signs(ops::dense(t, h, p(4), p(5)));
      return ops::softmax_cross_entropy(t, ops::dense(t, h, p(6), p(7)), labels);
    };
    o.pattern = [pattern] { return *pattern; };
    return grad_check(loss, which < 0 ? x : params[idx].value, o);
  };
  out.push_back({"small_conv_net.input", [=](std::uint64_t s, const GradCheckOptions& o) { return network_case(s, o, -1); }});
  out.push_back({"small_conv_net.conv1.weight",
                 [=](std::uint64_t s, const GradCheckOptions& o) { return network_case(s, o, 0); }});
  out.push_back({"small_conv_net.fc1.weight",
                 [=](std::uint64_t s, const GradCheckOptions& o) { return network_case(s, o, 4); }});
  return out;
}

}  // namespace

std::vector<OpGradResult> run_grad_suite(std::size_t seeds, std::uint64_t first_seed, const GradCheckOptions& base) {
  std::vector<OpGradResult> results;
  for (const auto& c : cases()) {
    OpGradResult r;
    r.op = c.name;
    for (std::size_t i = 0; i < seeds; ++i) {
      const std::uint64_t seed = first_seed + i;
      GradCheckOptions o = base;
      o.seed = derive_seed({base.seed, seed});
      const GradCheckReport rep = c.run(seed, o);
      r.coordinates_checked += rep.coordinates_checked;
      r.coordinates_skipped += rep.coordinates_skipped;
      r.coordinates_floored += rep.coordinates_floored;
      if (i == 0 || rep.max_relative_error > r.worst_relative_error) {
        r.worst_relative_error = rep.max_relative_error;
        r.worst_seed = seed;
        r.worst_analytic = rep.worst_analytic;
        r.worst_numeric = rep.worst_numeric;
      }
    }
    results.push_back(r);
  }
  return results;
}

}  // namespace inn

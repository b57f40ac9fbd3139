#include "inn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "inn/errors.hpp"
#include "inn/rng.hpp"

namespace inn {

namespace {
float evaluate(const ScalarFn& f, const Tensor& x) {
  Tape tape(Tape::Mode::inference);
  Tensor out = f(tape, x);
  if (out.numel() != 1) throw ContractError("grad_check: function must return a scalar, got " + shape_str(out.shape()));
  return out.item();
}
}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const Tensor& point, const GradCheckOptions& options) {
  if (!(options.epsilon > 0.0f)) throw ConfigError("grad_check: epsilon must be positive");

  Tensor x = point.clone();
  x.set_requires_grad(false);
  const float first = evaluate(f, x);
  const float second = evaluate(f, x);
  if (std::memcmp(&first, &second, sizeof(float)) != 0) {
    throw DeterminismError("grad_check: function returned " + std::to_string(first) + " then " +
                           std::to_string(second) + " for the same input");
  }

  Tensor tracked = point.clone();
  tracked.set_requires_grad(true);
  std::vector<float> analytic;
  {
    Tape tape;
    Tensor loss = f(tape, tracked);
    tape.backward(loss);
    analytic.assign(tracked.grad().begin(), tracked.grad().end());
  }

  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (coords.size() > options.max_coordinates) {
    Rng rng(options.seed);
    for (std::size_t i = 0; i < options.max_coordinates; ++i) {
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    }
    coords.resize(options.max_coordinates);
  }

  std::vector<std::uint8_t> base_pattern;
  if (options.pattern) {
    evaluate(f, x);
    base_pattern = options.pattern();
  }

  GradCheckReport report;
  auto values = x.data();
  for (std::size_t c : coords) {
    const float original = values[c];
    values[c] = original + options.epsilon;
    const float plus = evaluate(f, x);
    const bool kink_plus = options.pattern && options.pattern() != base_pattern;
    values[c] = original - options.epsilon;
    const float minus = evaluate(f, x);
    const bool kink_minus = options.pattern && options.pattern() != base_pattern;
    values[c] = original;
    if (kink_plus || kink_minus) {
      ++report.coordinates_skipped;
      continue;
    }
    // The realized step may differ from 2*epsilon after f32 rounding.
    const float step = (original + options.epsilon) - (original - options.epsilon);
    const float numeric = (plus - minus) / step;
    const float a = analytic[c];
    const float big = std::max(std::fabs(plus), std::fabs(minus));
    const float resolution = (std::nextafter(big, INFINITY) - big) / step;
    const float floor = std::max(options.resolution_floor * resolution, 1e-8f);
    const float denom = std::max({std::fabs(a), std::fabs(numeric), floor});
    if (denom == floor) ++report.coordinates_floored;
    const float rel = std::fabs(a - numeric) / denom;
    if (rel > report.max_relative_error || report.coordinates_checked == 0) {
      report.max_relative_error = rel;
      report.worst_coordinate = c;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
    ++report.coordinates_checked;
  }
  return report;
}

}  // namespace inn

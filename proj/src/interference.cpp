#include "inn/interference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "inn/errors.hpp"
#include "inn/rng.hpp"

namespace inn {

Image::Image(Tensor pixels) : pixels_(std::move(pixels)) {
  if (pixels_.rank() != 3) throw DimensionError("image must be [C,H,W], got " + shape_str(pixels_.shape()));
}

void InterferenceConfig::validate() const {
  if (!(alpha >= 0.0f)) throw ConfigError("alpha must be >= 0, got " + std::to_string(alpha));
  if (!(beta >= 0.0f)) throw ConfigError("beta must be >= 0, got " + std::to_string(beta));
  if (!(gamma >= 0.0f && gamma <= 1.0f)) throw ConfigError("gamma must lie in [0,1], got " + std::to_string(gamma));
  if (backgrounds < 1) throw ConfigError("K must be >= 1, got " + std::to_string(backgrounds));
}

NoiseRealization draw_realization(const InterferenceConfig& cfg, const Shape& image_shape, NoiseStream stream,
                                  std::uint64_t image_id, std::uint64_t counter) {
  cfg.validate();
  if (image_shape.size() != 3) throw DimensionError("realization needs a [C,H,W] shape, got " + shape_str(image_shape));
  const auto s = static_cast<std::uint64_t>(stream);
  NoiseRealization r;
  r.white = Tensor(image_shape);
  Rng white_rng({cfg.master_seed, s, image_id, counter, 0});
  for (auto& v : r.white.data()) v = white_rng.uniform_open();

  const std::size_t plane = image_shape[1] * image_shape[2];
  r.sp_mask.resize(plane);
  r.sp_value.resize(plane);
  Rng sp_rng({cfg.master_seed, s, image_id, counter, 1});
  for (std::size_t i = 0; i < plane; ++i) {
    r.sp_mask[i] = sp_rng.bernoulli(cfg.gamma) ? 1 : 0;
    r.sp_value[i] = sp_rng.bernoulli(0.5f) ? 1 : 0;
  }
  Rng bg_rng({cfg.master_seed, s, image_id, counter, 2});
  r.background_index = static_cast<int>(bg_rng.below(static_cast<std::uint64_t>(cfg.backgrounds)));
  return r;
}

Image white_noise(const Image& x, float beta, const Tensor& white) {
  if (!(beta >= 0.0f)) throw ConfigError("white noise intensity beta must be >= 0, got " + std::to_string(beta));
  if (white.shape() != x.shape()) {
    throw DimensionError("white noise shape " + shape_str(white.shape()) + " does not match image " +
                         shape_str(x.shape()));
  }
  Image out = Image::zeros(x.channels(), x.height(), x.width());
  auto o = out.values();
  auto in = x.values();
  auto n = white.data();
  const float denom = 1.0f + beta;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (in[i] + beta * n[i]) / denom;
  return out;
}

Image salt_pepper(const Image& x, float gamma, std::span<const std::uint8_t> sp_mask,
                  std::span<const std::uint8_t> sp_value) {
  if (!(gamma >= 0.0f && gamma <= 1.0f)) {
    throw ConfigError("salt-and-pepper intensity gamma must lie in [0,1], got " + std::to_string(gamma));
  }
  const std::size_t plane = x.height() * x.width();
  if (sp_mask.size() != plane || sp_value.size() != plane) {
    throw DimensionError("salt-and-pepper mask covers " + std::to_string(sp_mask.size()) + " pixels, image plane has " +
                         std::to_string(plane));
  }
  Image out(x.pixels().clone());
  auto o = out.values();
  for (std::size_t c = 0; c < x.channels(); ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      if (sp_mask[p]) o[c * plane + p] = sp_value[p] ? 1.0f : 0.0f;
    }
  }
  return out;
}

Image overlay(const Image& x_prime, const Background& bg, float alpha) {
  if (!(alpha >= 0.0f)) throw ConfigError("background scale alpha must be >= 0, got " + std::to_string(alpha));
  if (bg.pixels.shape() != x_prime.shape()) {
    throw DimensionError("background shape " + shape_str(bg.pixels.shape()) + " does not match image " +
                         shape_str(x_prime.shape()));
  }
  Image out = Image::zeros(x_prime.channels(), x_prime.height(), x_prime.width());
  auto o = out.values();
  auto in = x_prime.values();
  auto y = bg.pixels.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] + alpha * y[i];
  return out;
}

namespace {
const Background& pick_background(const InterferenceConfig& cfg, std::span<const Background> backgrounds,
                                  const NoiseRealization& r) {
  if (static_cast<int>(backgrounds.size()) != cfg.backgrounds) {
    throw ConfigError("configuration has K=" + std::to_string(cfg.backgrounds) + " but " +
                      std::to_string(backgrounds.size()) + " backgrounds were supplied");
  }
  if (r.background_index < 0 || r.background_index >= cfg.backgrounds) {
    throw LabelError("realization background index " + std::to_string(r.background_index) + " outside [0," +
                     std::to_string(cfg.backgrounds) + ")");
  }
  return backgrounds[static_cast<std::size_t>(r.background_index)];
}
}  // namespace

BlendedInput apply_interference(const Image& x, const InterferenceConfig& cfg, std::span<const Background> backgrounds,
                                const NoiseRealization& realization) {
  cfg.validate();
  const Background& bg = pick_background(cfg, backgrounds, realization);
  Image noisy = white_noise(x, cfg.beta, realization.white);
  Image impulsed = salt_pepper(noisy, cfg.gamma, realization.sp_mask, realization.sp_value);
  return BlendedInput{overlay(impulsed, bg, cfg.alpha), realization};
}

Tensor interfere(Tape& tape, const Tensor& batch, const InterferenceConfig& cfg, std::span<const Background> backgrounds,
                 std::span<const NoiseRealization> realizations) {
  if (batch.rank() != 4) throw DimensionError("interfere expects [B,C,H,W], got " + shape_str(batch.shape()));
  const std::size_t b = batch.dim(0);
  if (realizations.size() != b) {
    throw DimensionError("interfere: " + std::to_string(realizations.size()) + " realizations for batch axis 0 of " +
                         std::to_string(b));
  }
  Tensor out(batch.shape());
  const std::size_t per_image = batch.numel() / b;
  for (std::size_t i = 0; i < b; ++i) {
    BlendedInput blended = apply_interference(image_from_batch(batch, i), cfg, backgrounds, realizations[i]);
    std::copy(blended.pixels.values().begin(), blended.pixels.values().end(), out.data().begin() + i * per_image);
  }
  check_finite(out.data(), "interfere");
  if (tape.tracks({&batch})) {
    std::vector<std::uint8_t> masks;
    masks.reserve(b * batch.dim(2) * batch.dim(3));
    for (const auto& r : realizations) masks.insert(masks.end(), r.sp_mask.begin(), r.sp_mask.end());
    const float scale = 1.0f / (1.0f + cfg.beta);
    const std::size_t channels = batch.dim(1);
    tape.record(out, [batch, masks = std::move(masks), scale, b, channels](std::span<const float> g) {
      auto gx = batch.grad_buffer();
      const std::size_t plane = g.size() / (b * channels);
      for (std::size_t i = 0; i < b; ++i) {
        const std::uint8_t* mask = masks.data() + i * plane;
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t base = (i * channels + c) * plane;
          for (std::size_t p = 0; p < plane; ++p) {
            if (!mask[p]) gx[base + p] += g[base + p] * scale;
          }
        }
      }
    });
  }
  return out;
}

int encode_label(int base_class, int background_index, int backgrounds) {
  if (backgrounds < 1) throw LabelError("K must be >= 1, got " + std::to_string(backgrounds));
  if (base_class < 0) throw LabelError("base class must be >= 0, got " + std::to_string(base_class));
  if (background_index < 0 || background_index >= backgrounds) {
    throw LabelError("background index " + std::to_string(background_index) + " outside [0," +
                     std::to_string(backgrounds) + ")");
  }
  return base_class * backgrounds + background_index;
}

std::pair<int, int> decode_label(int composite, int backgrounds) {
  if (backgrounds < 1) throw LabelError("K must be >= 1, got " + std::to_string(backgrounds));
  if (composite < 0) throw LabelError("composite label must be >= 0, got " + std::to_string(composite));
  return {composite / backgrounds, composite % backgrounds};
}

const std::vector<std::string>& background_recipes() {
  static const std::vector<std::string> names = {
      "solid-gray",      "horizontal-gradient", "vertical-gradient", "checkerboard",
      "diagonal-stripes", "concentric-rings",   "radial-gradient",   "smooth-noise",
  };
  return names;
}

namespace {

// Fills one [H,W] plane with the named recipe. `variant` is 0 for the
// canonical form; repeats (k >= 8) draw their parameters from `rng`.
void render_recipe(std::size_t recipe, bool variant, Rng& rng, float* plane, std::size_t h, std::size_t w) {
  const float hf = static_cast<float>(h), wf = static_cast<float>(w);
  auto at = [&](std::size_t y, std::size_t x) -> float& { return plane[y * w + x]; };
  switch (recipe) {
    case 0: {
      const float level = variant ? 0.25f + 0.5f * rng.uniform() : 0.5f;
      std::fill(plane, plane + h * w, level);
      break;
    }
    case 1:
    case 2: {
      const bool flip = variant && rng.bernoulli(0.5f);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const float t = recipe == 1 ? (w > 1 ? static_cast<float>(x) / (wf - 1.0f) : 0.0f)
                                      : (h > 1 ? static_cast<float>(y) / (hf - 1.0f) : 0.0f);
          at(y, x) = flip ? 1.0f - t : t;
        }
      }
      break;
    }
    case 3: {
      const std::size_t cell = variant ? 4 + rng.below(9) : 8;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) at(y, x) = ((x / cell + y / cell) % 2 == 0) ? 0.0f : 1.0f;
      }
      break;
    }
    case 4: {
      const std::size_t period = variant ? 4 + rng.below(7) : 6;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) at(y, x) = ((x + y) % period < period / 2) ? 1.0f : 0.0f;
      }
      break;
    }
    case 5: {
      const float period = variant ? 4.0f + 6.0f * rng.uniform() : 6.0f;
      const float cy = (hf - 1.0f) / 2.0f, cx = (wf - 1.0f) / 2.0f;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const float r = std::hypot(static_cast<float>(y) - cy, static_cast<float>(x) - cx);
          at(y, x) = 0.5f + 0.5f * std::cos(2.0f * std::numbers::pi_v<float> * r / period);
        }
      }
      break;
    }
    case 6: {
      const float cy = variant ? rng.uniform() * (hf - 1.0f) : (hf - 1.0f) / 2.0f;
      const float cx = variant ? rng.uniform() * (wf - 1.0f) : (wf - 1.0f) / 2.0f;
      const float rmax = std::max(1.0f, std::hypot(std::max(cy, hf - 1.0f - cy), std::max(cx, wf - 1.0f - cx)));
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          at(y, x) = std::min(1.0f, std::hypot(static_cast<float>(y) - cy, static_cast<float>(x) - cx) / rmax);
        }
      }
      break;
    }
    default: {
      // Bilinear upsampling of a coarse random lattice.
      const std::size_t cell = 7;
      const std::size_t gh = h / cell + 2, gw = w / cell + 2;
      std::vector<float> lattice(gh * gw);
      for (auto& v : lattice) v = rng.uniform();
      for (std::size_t y = 0; y < h; ++y) {
        const float fy = static_cast<float>(y) / cell;
        const auto y0 = static_cast<std::size_t>(fy);
        const float ty = fy - static_cast<float>(y0);
        for (std::size_t x = 0; x < w; ++x) {
          const float fx = static_cast<float>(x) / cell;
          const auto x0 = static_cast<std::size_t>(fx);
          const float tx = fx - static_cast<float>(x0);
          const float top = lattice[y0 * gw + x0] * (1 - tx) + lattice[y0 * gw + x0 + 1] * tx;
          const float bot = lattice[(y0 + 1) * gw + x0] * (1 - tx) + lattice[(y0 + 1) * gw + x0 + 1] * tx;
          at(y, x) = std::clamp(top * (1 - ty) + bot * ty, 0.0f, 1.0f);
        }
      }
      break;
    }
  }
}

}  // namespace

std::vector<Background> generate_backgrounds(int count, std::size_t channels, std::size_t height, std::size_t width,
                                             std::uint64_t master_seed) {
  if (count < 1) throw ConfigError("background count K must be >= 1, got " + std::to_string(count));
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("background dimensions must be positive");
  const auto& recipes = background_recipes();
  std::vector<Background> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const std::size_t recipe = static_cast<std::size_t>(k) % recipes.size();
    const bool variant = static_cast<std::size_t>(k) >= recipes.size();
    Background bg;
    bg.index = k;
    bg.generator_name = recipes[recipe];
    bg.seed = derive_seed({master_seed, 0xb6u, static_cast<std::uint64_t>(k)});
    bg.pixels = Image::zeros(channels, height, width);
    Rng rng(bg.seed);
    const std::size_t plane = height * width;
    float* px = bg.pixels.values().data();
    // Parameters are shared across channels; only the noise lattice differs.
    for (std::size_t c = 0; c < channels; ++c) {
      Rng channel_rng = recipe == 7 ? Rng({bg.seed, c}) : rng;
      render_recipe(recipe, variant, channel_rng, px + c * plane, height, width);
    }
    out.push_back(std::move(bg));
  }
  return out;
}

Tensor stack_images(std::span<const Image> images) {
  if (images.empty()) throw DimensionError("cannot stack an empty image list");
  const Shape& s = images.front().shape();
  Tensor out({images.size(), s[0], s[1], s[2]});
  const std::size_t per = images.front().pixels().numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s) {
      throw DimensionError("image " + std::to_string(i) + " has shape " + shape_str(images[i].shape()) + ", expected " +
                           shape_str(s));
    }
    std::copy(images[i].values().begin(), images[i].values().end(), out.data().begin() + i * per);
  }
  return out;
}

Image image_from_batch(const Tensor& batch, std::size_t index) {
  if (batch.rank() != 4 || index >= batch.dim(0)) {
    throw DimensionError("image_from_batch: index " + std::to_string(index) + " invalid for " + shape_str(batch.shape()));
  }
  Image out = Image::zeros(batch.dim(1), batch.dim(2), batch.dim(3));
  const std::size_t per = out.pixels().numel();
  std::copy(batch.data().begin() + index * per, batch.data().begin() + (index + 1) * per, out.values().begin());
  return out;
}

}  // namespace inn

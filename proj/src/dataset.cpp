#include "inn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "inn/errors.hpp"
#include "inn/io.hpp"
#include "inn/rng.hpp"

namespace inn {

Shape Dataset::image_shape() const {
  if (images.empty()) throw ContractError("dataset '" + id + "' is empty");
  return images.front().shape();
}

void Dataset::validate() const {
  if (images.size() != labels.size()) {
    throw LabelError("dataset '" + id + "' has " + std::to_string(images.size()) + " images but " +
                     std::to_string(labels.size()) + " labels");
  }
  if (images.empty()) return;
  const Shape shape = images.front().shape();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw LabelError("label " + std::to_string(labels[i]) + " of item " + std::to_string(i) + " outside [0," +
                       std::to_string(classes) + ")");
    }
    if (images[i].shape() != shape) {
      throw DimensionError("item " + std::to_string(i) + " has shape " + shape_str(images[i].shape()) + ", expected " +
                           shape_str(shape));
    }
    for (float v : images[i].values()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ParseError("item " + std::to_string(i) + " has a pixel outside [0,1]");
    }
  }
}

Dataset Dataset::head(std::size_t count) const {
  Dataset out{{}, {}, classes, split, id};
  const std::size_t n = std::min(count, size());
  out.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

Dataset Dataset::sample(std::size_t count, std::uint64_t seed) const {
  if (count >= size()) return *this;
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng({seed, 0x5a3b1eu});
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  Dataset out{{}, {}, classes, split, id};
  for (auto i : idx) {
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (static_cast<std::uint32_t>(b[at]) << 24) | (static_cast<std::uint32_t>(b[at + 1]) << 16) |
         (static_cast<std::uint32_t>(b[at + 2]) << 8) | static_cast<std::uint32_t>(b[at + 3]);
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

Dataset parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
  if (image_bytes.size() < 16) throw LengthMismatchError("IDX image file shorter than its 16-byte header");
  if (label_bytes.size() < 8) throw LengthMismatchError("IDX label file shorter than its 8-byte header");
  const std::uint32_t image_magic = read_be32(image_bytes, 0);
  if (image_magic != kIdxImages) {
    throw FormatMagicError("IDX image magic is " + std::to_string(image_magic) + ", expected 0x00000803");
  }
  const std::uint32_t label_magic = read_be32(label_bytes, 0);
  if (label_magic != kIdxLabels) {
    throw FormatMagicError("IDX label magic is " + std::to_string(label_magic) + ", expected 0x00000801");
  }
  const std::size_t n = read_be32(image_bytes, 4);
  const std::size_t h = read_be32(image_bytes, 8);
  const std::size_t w = read_be32(image_bytes, 12);
  const std::size_t n_labels = read_be32(label_bytes, 4);
  if (n != n_labels) {
    throw LengthMismatchError("IDX image file holds " + std::to_string(n) + " images but label file holds " +
                              std::to_string(n_labels) + " labels");
  }
  if (image_bytes.size() != 16 + n * h * w) {
    throw LengthMismatchError("IDX image payload is " + std::to_string(image_bytes.size() - 16) + " bytes, header says " +
                              std::to_string(n * h * w));
  }
  if (label_bytes.size() != 8 + n) {
    throw LengthMismatchError("IDX label payload is " + std::to_string(label_bytes.size() - 8) + " bytes, header says " +
                              std::to_string(n));
  }
  if (h == 0 || w == 0) throw ParseError("IDX image dimensions must be positive");
  Dataset out;
  out.images.reserve(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Image img = Image::zeros(1, h, w);
    auto px = img.values();
    for (std::size_t p = 0; p < h * w; ++p) px[p] = static_cast<float>(image_bytes[16 + i * h * w + p]) / 255.0f;
    out.images.push_back(std::move(img));
    const int label = label_bytes[8 + i];
    max_label = std::max(max_label, label);
    out.labels.push_back(label);
  }
  out.classes = max_label + 1;
  return out;
}

Dataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  Dataset out = parse_idx(io::read_file(images), io::read_file(labels));
  out.id = images.filename().string();
  return out;
}

std::vector<std::uint8_t> encode_idx_images(const Dataset& data) {
  const Shape shape = data.image_shape();
  if (shape[0] != 1) throw DimensionError("IDX images must be single-channel, got " + shape_str(shape));
  std::vector<std::uint8_t> out;
  write_be32(out, kIdxImages);
  write_be32(out, static_cast<std::uint32_t>(data.size()));
  write_be32(out, static_cast<std::uint32_t>(shape[1]));
  write_be32(out, static_cast<std::uint32_t>(shape[2]));
  for (const auto& img : data.images) {
    for (float v : img.values()) out.push_back(to_byte(v));
  }
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(const Dataset& data) {
  std::vector<std::uint8_t> out;
  write_be32(out, kIdxLabels);
  write_be32(out, static_cast<std::uint32_t>(data.labels.size()));
  for (int l : data.labels) {
    if (l < 0 || l > 255) throw LabelError("label " + std::to_string(l) + " does not fit an IDX byte");
    out.push_back(static_cast<std::uint8_t>(l));
  }
  return out;
}

namespace {
constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;
}

Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecord != 0) {
    const std::size_t offset = bytes.size() / kCifarRecord * kCifarRecord;
    throw LengthMismatchError("CIFAR batch truncated: incomplete record at byte offset " + std::to_string(offset) +
                              " (file size " + std::to_string(bytes.size()) + " is not a multiple of 3073)");
  }
  Dataset out;
  out.classes = 10;
  const std::size_t n = bytes.size() / kCifarRecord;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] >= 10) {
      throw LabelError("CIFAR record at byte offset " + std::to_string(i * kCifarRecord) + " has label " +
                       std::to_string(rec[0]));
    }
    Image img = Image::zeros(3, 32, 32);
    auto px = img.values();
    for (std::size_t p = 0; p < 3 * 32 * 32; ++p) px[p] = static_cast<float>(rec[1 + p]) / 255.0f;
    out.images.push_back(std::move(img));
    out.labels.push_back(rec[0]);
  }
  return out;
}

Dataset read_cifar_binary(std::span<const std::filesystem::path> batches) {
  Dataset out;
  out.classes = 10;
  for (const auto& path : batches) {
    Dataset part;
    try {
      part = parse_cifar_binary(io::read_file(path));
    } catch (const ParseError& e) {
      throw LengthMismatchError(path.string() + ": " + e.what());
    }
    std::move(part.images.begin(), part.images.end(), std::back_inserter(out.images));
    out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
  }
  if (!batches.empty()) out.id = batches.front().filename().string();
  return out;
}

namespace {

struct Point {
  float x, y;
};
using Stroke = std::vector<Point>;

Stroke arc(float cx, float cy, float rx, float ry, float from_deg, float to_deg) {
  Stroke s;
  const int segments = std::max(4, static_cast<int>(std::fabs(to_deg - from_deg) / 20.0f));
  for (int i = 0; i <= segments; ++i) {
    const float a = (from_deg + (to_deg - from_deg) * static_cast<float>(i) / segments) * std::numbers::pi_v<float> / 180.0f;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return s;
}

// Digit skeletons in a unit box, y pointing down.
std::vector<Stroke> digit_strokes(int digit) {
  switch (digit) {
    case 0: return {arc(0.5f, 0.5f, 0.28f, 0.4f, 0.0f, 360.0f)};
    case 1: return {{{0.36f, 0.22f}, {0.52f, 0.08f}, {0.52f, 0.92f}}};
    case 2: {
      Stroke s = arc(0.5f, 0.3f, 0.24f, 0.2f, 200.0f, 380.0f);
      s.push_back({0.25f, 0.9f});
      s.push_back({0.78f, 0.9f});
      return {s};
    }
    case 3: return {arc(0.48f, 0.29f, 0.22f, 0.19f, 200.0f, 450.0f), arc(0.48f, 0.69f, 0.25f, 0.21f, 270.0f, 520.0f)};
    case 4: return {{{0.62f, 0.92f}, {0.62f, 0.08f}, {0.2f, 0.65f}, {0.82f, 0.65f}}};
    case 5: {
      Stroke s{{0.74f, 0.1f}, {0.32f, 0.1f}, {0.29f, 0.46f}};
      Stroke bowl = arc(0.48f, 0.66f, 0.25f, 0.23f, 235.0f, 480.0f);
      s.insert(s.end(), bowl.begin(), bowl.end());
      return {s};
    }
    case 6: return {{{0.68f, 0.08f}, {0.3f, 0.62f}}, arc(0.5f, 0.69f, 0.22f, 0.21f, 0.0f, 360.0f)};
    case 7: return {{{0.2f, 0.1f}, {0.8f, 0.1f}, {0.42f, 0.92f}}};
    case 8: return {arc(0.5f, 0.29f, 0.19f, 0.19f, 0.0f, 360.0f), arc(0.5f, 0.7f, 0.23f, 0.21f, 0.0f, 360.0f)};
    default: return {arc(0.5f, 0.32f, 0.21f, 0.21f, 0.0f, 360.0f), {{0.71f, 0.32f}, {0.62f, 0.92f}}};
  }
}

float segment_distance(Point p, Point a, Point b) {
  const float dx = b.x - a.x, dy = b.y - a.y;
  const float len2 = dx * dx + dy * dy;
  float t = len2 > 0.0f ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0f;
  t = std::clamp(t, 0.0f, 1.0f);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

Image render_digit(int digit, Rng& rng) {
  constexpr std::size_t kSide = 28;
  const float box = 20.0f;
  const float sx = box * (0.85f + 0.25f * rng.uniform());
  const float sy = box * (0.85f + 0.25f * rng.uniform());
  const float shear = 0.3f * (rng.uniform() - 0.5f);
  const float theta = (24.0f * (rng.uniform() - 0.5f)) * std::numbers::pi_v<float> / 180.0f;
  const float tx = 14.0f + 4.0f * (rng.uniform() - 0.5f);
  const float ty = 14.0f + 4.0f * (rng.uniform() - 0.5f);
  const float width = 1.6f + 1.2f * rng.uniform();
  const float intensity = 0.8f + 0.2f * rng.uniform();
  const float ct = std::cos(theta), st = std::sin(theta);

  auto to_canvas = [&](Point u) {
    const float x = (u.x - 0.5f) * sx + shear * (u.y - 0.5f) * sy;
    const float y = (u.y - 0.5f) * sy;
    return Point{tx + ct * x - st * y, ty + st * x + ct * y};
  };

  Image img = Image::zeros(1, kSide, kSide);
  auto px = img.values();
  const float reach = 0.5f * width + 1.0f;
  for (Stroke stroke : digit_strokes(digit)) {
    for (auto& p : stroke) {
      p.x += 0.012f * (rng.uniform() - 0.5f) * 2.0f;
      p.y += 0.012f * (rng.uniform() - 0.5f) * 2.0f;
      p = to_canvas(p);
    }
    for (std::size_t i = 0; i + 1 < stroke.size(); ++i) {
      const Point a = stroke[i], b = stroke[i + 1];
      const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - reach)));
      const int x1 = std::min<int>(kSide - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + reach)));
      const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - reach)));
      const int y1 = std::min<int>(kSide - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + reach)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const float d = segment_distance({static_cast<float>(x), static_cast<float>(y)}, a, b);
          const float v = intensity * std::clamp(0.5f * width + 0.5f - d, 0.0f, 1.0f);
          float& dst = px[static_cast<std::size_t>(y) * kSide + static_cast<std::size_t>(x)];
          dst = std::max(dst, v);
        }
      }
    }
  }
  for (auto& v : px) v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
  return img;
}

}  // namespace

Dataset make_synthetic_digits(std::size_t count, std::uint64_t seed, const std::string& split) {
  Dataset out;
  out.classes = 10;
  out.split = split;
  out.id = "synth-digits:" + split + ":" + std::to_string(seed);
  out.images.reserve(count);
  out.labels.reserve(count);
  const std::uint64_t split_tag = split == "train" ? 1 : 2;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng({seed, split_tag, i});
    const int digit = static_cast<int>(rng.below(10));
    out.images.push_back(render_digit(digit, rng));
    out.labels.push_back(digit);
  }
  return out;
}

}  // namespace inn

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "inn/interference.hpp"

namespace inn {

// Labelled images with base-class labels in [0, classes).
struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  int classes = 0;
  std::string split;  // "train" or "test"
  std::string id;     // provenance tag stored in checkpoint metadata

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  Shape image_shape() const;

  // Equal lengths, labels in range, uniform shapes, pixels in [0,1].
  void validate() const;

  // First `count` items (or all if fewer).
  Dataset head(std::size_t count) const;
  // `count` items chosen by a seeded permutation, kept in ascending index order.
  Dataset sample(std::size_t count, std::uint64_t seed) const;
};

// IDX (big-endian) readers. Images: magic 0x00000803, dims [n, h, w], u8
// pixels scaled by 1/255. Labels: magic 0x00000801, dims [n], u8.
Dataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
Dataset parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes);
// Inverse of parse_idx for single-channel datasets; pixels are rounded to
// the nearest multiple of 1/255.
std::vector<std::uint8_t> encode_idx_images(const Dataset& data);
std::vector<std::uint8_t> encode_idx_labels(const Dataset& data);

// CIFAR-10 binary batches: records of 1 label byte + 3072 channel-first pixels.
Dataset read_cifar_binary(std::span<const std::filesystem::path> batches);
Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes);

// Procedurally rendered handwritten-style digits 0-9 on a 28x28 canvas with
// random affine jitter, stroke width and intensity. Pixel values are
// multiples of 1/255 so the set survives an IDX round trip exactly.
Dataset make_synthetic_digits(std::size_t count, std::uint64_t seed, const std::string& split);

}  // namespace inn

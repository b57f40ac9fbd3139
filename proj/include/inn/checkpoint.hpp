#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "inn/model.hpp"

namespace inn {

// Binary checkpoint ("INNC"):
//   magic "INNC" | u32 version (=1) | u32 metadata byte length |
//   metadata: UTF-8 "key=value\n" lines |
//   u32 tensor count | per tensor: u32 name length, name bytes, u32 rank,
//   rank x u32 dims, raw f32 data.
// All integers and floats are little-endian.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<NamedTensor> tensors;

  std::optional<std::string> get(const std::string& key) const;
  // Throws CheckpointError when the key is absent.
  const std::string& require(const std::string& key) const;
  void set(const std::string& key, std::string value);
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws MagicError, VersionError or TruncationError (naming the tensor being
// read); nothing is returned on failure.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Float rendering that parses back to the identical value.
std::string format_float_exact(float v);

}  // namespace inn

#include "inn/checkpoint.hpp"

#include <charconv>
#include <cstring>
#include <sstream>

#include "inn/errors.hpp"
#include "inn/io.hpp"

namespace inn {

std::optional<std::string> Checkpoint::get(const std::string& key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  return std::nullopt;
}

const std::string& Checkpoint::require(const std::string& key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  throw CheckpointError("checkpoint metadata lacks key '" + key + "'");
}

void Checkpoint::set(const std::string& key, std::string value) {
  if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
    throw CheckpointError("metadata key/value may not contain '=' in keys or newlines: '" + key + "'");
  }
  for (auto& [k, v] : metadata) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  metadata.emplace_back(key, std::move(value));
}

std::string format_float_exact(float v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

namespace {
constexpr char kMagic[4] = {'I', 'N', 'N', 'C'};
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.text(std::string_view(kMagic, 4));
  w.u32(Checkpoint::kVersion);
  std::string meta;
  for (const auto& [k, v] : ckpt.metadata) meta += k + "=" + v + "\n";
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.text(meta);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.text(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.value.data()) w.f32(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw MagicError("not a checkpoint: magic bytes are not \"INNC\"");
  }
  io::ByteReader r(bytes.subspan(4));
  std::uint32_t version = 0;
  if (!r.u32(version)) throw TruncationError("checkpoint truncated in header");
  if (version != Checkpoint::kVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(Checkpoint::kVersion) + ")");
  }
  std::uint32_t meta_len = 0;
  std::span<const std::uint8_t> meta;
  if (!r.u32(meta_len) || !r.bytes(meta_len, meta)) throw TruncationError("checkpoint truncated in metadata block");

  Checkpoint out;
  std::istringstream lines(std::string(meta.begin(), meta.end()));
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed metadata line '" + line + "'");
    out.metadata.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }

  std::uint32_t count = 0;
  if (!r.u32(count)) throw TruncationError("checkpoint truncated before tensor table");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string ordinal = "tensor #" + std::to_string(i);
    std::uint32_t name_len = 0;
    std::span<const std::uint8_t> name_bytes;
    if (!r.u32(name_len) || !r.bytes(name_len, name_bytes)) {
      throw TruncationError("checkpoint truncated in name of " + ordinal);
    }
    std::string name(name_bytes.begin(), name_bytes.end());
    std::uint32_t rank = 0;
    if (!r.u32(rank)) throw TruncationError("checkpoint truncated in header of tensor '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t v = 0;
      if (!r.u32(v)) throw TruncationError("checkpoint truncated in dims of tensor '" + name + "'");
      d = v;
    }
    const std::size_t n = shape_numel(shape);
    if (r.remaining() / 4 < n) throw TruncationError("checkpoint truncated mid-tensor '" + name + "'");
    std::vector<float> values(n);
    for (auto& v : values) r.f32(v);
    try {
      out.tensors.push_back({name, Tensor(shape, std::move(values))});
    } catch (const Error& e) {
      throw CheckpointError("tensor '" + name + "': " + e.what());
    }
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace inn

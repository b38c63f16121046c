#include "mdgd/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "mdgd/errors.hpp"
#include "mdgd/experiment.hpp"

namespace mdgd {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, p] : ckpt.params) {
    tensors.push_back({{"name", name}, {"shape", p.value.shape()}, {"offset", offset}});
    offset += 8 * p.value.size();
  }
  nlohmann::json manifest = {{"format", "MDGD"},
                             {"version", kCheckpointVersion},
                             {"tensors", tensors},
                             {"payload_bytes", offset},
                             {"metadata", ckpt.metadata}};
  const std::string text = manifest.dump();

  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [_, p] : ckpt.params)
    for (double v : p.value.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not an MDGD checkpoint (bad magic)");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t manifest_len = get_le(bytes, 8, 8);
  if (manifest_len > bytes.size() - 16) throw FormatError("checkpoint manifest truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  const std::size_t payload_start = 16 + manifest_len;
  const std::size_t payload_len = bytes.size() - payload_start;

  Checkpoint ckpt;
  try {
    if (manifest.at("payload_bytes").get<std::uint64_t>() != payload_len)
      throw FormatError("checkpoint payload length disagrees with manifest");
    std::uint64_t expected_offset = 0;
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const std::size_t n = shape_numel(shape);
      if (offset != expected_offset || offset + 8 * n > payload_len)
        throw FormatError("checkpoint tensor '" + name + "' has inconsistent offset");
      std::vector<double> data(n);
      for (std::size_t i = 0; i < n; ++i)
        data[i] = std::bit_cast<double>(get_le(bytes, payload_start + offset + 8 * i, 8));
      ckpt.params.emplace(name, Parameter{.name = name, .value = Tensor(shape, std::move(data)),
                                          .trainable = false});
      expected_offset = offset + 8 * n;
    }
    if (expected_offset != payload_len) throw FormatError("checkpoint payload has trailing bytes");
    ckpt.metadata = manifest.at("metadata");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace mdgd

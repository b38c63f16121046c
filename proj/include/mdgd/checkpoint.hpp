#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "mdgd/autograd.hpp"

namespace mdgd {

inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'G', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (all integers little-endian):
//   "MDGD" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload
// The manifest lists {name, shape, offset} per tensor (offset in bytes from the
// start of the payload) plus free-form metadata; the payload concatenates the
// tensors as IEEE-754 binary64 in manifest order.
struct Checkpoint {
  ParamSet params;  // trainable flags are not stored; all false on load
  nlohmann::json metadata = nlohmann::json::object();
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mdgd

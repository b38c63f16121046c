#pragma once

#include <cstdint>
#include <vector>

#include "mdgd/model.hpp"
#include "mdgd/tensor.hpp"

namespace mdgd {

enum class TaskTag { kPretrain, kDownstream, kProbe };

const char* task_tag_name(TaskTag tag);

// Parameters of the procedural "world": attribute layout, noise, and the
// per-patch mixing matrices derived from world_seed.
struct SceneSpec {
  std::size_t attributes = 6;  // A
  std::size_t categories = 4;  // C
  double noise_sigma = 0.1;
  std::size_t visual_tokens = 8;  // M
  std::size_t d_img = 32;
  std::uint64_t world_seed = 7;

  void validate() const;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

// Token alphabet shared by all tasks.
struct Vocabulary {
  static constexpr std::size_t kDescribe = 1;
  static constexpr std::size_t kWhat = 2;
  std::size_t attributes = 0;
  std::size_t categories = 0;

  explicit Vocabulary(const SceneSpec& spec)
      : attributes(spec.attributes), categories(spec.categories) {}

  std::size_t attribute_token(std::size_t a) const { return 3 + a; }
  std::size_t pretrain_value_token(std::size_t a, std::size_t c) const {
    return 3 + attributes + a * categories + c;
  }
  std::size_t downstream_value_token(std::size_t c) const {
    return 3 + attributes + attributes * categories + c;
  }
  std::size_t size() const { return 3 + attributes + attributes * categories + categories; }
};

struct Sample {
  std::uint64_t index = 0;
  std::vector<std::size_t> attributes;
  Tensor image_feats;  // [M, d_img]
  std::vector<std::size_t> instr_ids;
  std::vector<std::size_t> answer_ids;
  TaskTag tag = TaskTag::kPretrain;
};

struct Dataset {
  SceneSpec spec;
  TaskTag tag = TaskTag::kPretrain;
  std::uint64_t seed = 0;
  std::size_t focus = 0;  // downstream only
  std::vector<Sample> samples;
};

// One mixing matrix per patch, [d_img, A*C], each of full column rank.
std::vector<Tensor> mixing_matrices(const SceneSpec& spec);

// Probe samples draw from index range [kProbeIndexOffset, ...), disjoint from
// the training range [0, n).
inline constexpr std::uint64_t kProbeIndexOffset = 1ULL << 32;

Dataset gen_pretrain(const SceneSpec& spec, std::size_t n, std::uint64_t seed);
Dataset gen_downstream(const SceneSpec& spec, std::size_t n, std::uint64_t seed, std::size_t focus);
Dataset gen_probe(const SceneSpec& spec, std::size_t n, std::uint64_t seed);

// Batches samples[indices] with right padding of instructions and answers.
Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices);
Batch make_batch(const Dataset& data);

}  // namespace mdgd

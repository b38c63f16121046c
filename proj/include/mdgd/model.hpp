#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdgd/autograd.hpp"
#include "mdgd/rng.hpp"
#include "mdgd/tensor.hpp"

namespace mdgd {

struct ModelConfig {
  std::size_t d_img = 32;
  std::size_t visual_tokens = 8;  // M
  std::size_t vocab = 64;
  std::size_t d_model = 32;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t max_seq = 16;
  std::size_t trainable_last_k = 2;
  bool train_output_head = false;
  std::uint64_t seed = 1;

  // Throws ConfigError naming the offending field.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Token id 0 is reserved for padding throughout.
inline constexpr std::size_t kPadToken = 0;

struct Batch {
  std::size_t size = 0;         // B
  std::size_t instr_len = 0;    // N
  std::size_t answer_len = 0;   // T
  Tensor image_feats;           // [B, M, d_img]
  std::vector<std::size_t> instr_ids;   // B*N
  std::vector<std::uint8_t> instr_mask;  // B*N, 1 = real token
  std::vector<std::size_t> answer_ids;  // B*T
  std::vector<std::uint8_t> answer_mask;
};

// Graph handles produced by one forward pass.
struct ForwardVars {
  Var logits;         // [B*T, vocab], row b*T + t predicts answer token t
  Var visual_hidden;  // [B*M, d_model]
  Var zvl;            // [B, d_model], last real instruction position
};

struct ForwardOutput {
  Tensor logits;         // [B, T, vocab]
  Tensor visual_hidden;  // [B, M, d_model]
  Tensor zvl;            // [B, d_model]
};

// Parameter naming helpers.
std::string layer_param(std::size_t layer, const std::string& leaf);
bool is_adapter_param(const std::string& name);

ParamSet init_params(const ModelConfig& config, Rng& rng);
ParamSet init_params(const ModelConfig& config);
// Marks the adapter and the last trainable_last_k layers (and optionally the
// output head) trainable; everything else frozen.
void apply_trainable_policy(ParamSet& params, const ModelConfig& config);
void set_all_trainable(ParamSet& params, bool trainable);

void validate_batch(const ModelConfig& config, const Batch& batch);

// Shared per-patch adapter: x Wp + gelu(x W1 + b1) W2 + b2. Input rows are
// patches, [rows, d_img].
Var encode_visual(Tape& tape, const ModelConfig& config, Var patches);
Tensor encode_visual(const ParamSet& params, const ModelConfig& config, const Tensor& image_feats);

ForwardVars forward(Tape& tape, const ModelConfig& config, const Batch& batch);
ForwardOutput forward(const ParamSet& params, const ModelConfig& config, const Batch& batch);

// Final-layer states at the visual positions, running only the visual prefix.
// Equal bit-for-bit to ForwardVars::visual_hidden because of causal masking.
Var visual_states(Tape& tape, const ModelConfig& config, const Tensor& image_feats);
Tensor visual_states(const ParamSet& params, const ModelConfig& config, const Tensor& image_feats);

// Mean negative log-likelihood over real answer tokens.
Var task_loss(Tape& tape, const ModelConfig& config, const Batch& batch);
double task_loss_value(const ParamSet& params, const ModelConfig& config, const Batch& batch);

// Greedy continuation for every sample of the batch; answer fields of the
// batch are ignored. Ties resolve to the smaller token id.
std::vector<std::vector<std::size_t>> greedy_decode(const ParamSet& params,
                                                    const ModelConfig& config,
                                                    const Batch& prompts, std::size_t max_len);
std::vector<std::size_t> greedy_decode(const ParamSet& params, const ModelConfig& config,
                                       const Tensor& image_feats,
                                       const std::vector<std::size_t>& instr_ids,
                                       std::size_t max_len);

}  // namespace mdgd

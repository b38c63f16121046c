#include "mdgd/model.hpp"

#include <algorithm>
#include <cmath>

#include "mdgd/errors.hpp"

namespace mdgd {

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (d_img == 0) fail("d_img", "must be positive");
  if (visual_tokens == 0) fail("visual_tokens", "must be at least 1");
  if (vocab < 2) fail("vocab", "must be at least 2");
  if (d_model == 0) fail("d_model", "must be positive");
  if (n_heads == 0 || d_model % n_heads != 0) fail("n_heads", "must divide d_model");
  if (n_layers == 0) fail("n_layers", "must be positive");
  if (d_ff == 0) fail("d_ff", "must be positive");
  if (trainable_last_k < 1 || trainable_last_k > n_layers)
    fail("trainable_last_k", "must lie in [1, n_layers]");
  if (max_seq <= visual_tokens) fail("max_seq", "must exceed visual_tokens");
}

std::string layer_param(std::size_t layer, const std::string& leaf) {
  return "layer." + std::to_string(layer) + "." + leaf;
}

bool is_adapter_param(const std::string& name) { return name.rfind("adapter.", 0) == 0; }

namespace {

void add_param(ParamSet& ps, std::string name, Tensor value) {
  ps.emplace(name, Parameter{.name = name, .value = std::move(value), .trainable = false});
}

Tensor normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = stddev * rng.normal();
  return t;
}

}  // namespace

ParamSet init_params(const ModelConfig& config, Rng& rng) {
  config.validate();
  constexpr double kStd = 0.02;
  const std::size_t d = config.d_model;
  ParamSet ps;
  // Creation order fixes the order of draws from the stream.
  add_param(ps, "adapter.proj.w", normal_tensor({config.d_img, d}, rng, kStd));
  add_param(ps, "adapter.mlp.w1", normal_tensor({config.d_img, d}, rng, kStd));
  add_param(ps, "adapter.mlp.b1", Tensor({d}));
  add_param(ps, "adapter.mlp.w2", normal_tensor({d, d}, rng, kStd));
  add_param(ps, "adapter.mlp.b2", Tensor({d}));
  add_param(ps, "embed.tok", normal_tensor({config.vocab, d}, rng, kStd));
  add_param(ps, "embed.pos", normal_tensor({config.max_seq, d}, rng, kStd));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    add_param(ps, layer_param(l, "ln1.g"), Tensor({d}, 1.0));
    add_param(ps, layer_param(l, "ln1.b"), Tensor({d}));
    add_param(ps, layer_param(l, "attn.wq"), normal_tensor({d, d}, rng, kStd));
    add_param(ps, layer_param(l, "attn.wk"), normal_tensor({d, d}, rng, kStd));
    add_param(ps, layer_param(l, "attn.wv"), normal_tensor({d, d}, rng, kStd));
    add_param(ps, layer_param(l, "attn.wo"), normal_tensor({d, d}, rng, kStd));
    add_param(ps, layer_param(l, "ln2.g"), Tensor({d}, 1.0));
    add_param(ps, layer_param(l, "ln2.b"), Tensor({d}));
    add_param(ps, layer_param(l, "ff.w1"), normal_tensor({d, config.d_ff}, rng, kStd));
    add_param(ps, layer_param(l, "ff.b1"), Tensor({config.d_ff}));
    add_param(ps, layer_param(l, "ff.w2"), normal_tensor({config.d_ff, d}, rng, kStd));
    add_param(ps, layer_param(l, "ff.b2"), Tensor({d}));
  }
  add_param(ps, "head.ln.g", Tensor({d}, 1.0));
  add_param(ps, "head.ln.b", Tensor({d}));
  add_param(ps, "head.w", normal_tensor({d, config.vocab}, rng, kStd));
  apply_trainable_policy(ps, config);
  return ps;
}

ParamSet init_params(const ModelConfig& config) {
  Rng rng(config.seed);
  return init_params(config, rng);
}

void apply_trainable_policy(ParamSet& params, const ModelConfig& config) {
  const std::size_t first_trainable = config.n_layers - config.trainable_last_k;
  for (auto& [name, p] : params) {
    bool trainable = is_adapter_param(name);
    if (name.rfind("layer.", 0) == 0) {
      const std::size_t layer = std::stoul(name.substr(6, name.find('.', 6) - 6));
      trainable = layer >= first_trainable;
    }
    if (name.rfind("head.", 0) == 0) trainable = config.train_output_head;
    p.trainable = trainable;
  }
}

void set_all_trainable(ParamSet& params, bool trainable) {
  for (auto& [_, p] : params) p.trainable = trainable;
}

void validate_batch(const ModelConfig& config, const Batch& batch) {
  const std::size_t B = batch.size, N = batch.instr_len, T = batch.answer_len;
  if (batch.image_feats.shape() != Shape{B, config.visual_tokens, config.d_img}) {
    throw DimensionError("batch image features " + shape_string(batch.image_feats.shape()) +
                         ", expected " + shape_string({B, config.visual_tokens, config.d_img}));
  }
  if (batch.instr_ids.size() != B * N || batch.instr_mask.size() != B * N ||
      batch.answer_ids.size() != B * T || batch.answer_mask.size() != B * T) {
    throw DimensionError("batch token matrices inconsistent with B=" + std::to_string(B) +
                         ", N=" + std::to_string(N) + ", T=" + std::to_string(T));
  }
  if (N == 0) throw ContractError("batch needs at least one instruction position");
  if (config.visual_tokens + N + T > config.max_seq) {
    throw CapacityError("sequence of " + std::to_string(config.visual_tokens + N + T) +
                        " tokens exceeds max_seq " + std::to_string(config.max_seq));
  }
  for (std::size_t i = 0; i < B * N; ++i)
    if (batch.instr_ids[i] >= config.vocab) throw DimensionError("instruction token out of vocabulary");
  for (std::size_t i = 0; i < B * T; ++i)
    if (batch.answer_ids[i] >= config.vocab) throw DimensionError("answer token out of vocabulary");
  for (std::size_t b = 0; b < B; ++b) {
    bool any = false;
    for (std::size_t n = 0; n < N; ++n) any |= batch.instr_mask[b * N + n] != 0;
    if (!any) throw ContractError("sample " + std::to_string(b) + " has no instruction token");
  }
}

Var encode_visual(Tape& tape, const ModelConfig& config, Var patches) {
  if (patches.value().rank() != 2 || patches.value().dim(1) != config.d_img) {
    throw DimensionError("encode_visual: patches " + shape_string(patches.value().shape()) +
                         " do not match d_img " + std::to_string(config.d_img));
  }
  Var proj = ag::matmul(patches, tape.param("adapter.proj.w"));
  Var hidden = ag::gelu(ag::add_bias(ag::matmul(patches, tape.param("adapter.mlp.w1")),
                                     tape.param("adapter.mlp.b1")));
  Var mlp = ag::add_bias(ag::matmul(hidden, tape.param("adapter.mlp.w2")),
                         tape.param("adapter.mlp.b2"));
  return ag::add(proj, mlp);
}

namespace {

Tensor patches_of(const Tensor& image_feats, const ModelConfig& config) {
  if (image_feats.rank() != 3 || image_feats.dim(1) != config.visual_tokens ||
      image_feats.dim(2) != config.d_img) {
    throw DimensionError("image features " + shape_string(image_feats.shape()) +
                         ", expected [B, " + std::to_string(config.visual_tokens) + ", " +
                         std::to_string(config.d_img) + "]");
  }
  return image_feats.reshaped({image_feats.dim(0) * config.visual_tokens, config.d_img});
}

// Pre-norm transformer stack over h = [B*S, d].
Var run_blocks(Tape& tape, const ModelConfig& config, Var h, const ag::AttentionLayout& layout) {
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    Var x = ag::layer_norm(h, tape.param(layer_param(l, "ln1.g")), tape.param(layer_param(l, "ln1.b")));
    Var q = ag::matmul(x, tape.param(layer_param(l, "attn.wq")));
    Var k = ag::matmul(x, tape.param(layer_param(l, "attn.wk")));
    Var v = ag::matmul(x, tape.param(layer_param(l, "attn.wv")));
    Var att = ag::causal_attention(q, k, v, layout);
    h = ag::add(h, ag::matmul(att, tape.param(layer_param(l, "attn.wo"))));
    Var y = ag::layer_norm(h, tape.param(layer_param(l, "ln2.g")), tape.param(layer_param(l, "ln2.b")));
    Var ff = ag::gelu(ag::add_bias(ag::matmul(y, tape.param(layer_param(l, "ff.w1"))),
                                   tape.param(layer_param(l, "ff.b1"))));
    ff = ag::add_bias(ag::matmul(ff, tape.param(layer_param(l, "ff.w2"))),
                      tape.param(layer_param(l, "ff.b2")));
    h = ag::add(h, ff);
  }
  return h;
}

std::size_t last_instruction_position(const Batch& batch, std::size_t b) {
  std::size_t last = 0;
  for (std::size_t n = 0; n < batch.instr_len; ++n)
    if (batch.instr_mask[b * batch.instr_len + n]) last = n;
  return last;
}

}  // namespace

Tensor encode_visual(const ParamSet& params, const ModelConfig& config, const Tensor& image_feats) {
  Tape tape;
  tape.bind_all(params);
  Var out = encode_visual(tape, config, tape.constant(patches_of(image_feats, config)));
  return out.value().reshaped({image_feats.dim(0), config.visual_tokens, config.d_model});
}

ForwardVars forward(Tape& tape, const ModelConfig& config, const Batch& batch) {
  validate_batch(config, batch);
  const std::size_t B = batch.size, M = config.visual_tokens, N = batch.instr_len,
                    T = batch.answer_len, S = M + N + T, L = N + T;

  Var visual = encode_visual(tape, config, tape.constant(patches_of(batch.image_feats, config)));

  std::vector<std::size_t> text_ids(B * L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t n = 0; n < N; ++n) text_ids[b * L + n] = batch.instr_ids[b * N + n];
    for (std::size_t t = 0; t < T; ++t) text_ids[b * L + N + t] = batch.answer_ids[b * T + t];
  }
  Var text = ag::gather_rows(tape.param("embed.tok"), std::move(text_ids));

  // Interleave into per-sample [visual; instruction; answer] order.
  std::vector<std::size_t> order(B * S), positions(B * S);
  ag::AttentionLayout layout{.batch = B, .seq = S, .heads = config.n_heads, .key_valid = {}};
  layout.key_valid.assign(B * S, 1);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t s = 0; s < S; ++s) {
      order[b * S + s] = s < M ? b * M + s : B * M + b * L + (s - M);
      positions[b * S + s] = s;
    }
    for (std::size_t n = 0; n < N; ++n) layout.key_valid[b * S + M + n] = batch.instr_mask[b * N + n];
    for (std::size_t t = 0; t < T; ++t)
      layout.key_valid[b * S + M + N + t] = batch.answer_mask[b * T + t];
  }
  Var h = ag::gather_rows(ag::concat_rows({visual, text}), std::move(order));
  h = ag::add(h, ag::gather_rows(tape.param("embed.pos"), std::move(positions)));
  h = run_blocks(tape, config, h, layout);

  std::vector<std::size_t> vis_rows, zvl_rows, logit_rows;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t m = 0; m < M; ++m) vis_rows.push_back(b * S + m);
    const std::size_t last_instr = b * S + M + last_instruction_position(batch, b);
    zvl_rows.push_back(last_instr);
    for (std::size_t t = 0; t < T; ++t)
      logit_rows.push_back(t == 0 ? last_instr : b * S + M + N + t - 1);
  }
  ForwardVars out;
  out.visual_hidden = ag::gather_rows(h, std::move(vis_rows));
  out.zvl = ag::gather_rows(h, std::move(zvl_rows));
  Var pre_logits = ag::gather_rows(h, std::move(logit_rows));
  pre_logits = ag::layer_norm(pre_logits, tape.param("head.ln.g"), tape.param("head.ln.b"));
  out.logits = ag::matmul(pre_logits, tape.param("head.w"));
  return out;
}

ForwardOutput forward(const ParamSet& params, const ModelConfig& config, const Batch& batch) {
  Tape tape;
  tape.bind_all(params);
  ForwardVars vars = forward(tape, config, batch);
  const std::size_t B = batch.size;
  return ForwardOutput{
      .logits = vars.logits.value().reshaped({B, batch.answer_len, config.vocab}),
      .visual_hidden = vars.visual_hidden.value().reshaped({B, config.visual_tokens, config.d_model}),
      .zvl = vars.zvl.value()};
}

Var visual_states(Tape& tape, const ModelConfig& config, const Tensor& image_feats) {
  const Tensor patches = patches_of(image_feats, config);
  const std::size_t B = image_feats.dim(0), M = config.visual_tokens;
  Var h = encode_visual(tape, config, tape.constant(patches));
  std::vector<std::size_t> positions(B * M);
  for (std::size_t i = 0; i < B * M; ++i) positions[i] = i % M;
  h = ag::add(h, ag::gather_rows(tape.param("embed.pos"), std::move(positions)));
  ag::AttentionLayout layout{.batch = B, .seq = M, .heads = config.n_heads, .key_valid = {}};
  layout.key_valid.assign(B * M, 1);
  return run_blocks(tape, config, h, layout);
}

Tensor visual_states(const ParamSet& params, const ModelConfig& config, const Tensor& image_feats) {
  Tape tape;
  tape.bind_all(params);
  return visual_states(tape, config, image_feats)
      .value()
      .reshaped({image_feats.dim(0), config.visual_tokens, config.d_model});
}

Var task_loss(Tape& tape, const ModelConfig& config, const Batch& batch) {
  ForwardVars vars = forward(tape, config, batch);
  std::size_t count = 0;
  for (auto m : batch.answer_mask) count += m ? 1 : 0;
  if (count == 0) throw ContractError("task_loss: every answer token is padding");
  std::vector<double> weights(batch.answer_mask.size());
  for (std::size_t i = 0; i < weights.size(); ++i)
    weights[i] = batch.answer_mask[i] ? 1.0 / static_cast<double>(count) : 0.0;
  return ag::cross_entropy(vars.logits, batch.answer_ids, weights);
}

double task_loss_value(const ParamSet& params, const ModelConfig& config, const Batch& batch) {
  Tape tape;
  tape.bind_all(params);
  return task_loss(tape, config, batch).value().item();
}

std::vector<std::vector<std::size_t>> greedy_decode(const ParamSet& params,
                                                    const ModelConfig& config,
                                                    const Batch& prompts, std::size_t max_len) {
  const std::size_t B = prompts.size;
  std::vector<std::vector<std::size_t>> generated(B);
  if (max_len == 0) return generated;
  Batch work = prompts;
  for (std::size_t step = 0; step < max_len; ++step) {
    // Answer slot `step` is a masked placeholder; its logits row predicts it.
    const std::size_t T = step + 1;
    work.answer_len = T;
    work.answer_ids.assign(B * T, kPadToken);
    work.answer_mask.assign(B * T, 0);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < step; ++t) {
        work.answer_ids[b * T + t] = generated[b][t];
        work.answer_mask[b * T + t] = 1;
      }
    }
    const ForwardOutput out = forward(params, config, work);
    for (std::size_t b = 0; b < B; ++b) {
      const double* row = out.logits.data().data() + (b * T + step) * config.vocab;
      std::size_t best = 0;
      for (std::size_t v = 1; v < config.vocab; ++v)
        if (row[v] > row[best]) best = v;
      generated[b].push_back(best);
    }
  }
  return generated;
}

std::vector<std::size_t> greedy_decode(const ParamSet& params, const ModelConfig& config,
                                       const Tensor& image_feats,
                                       const std::vector<std::size_t>& instr_ids,
                                       std::size_t max_len) {
  Batch prompt;
  prompt.size = 1;
  prompt.instr_len = instr_ids.size();
  prompt.image_feats = image_feats.rank() == 2
                           ? image_feats.reshaped({1, image_feats.dim(0), image_feats.dim(1)})
                           : image_feats;
  prompt.instr_ids = instr_ids;
  prompt.instr_mask.assign(instr_ids.size(), 1);
  return greedy_decode(params, config, prompt, max_len).front();
}

}  // namespace mdgd

#include "mdgd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mdgd/errors.hpp"
#include "mdgd/rng.hpp"
#include "mdgd/spectral.hpp"

namespace mdgd {

const char* task_tag_name(TaskTag tag) {
  switch (tag) {
    case TaskTag::kPretrain: return "pretrain";
    case TaskTag::kDownstream: return "downstream";
    case TaskTag::kProbe: return "probe";
  }
  return "?";
}

void SceneSpec::validate() const {
  if (attributes == 0) throw ConfigError("data.attributes: must be positive");
  if (categories < 2) throw ConfigError("data.categories: must be at least 2");
  if (!(noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma: must be non-negative");
  if (visual_tokens == 0) throw ConfigError("data.visual_tokens: must be positive");
  if (d_img < attributes * categories) {
    throw ConfigError("data.d_img: must be at least attributes*categories = " +
                      std::to_string(attributes * categories) + " for full column rank mixing");
  }
}

std::vector<Tensor> mixing_matrices(const SceneSpec& spec) {
  spec.validate();
  const std::size_t cols = spec.attributes * spec.categories;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(spec.attributes));
  Rng rng = Rng(spec.world_seed).fork(0x6D6978);
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < spec.visual_tokens; ++m) {
    Tensor e({spec.d_img, cols});
    for (auto& v : e.values()) v = stddev * rng.normal();
    const Spectrum s = singular_values(e);
    if (!(s.sigma.back() > 1e-6)) {
      throw NumericError("mixing matrix for patch " + std::to_string(m) +
                         " is rank deficient (sigma_min " + std::to_string(s.sigma.back()) + ")");
    }
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

constexpr std::uint64_t kDownstreamSalt = 0x646F776E;

Sample draw_scene(const SceneSpec& spec, const std::vector<Tensor>& mixing, std::uint64_t seed,
                  std::uint64_t index) {
  Rng rng = Rng(seed).fork(index);
  Sample s;
  s.index = index;
  for (std::size_t a = 0; a < spec.attributes; ++a) s.attributes.push_back(rng.below(spec.categories));
  s.image_feats = Tensor({spec.visual_tokens, spec.d_img});
  for (std::size_t m = 0; m < spec.visual_tokens; ++m) {
    const Tensor& e = mixing[m];
    for (std::size_t r = 0; r < spec.d_img; ++r) {
      double v = 0.0;
      for (std::size_t a = 0; a < spec.attributes; ++a)
        v += e.at(r, a * spec.categories + s.attributes[a]);
      s.image_feats.at(m, r) = v + spec.noise_sigma * rng.normal();
    }
  }
  return s;
}

void fill_pretrain_text(const Vocabulary& vocab, Sample& s) {
  s.instr_ids = {Vocabulary::kWhat, Vocabulary::kDescribe};
  s.answer_ids.clear();
  for (std::size_t a = 0; a < s.attributes.size(); ++a)
    s.answer_ids.push_back(vocab.pretrain_value_token(a, s.attributes[a]));
}

}  // namespace

Dataset gen_pretrain(const SceneSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ContractError("gen_pretrain: n must be at least 1");
  const auto mixing = mixing_matrices(spec);
  const Vocabulary vocab(spec);
  Dataset d{.spec = spec, .tag = TaskTag::kPretrain, .seed = seed, .focus = 0, .samples = {}};
  for (std::size_t i = 0; i < n; ++i) {
    Sample s = draw_scene(spec, mixing, seed, i);
    fill_pretrain_text(vocab, s);
    s.tag = TaskTag::kPretrain;
    d.samples.push_back(std::move(s));
  }
  return d;
}

Dataset gen_probe(const SceneSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ContractError("gen_probe: n must be at least 1");
  const auto mixing = mixing_matrices(spec);
  const Vocabulary vocab(spec);
  Dataset d{.spec = spec, .tag = TaskTag::kProbe, .seed = seed, .focus = 0, .samples = {}};
  for (std::size_t i = 0; i < n; ++i) {
    Sample s = draw_scene(spec, mixing, seed, kProbeIndexOffset + i);
    fill_pretrain_text(vocab, s);
    s.tag = TaskTag::kProbe;
    d.samples.push_back(std::move(s));
  }
  return d;
}

Dataset gen_downstream(const SceneSpec& spec, std::size_t n, std::uint64_t seed, std::size_t focus) {
  if (focus >= spec.attributes) {
    throw ContractError("gen_downstream: focus attribute " + std::to_string(focus) +
                        " out of range for " + std::to_string(spec.attributes) + " attributes");
  }
  if (n == 0) throw ContractError("gen_downstream: n must be at least 1");
  const auto mixing = mixing_matrices(spec);
  const Vocabulary vocab(spec);
  Dataset d{.spec = spec, .tag = TaskTag::kDownstream, .seed = seed, .focus = focus, .samples = {}};
  for (std::size_t i = 0; i < n; ++i) {
    Sample s = draw_scene(spec, mixing, seed ^ kDownstreamSalt, i);
    s.instr_ids = {Vocabulary::kWhat, vocab.attribute_token(focus)};
    s.answer_ids = {vocab.downstream_value_token(s.attributes[focus])};
    s.tag = TaskTag::kDownstream;
    d.samples.push_back(std::move(s));
  }
  return d;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices) {
  const SceneSpec& spec = data.spec;
  Batch b;
  b.size = indices.size();
  for (auto i : indices) {
    b.instr_len = std::max(b.instr_len, data.samples.at(i).instr_ids.size());
    b.answer_len = std::max(b.answer_len, data.samples.at(i).answer_ids.size());
  }
  b.image_feats = Tensor({b.size, spec.visual_tokens, spec.d_img});
  b.instr_ids.assign(b.size * b.instr_len, kPadToken);
  b.instr_mask.assign(b.size * b.instr_len, 0);
  b.answer_ids.assign(b.size * b.answer_len, kPadToken);
  b.answer_mask.assign(b.size * b.answer_len, 0);
  const std::size_t feat = spec.visual_tokens * spec.d_img;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& s = data.samples[indices[k]];
    std::copy(s.image_feats.values().begin(), s.image_feats.values().end(),
              b.image_feats.values().begin() + k * feat);
    for (std::size_t n = 0; n < s.instr_ids.size(); ++n) {
      b.instr_ids[k * b.instr_len + n] = s.instr_ids[n];
      b.instr_mask[k * b.instr_len + n] = 1;
    }
    for (std::size_t t = 0; t < s.answer_ids.size(); ++t) {
      b.answer_ids[k * b.answer_len + t] = s.answer_ids[t];
      b.answer_mask[k * b.answer_len + t] = 1;
    }
  }
  return b;
}

Batch make_batch(const Dataset& data) {
  std::vector<std::size_t> all(data.samples.size());
  std::iota(all.begin(), all.end(), 0);
  return make_batch(data, all);
}

}  // namespace mdgd

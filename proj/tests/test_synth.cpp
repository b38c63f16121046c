#include <doctest.h>

#include <cmath>
#include <set>

#include "mdgd/errors.hpp"
#include "mdgd/synth.hpp"

using namespace mdgd;

namespace {

// Solves (E^T E) x = E^T f by Gaussian elimination with partial pivoting.
std::vector<double> least_squares(const Tensor& e, const double* f) {
  const std::size_t r = e.shape()[0], c = e.shape()[1];
  std::vector<std::vector<double>> a(c, std::vector<double>(c + 1, 0.0));
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t k = 0; k < r; ++k) a[i][j] += e.at(k, i) * e.at(k, j);
    for (std::size_t k = 0; k < r; ++k) a[i][c] += e.at(k, i) * f[k];
  }
  for (std::size_t p = 0; p < c; ++p) {
    std::size_t best = p;
    for (std::size_t i = p + 1; i < c; ++i)
      if (std::abs(a[i][p]) > std::abs(a[best][p])) best = i;
    std::swap(a[p], a[best]);
    for (std::size_t i = 0; i < c; ++i) {
      if (i == p) continue;
      const double m = a[i][p] / a[p][p];
      for (std::size_t j = p; j <= c; ++j) a[i][j] -= m * a[p][j];
    }
  }
  std::vector<double> x(c);
  for (std::size_t i = 0; i < c; ++i) x[i] = a[i][c] / a[i][i];
  return x;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  const SceneSpec spec;
  const Vocabulary v(spec);
  CHECK(v.size() == 37);
  std::set<std::size_t> seen{kPadToken, Vocabulary::kDescribe, Vocabulary::kWhat};
  for (std::size_t a = 0; a < 6; ++a) seen.insert(v.attribute_token(a));
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t c = 0; c < 4; ++c) seen.insert(v.pretrain_value_token(a, c));
  for (std::size_t c = 0; c < 4; ++c) seen.insert(v.downstream_value_token(c));
  CHECK(seen.size() == v.size());
  CHECK(*seen.rbegin() == v.size() - 1);
  CHECK(v.size() <= ModelConfig{}.vocab);
}

TEST_CASE("scene validation") {
  SceneSpec spec;
  spec.d_img = 16;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = SceneSpec{};
  spec.categories = 1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("mixing matrices") {
  const SceneSpec spec;
  const auto e = mixing_matrices(spec);
  REQUIRE(e.size() == spec.visual_tokens);
  for (const auto& m : e) CHECK(m.shape() == Shape{32, 24});
  CHECK(e[0] != e[1]);
  CHECK(mixing_matrices(spec)[3] == e[3]);
  SceneSpec other = spec;
  other.world_seed = 8;
  CHECK(mixing_matrices(other)[0] != e[0]);
}

TEST_CASE("noise-free scenes encode their attributes exactly") {
  SceneSpec spec;
  spec.noise_sigma = 0.0;
  const auto e = mixing_matrices(spec);
  const Dataset d = gen_pretrain(spec, 5, 11);
  for (const auto& s : d.samples) {
    for (std::size_t m = 0; m < spec.visual_tokens; ++m) {
      const auto x = least_squares(e[m], s.image_feats.values().data() + m * spec.d_img);
      for (std::size_t a = 0; a < spec.attributes; ++a)
        for (std::size_t c = 0; c < spec.categories; ++c)
          CHECK(x[a * spec.categories + c] ==
                doctest::Approx(c == s.attributes[a] ? 1.0 : 0.0).epsilon(1e-8).scale(1.0));
    }
  }
}

TEST_CASE("pretrain samples") {
  const SceneSpec spec;
  const Vocabulary v(spec);
  const Dataset d = gen_pretrain(spec, 10, 5);
  CHECK(d.samples.size() == 10);
  for (const auto& s : d.samples) {
    CHECK(s.instr_ids == std::vector<std::size_t>{Vocabulary::kWhat, Vocabulary::kDescribe});
    REQUIRE(s.answer_ids.size() == spec.attributes);
    for (std::size_t a = 0; a < spec.attributes; ++a)
      CHECK(s.answer_ids[a] == v.pretrain_value_token(a, s.attributes[a]));
    CHECK(s.image_feats.shape() == Shape{spec.visual_tokens, spec.d_img});
  }
  // Deterministic and prefix-stable.
  const Dataset longer = gen_pretrain(spec, 20, 5);
  for (std::size_t i = 0; i < 10; ++i) CHECK(longer.samples[i].image_feats == d.samples[i].image_feats);
  CHECK(gen_pretrain(spec, 10, 6).samples[0].image_feats != d.samples[0].image_feats);
  CHECK_THROWS_AS(gen_pretrain(spec, 0, 5), ContractError);
}

TEST_CASE("probe samples are disjoint from training samples") {
  const SceneSpec spec;
  const Dataset train = gen_pretrain(spec, 50, 5);
  const Dataset probe = gen_probe(spec, 50, 5);
  for (const auto& s : probe.samples) CHECK(s.index >= kProbeIndexOffset);
  for (const auto& p : probe.samples)
    for (const auto& t : train.samples) CHECK(p.image_feats != t.image_feats);
}

TEST_CASE("downstream samples") {
  const SceneSpec spec;
  const Vocabulary v(spec);
  const Dataset d = gen_downstream(spec, 400, 3, 2);
  std::vector<std::size_t> counts(spec.categories, 0);
  for (const auto& s : d.samples) {
    CHECK(s.instr_ids == std::vector<std::size_t>{Vocabulary::kWhat, v.attribute_token(2)});
    CHECK(s.answer_ids == std::vector<std::size_t>{v.downstream_value_token(s.attributes[2])});
    ++counts[s.attributes[2]];
  }
  // Categories are uniform: each count within 5 standard deviations of 100.
  for (auto c : counts) CHECK(std::abs(static_cast<double>(c) - 100.0) < 5.0 * std::sqrt(75.0));
  CHECK(gen_pretrain(spec, 1, 3).samples[0].image_feats != d.samples[0].image_feats);
  CHECK_THROWS_AS(gen_downstream(spec, 4, 3, 6), ContractError);
}

TEST_CASE("make_batch pads on the right") {
  const SceneSpec spec;
  Dataset mixed = gen_pretrain(spec, 2, 1);
  mixed.samples.push_back(gen_downstream(spec, 1, 1, 0).samples[0]);
  const Batch b = make_batch(mixed, {2, 0});
  CHECK(b.size == 2);
  CHECK(b.instr_len == 2);
  CHECK(b.answer_len == spec.attributes);
  for (std::size_t t = 0; t < b.answer_len; ++t) {
    CHECK(b.answer_mask[t] == (t == 0 ? 1 : 0));
    if (t > 0) CHECK(b.answer_ids[t] == kPadToken);
    CHECK(b.answer_mask[b.answer_len + t] == 1);
  }
  const std::size_t feat = spec.visual_tokens * spec.d_img;
  CHECK(b.image_feats[0] == mixed.samples[2].image_feats[0]);
  CHECK(b.image_feats[feat] == mixed.samples[0].image_feats[0]);
  CHECK(make_batch(mixed).size == 3);
}

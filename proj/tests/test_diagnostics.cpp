#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mdgd/diagnostics.hpp"
#include "mdgd/errors.hpp"

using namespace mdgd;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::size_t fields(const std::string& line) { return std::count(line.begin(), line.end(), ',') + 1; }

SceneSpec small_scene() {
  SceneSpec s;
  s.attributes = 2;
  s.categories = 2;
  s.visual_tokens = 4;
  s.d_img = 4;
  return s;
}

ModelConfig small_model() {
  ModelConfig c;
  c.d_img = 4;
  c.visual_tokens = 4;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq = 8;
  c.trainable_last_k = 1;
  return c;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

}  // namespace

TEST_CASE("hscore") {
  CHECK(hscore(0.4, 0.6) == doctest::Approx(0.48).epsilon(1e-15));
  CHECK(hscore(0.0, 0.0) == 0.0);
  CHECK(hscore(1.0, 1.0) == 1.0);
  CHECK(hscore(0.0, 0.9) == 0.0);
}

TEST_CASE("erank_report") {
  SUBCASE("constant states give unit rank everywhere") {
    Tensor states({5, 3, 4});
    for (std::size_t i = 0; i < states.size(); ++i) states[i] = 1.0 + static_cast<double>(i % 4);
    const ErankReport r = erank_report(states, "m", "probe", 2);
    REQUIRE(r.per_position.size() == 3);
    for (double e : r.per_position) CHECK(e == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(r.dataset_level == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(r.top_positions == std::vector<std::size_t>{0, 1});
  }
  SUBCASE("random states stay within bounds") {
    Rng rng(2);
    Tensor states({6, 3, 4});
    for (auto& v : states.values()) v = rng.normal();
    const ErankReport r = erank_report(states, "m", "probe", 10);
    for (double e : r.per_position) {
      CHECK(e >= 1.0);
      CHECK(e <= 4.0 + 1e-12);
    }
    CHECK(r.top_positions.size() == 3);
    CHECK(r.per_position[r.top_positions[0]] >= r.per_position[r.top_positions[2]]);
  }
}

TEST_CASE("model-level reports") {
  const ModelConfig c = small_model();
  const ParamSet ps = init_params(c);
  const Dataset probe = gen_probe(small_scene(), 7, 3);
  const ErankReport a = per_token_erank(ps, c, probe, "pretrained", "probe");
  const ParamSet copy = ps;
  const ErankReport b = per_token_erank(copy, c, probe, "pretrained", "probe");
  CHECK(a.per_position == b.per_position);
  CHECK(a.dataset_level == b.dataset_level);

  const std::string csv = erank_csv({a});
  const auto lines = lines_of(csv);
  CHECK(lines[0] == "model_tag,eval_set,position,erank,rank");
  CHECK(lines.size() == 1 + c.visual_tokens + 1);
  CHECK(lines.back().rfind("pretrained,probe,all,", 0) == 0);

  for (DumpKind kind : {DumpKind::kZvl, DumpKind::kVisualLast}) {
    const std::string dump = repr_dump_csv(ps, c, probe, kind, "pretrained");
    const auto rows = lines_of(dump);
    CHECK(rows.size() == 1 + probe.samples.size());
    for (const auto& r : rows) CHECK(fields(r) == 2 + c.d_model);
    CHECK(dump == repr_dump_csv(copy, c, probe, kind, "pretrained"));
  }

  const ScoreTable t = evaluate(ps, c, &probe, nullptr);
  CHECK(t.has_probe);
  CHECK_FALSE(t.has_target);
  CHECK(t.probe_accuracy.size() == 2);
  for (double v : t.probe_accuracy) CHECK((v >= 0.0 && v <= 1.0));
  const auto score_lines = lines_of(scores_csv({{"pretrained", t}}, 2));
  CHECK(score_lines[0] == "model_tag,probe_attr_0,probe_attr_1,avg,target,hscore");
  CHECK(fields(score_lines[1]) == 6);

  Dataset empty = probe;
  empty.samples.clear();
  CHECK_THROWS_AS(evaluate(ps, c, &empty, nullptr), ContractError);
}

TEST_CASE("compare_runs merges run directories") {
  const fs::path root = fs::temp_directory_path() / "mdgd_compare_test";
  fs::remove_all(root);
  std::vector<fs::path> dirs;
  for (int seed = 1; seed <= 5; ++seed) {
    const fs::path d = root / ("run" + std::to_string(seed));
    fs::create_directories(d);
    write(d / "run.json", R"({"command":"finetune","method":"mdgd","seed":)" + std::to_string(seed) +
                              R"(,"alpha":0.1})");
    write(d / "train.jsonl",
          "{\"step\":0,\"loss_vl_theta\":2.5,\"loss_v\":0,\"mean_cosine\":1,\"mask_fraction\":null}\n"
          "{\"step\":1,\"loss_vl_theta\":2.0,\"loss_v\":0.25,\"mean_cosine\":0.5,\"mask_fraction\":null}\n");
    if (seed != 3) {
      write(d / "erank.csv", "model_tag,eval_set,position,erank,rank\nmdgd,probe,0,3,1\nmdgd,probe,all,7.5,\n");
      write(d / "scores.csv", "model_tag,probe_attr_0,avg,target,hscore\nmdgd,0.5,0.5,1,0.6\n");
    }
    dirs.push_back(d);
  }
  const auto lines = lines_of(compare_runs(dirs));
  CHECK(lines[0] == kCompareHeader);
  REQUIRE(lines.size() == 1 + 5 * 2);
  CHECK(lines[1] == "mdgd,1,0.10000000000000001,0,2.5,0,1,,,,,");
  CHECK(lines[2] == "mdgd,1,0.10000000000000001,1,2,0.25,0.5,,7.5,0.5,1,0.6");
  CHECK(lines[6] == "mdgd,3,0.10000000000000001,1,2,0.25,0.5,,,,,");
  for (const auto& l : lines) CHECK(fields(l) == 12);

  fs::remove(dirs[0] / "train.jsonl");
  CHECK_THROWS_AS(compare_runs(dirs), IoError);
  fs::remove_all(root);
}

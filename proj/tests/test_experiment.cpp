#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "mdgd/checkpoint.hpp"
#include "mdgd/errors.hpp"
#include "mdgd/experiment.hpp"

using namespace mdgd;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run() {
  RunConfig c;
  c.model.d_img = 4;
  c.model.visual_tokens = 4;
  c.model.d_model = 8;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.d_ff = 16;
  c.model.max_seq = 8;
  c.model.trainable_last_k = 1;
  c.data.attributes = 2;
  c.data.categories = 2;
  c.data.pretrain_samples = 16;
  c.data.downstream_samples = 8;
  c.data.probe_samples = 8;
  c.data.target_samples = 8;
  c.pretrain.steps = 3;
  c.pretrain.batch_size = 4;
  c.finetune.steps = 2;
  c.finetune.batch_size = 4;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mdgd_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return exit_code_for(e);
  }
  return 0;
}

}  // namespace

TEST_CASE("config round trip") {
  const RunConfig c = tiny_run();
  const std::string text = canonical_config_text(c);
  const RunConfig back = parse_run_config(text);
  CHECK(canonical_config_text(back) == text);
  CHECK(back.model == c.model);
  CHECK(back.data == c.data);
  CHECK(back.pretrain == c.pretrain);
  CHECK(text.back() == '\n');
  CHECK(canonical_config_text(RunConfig{}) == canonical_config_text(parse_run_config("{}")));
}

TEST_CASE("config errors") {
  CHECK(code_of([] { parse_run_config(R"({"model":{"d_modell":8}})"); }) == 2);
  try {
    parse_run_config(R"({"model":{"d_modell":8}})");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("model.d_modell") != std::string::npos);
  }
  CHECK(code_of([] { parse_run_config(R"({"finetune":{"method":"adam"}})"); }) == 2);
  CHECK(code_of([] { parse_run_config(R"({"seed":"one"})"); }) == 2);
  CHECK(code_of([] { parse_run_config("{not json"); }) == 2);
  CHECK(code_of([] { load_run_config("/nonexistent/config.json"); }) == 3);
}

TEST_CASE("checkpoint format") {
  ParamSet ps = init_params(tiny_run().model);
  ps.at("embed.pos").value[0] = -0.0;
  ps.at("embed.pos").value[1] = 1e-310;  // subnormal survives
  const Checkpoint ckpt{ps, {{"tag", "pretrained"}}};
  const std::string bytes = encode_checkpoint(ckpt);
  CHECK(bytes.substr(0, 4) == "MDGD");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.metadata == ckpt.metadata);
  REQUIRE(back.params.size() == ps.size());
  for (const auto& [name, p] : ps) {
    const auto& v = back.params.at(name).value;
    CHECK(v.shape() == p.value.shape());
    CHECK(std::memcmp(v.values().data(), p.value.values().data(), v.size() * sizeof(double)) == 0);
  }
  CHECK(encode_checkpoint(back) == bytes);

  std::string bad_version = bytes;
  bad_version[4] = 2;
  CHECK(code_of([&] { decode_checkpoint(bad_version); }) == 4);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(code_of([&] { decode_checkpoint(bad_magic); }) == 4);
  CHECK(code_of([&] { decode_checkpoint(bytes.substr(0, bytes.size() - 8)); }) == 4);
  CHECK(code_of([&] { decode_checkpoint(bytes + "x"); }) == 4);
  CHECK(code_of([] { load_checkpoint("/nonexistent/model.ckpt"); }) == 3);

  const fs::path dir = scratch("ckpt");
  save_checkpoint(dir / "a.ckpt", ckpt);
  CHECK(read_file_bytes(dir / "a.ckpt") == bytes);
  fs::remove_all(dir);
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(IoError("x")) == 3);
  CHECK(exit_code_for(FormatError("x")) == 4);
  CHECK(exit_code_for(NumericError("x")) == 5);
  CHECK(exit_code_for(ContractError("x")) == 1);
}

TEST_CASE("step log lines carry every key") {
  StepDiagnostics d;
  d.step = 3;
  d.loss_vl_theta = 1.25;
  const auto j = nlohmann::json::parse(step_json_line(d, Method::kFinetune));
  CHECK(j.at("step") == 3);
  CHECK(j.at("loss_v").is_null());
  CHECK(j.at("mask_fraction").is_null());
  CHECK(j.at("method") == "finetune");
}

TEST_CASE("pipeline") {
  const RunConfig c = tiny_run();
  const fs::path dir = scratch("pipeline");
  const fs::path pre = dir / "pre";
  fs::create_directories(pre);
  const PipelineResult p = cmd_pretrain(c, pre);
  CHECK(p.log.size() == 3);
  for (const char* f : {"pretrained.ckpt", "pretrain.jsonl", "run.json", "run_meta.json"})
    CHECK(fs::exists(pre / f));

  SUBCASE("zero fine-tuning steps return the pre-trained weights") {
    RunConfig z = c;
    z.finetune.steps = 0;
    const fs::path out = dir / "zero";
    fs::create_directories(out);
    cmd_finetune(z, pre / "pretrained.ckpt", out);
    const Checkpoint a = load_checkpoint(pre / "pretrained.ckpt");
    const Checkpoint b = load_checkpoint(out / "finetuned.ckpt");
    CHECK(a.params == b.params);
  }

  SUBCASE("fine-tune, evaluate, diagnose") {
    const fs::path out = dir / "ft";
    fs::create_directories(out);
    const PipelineResult r = cmd_finetune(c, pre / "pretrained.ckpt", out);
    CHECK(r.log.size() == 2);
    const ScoreTable t = cmd_eval(out / "finetuned.ckpt", Suite::kAll, out);
    CHECK((t.hscore >= 0.0 && t.hscore <= 1.0));
    DiagnoseOptions opts;
    opts.checkpoints = {pre / "pretrained.ckpt", out / "finetuned.ckpt"};
    CHECK(cmd_diagnose(opts, out).filename() == "erank.csv");
    opts.report = Report::kCompare;
    opts.runs = {out};
    CHECK(fs::exists(cmd_diagnose(opts, out)));
  }

  SUBCASE("architecture mismatch") {
    RunConfig other = c;
    other.model.d_model = 16;
    other.model.d_ff = 32;
    const fs::path out = dir / "bad";
    fs::create_directories(out);
    CHECK(code_of([&] { cmd_finetune(other, pre / "pretrained.ckpt", out); }) != 0);
  }
  fs::remove_all(dir);
}

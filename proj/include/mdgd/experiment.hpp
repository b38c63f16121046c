#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdgd/autograd.hpp"
#include "mdgd/diagnostics.hpp"
#include "mdgd/model.hpp"
#include "mdgd/optim.hpp"
#include "mdgd/synth.hpp"

namespace mdgd {

struct DataConfig {
  std::size_t attributes = 6;
  std::size_t categories = 4;
  double noise_sigma = 0.1;
  std::uint64_t world_seed = 7;
  std::size_t pretrain_samples = 2048;
  std::size_t downstream_samples = 512;
  std::size_t probe_samples = 256;
  std::size_t target_samples = 256;
  std::size_t focus = 0;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct PretrainConfig {
  double eta = 0.2;
  std::size_t steps = 1500;
  std::size_t batch_size = 32;
  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "run";
  ModelConfig model;
  DataConfig data;
  PretrainConfig pretrain;
  MdgdConfig finetune;

  SceneSpec scene() const;
  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::json to_json(const RunConfig& c);
// Throws ConfigError with the JSON path of the first bad field.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
// Canonical text: sorted keys, two-space indent, trailing newline.
std::string canonical_config_text(const RunConfig& c);

// Resolves a relative output_dir against $MDGD_RUN_ROOT when set.
std::filesystem::path resolve_output_dir(const std::string& output_dir);

// Dataset derivations shared by every command, so that one config always
// regenerates the same sets.
Dataset pretrain_set(const RunConfig& c);
Dataset downstream_set(const RunConfig& c);
Dataset probe_set(const RunConfig& c);
Dataset target_set(const RunConfig& c);

// Atomic write: temp file in the same directory, then rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file_bytes(const std::filesystem::path& path);

std::string step_json_line(const StepDiagnostics& d, Method method);

struct PipelineResult {
  ParamSet params;
  std::vector<StepDiagnostics> log;
};

// pretrained.ckpt + pretrain.jsonl + run.json (+ run_meta.json sidecar).
PipelineResult cmd_pretrain(const RunConfig& config, const std::filesystem::path& out_dir);
// finetuned.ckpt + train.jsonl + run.json, starting from the given checkpoint.
PipelineResult cmd_finetune(const RunConfig& config, const std::filesystem::path& pretrained,
                            const std::filesystem::path& out_dir);

enum class Suite { kProbe, kTarget, kAll };
Suite parse_suite(const std::string& s);
// scores.csv for one checkpoint; returns the table.
ScoreTable cmd_eval(const std::filesystem::path& ckpt, Suite suite,
                    const std::filesystem::path& out_dir);

enum class Report { kErank, kDump, kCompare };
Report parse_report(const std::string& s);

struct DiagnoseOptions {
  Report report = Report::kErank;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::filesystem::path> runs;  // compare
  DumpKind dump = DumpKind::kVisualLast;
  std::string eval_set = "probe";  // probe | target
  std::size_t top_k = 10;
};
// Writes erank.csv, dump_<kind>.csv, or compare.csv into out_dir.
std::filesystem::path cmd_diagnose(const DiagnoseOptions& opts, const std::filesystem::path& out_dir);

// Exit code for an error raised by any command.
int exit_code_for(const std::exception& e);

}  // namespace mdgd

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mdgd/autograd.hpp"
#include "mdgd/model.hpp"
#include "mdgd/synth.hpp"

namespace mdgd {

struct ErankReport {
  std::string model_tag;
  std::string eval_set;
  std::vector<double> per_position;  // length M
  double dataset_level = 0.0;        // all positions stacked
  std::vector<std::size_t> top_positions;  // by erank, descending
};

// Final-layer visual states for every sample of the set, [n, M, d_model].
Tensor collect_visual_states(const ParamSet& params, const ModelConfig& config, const Dataset& data);

ErankReport erank_report(const Tensor& states, std::string model_tag, std::string eval_set,
                         std::size_t top_k = 10);
ErankReport per_token_erank(const ParamSet& params, const ModelConfig& config, const Dataset& data,
                            std::string model_tag, std::string eval_set, std::size_t top_k = 10);

enum class DumpKind { kZvl, kVisualLast };
DumpKind parse_dump_kind(const std::string& s);
const char* dump_kind_name(DumpKind k);

// CSV with header sample_id,model_tag,v0..v{d-1}; one row per sample.
std::string repr_dump_csv(const ParamSet& params, const ModelConfig& config, const Dataset& data,
                          DumpKind which, const std::string& model_tag);

struct ScoreTable {
  std::vector<double> probe_accuracy;  // per attribute
  double avg = 0.0;
  double target = 0.0;
  double hscore = 0.0;
  bool has_probe = false;
  bool has_target = false;
};

double hscore(double avg, double target);
// Per-attribute exact-match accuracy of greedy decoding on probe samples.
std::vector<double> probe_accuracy(const ParamSet& params, const ModelConfig& config,
                                   const Dataset& probe);
// Exact-match accuracy of the full answer on target-task samples.
double target_accuracy(const ParamSet& params, const ModelConfig& config, const Dataset& target);
ScoreTable evaluate(const ParamSet& params, const ModelConfig& config, const Dataset* probe,
                    const Dataset* target);

std::string erank_csv(const std::vector<ErankReport>& reports);
std::string scores_csv(const std::vector<std::pair<std::string, ScoreTable>>& rows,
                       std::size_t attributes);

// Column schema of compare_runs output.
inline constexpr const char* kCompareHeader =
    "method,seed,alpha,step,loss_vl_theta,loss_v,mean_cosine,mask_fraction,erank,probe_avg,"
    "target,hscore";

// Merges run directories (each holding run.json, train.jsonl and optionally
// scores.csv and erank.csv) into one CSV, one row per (method, seed, step).
std::string compare_runs(const std::vector<std::filesystem::path>& run_dirs);

std::string format_double(double v);

}  // namespace mdgd

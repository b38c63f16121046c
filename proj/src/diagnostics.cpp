#include "mdgd/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mdgd/errors.hpp"
#include "mdgd/spectral.hpp"

namespace mdgd {

namespace {

constexpr std::size_t kChunk = 128;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

template <typename Fn>
void for_each_chunk(const Dataset& data, Fn&& fn) {
  const std::size_t n = data.samples.size();
  for (std::size_t start = 0; start < n; start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, n - start));
    std::iota(idx.begin(), idx.end(), start);
    fn(start, make_batch(data, idx));
  }
}

}  // namespace

std::string format_double(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Tensor collect_visual_states(const ParamSet& params, const ModelConfig& config, const Dataset& data) {
  if (data.samples.empty()) throw ContractError("eval set is empty");
  const std::size_t M = config.visual_tokens, d = config.d_model;
  Tensor out({data.samples.size(), M, d});
  for_each_chunk(data, [&](std::size_t start, const Batch& batch) {
    const Tensor states = visual_states(params, config, batch.image_feats);
    std::copy(states.values().begin(), states.values().end(),
              out.values().begin() + start * M * d);
  });
  return out;
}

ErankReport erank_report(const Tensor& states, std::string model_tag, std::string eval_set,
                         std::size_t top_k) {
  const std::size_t n = states.dim(0), M = states.dim(1), d = states.dim(2);
  ErankReport r;
  r.model_tag = std::move(model_tag);
  r.eval_set = std::move(eval_set);
  for (std::size_t m = 0; m < M; ++m) {
    Tensor z({n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) z.at(i, j) = states[(i * M + m) * d + j];
    r.per_position.push_back(effective_rank(z));
  }
  r.dataset_level = effective_rank(states.reshaped({n * M, d}));
  std::vector<std::size_t> order(M);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return r.per_position[a] > r.per_position[b]; });
  order.resize(std::min(top_k, M));
  r.top_positions = std::move(order);
  return r;
}

ErankReport per_token_erank(const ParamSet& params, const ModelConfig& config, const Dataset& data,
                            std::string model_tag, std::string eval_set, std::size_t top_k) {
  return erank_report(collect_visual_states(params, config, data), std::move(model_tag),
                      std::move(eval_set), top_k);
}

DumpKind parse_dump_kind(const std::string& s) {
  if (s == "zvl") return DumpKind::kZvl;
  if (s == "visual_last") return DumpKind::kVisualLast;
  throw ConfigError("dump: unknown representation '" + s + "' (expected zvl or visual_last)");
}

const char* dump_kind_name(DumpKind k) { return k == DumpKind::kZvl ? "zvl" : "visual_last"; }

std::string repr_dump_csv(const ParamSet& params, const ModelConfig& config, const Dataset& data,
                          DumpKind which, const std::string& model_tag) {
  if (data.samples.empty()) throw ContractError("eval set is empty");
  const std::size_t d = config.d_model, M = config.visual_tokens;
  std::ostringstream os;
  os << "sample_id,model_tag";
  for (std::size_t j = 0; j < d; ++j) os << ",v" << j;
  os << '\n';
  for_each_chunk(data, [&](std::size_t start, const Batch& batch) {
    Tensor rows;
    if (which == DumpKind::kZvl) {
      Batch prompt = batch;
      prompt.answer_len = 0;
      prompt.answer_ids.clear();
      prompt.answer_mask.clear();
      rows = forward(params, config, prompt).zvl;
    } else {
      const Tensor states = visual_states(params, config, batch.image_feats);
      rows = Tensor({batch.size, d});
      for (std::size_t b = 0; b < batch.size; ++b)
        for (std::size_t j = 0; j < d; ++j) rows.at(b, j) = states[(b * M + (M - 1)) * d + j];
    }
    for (std::size_t b = 0; b < batch.size; ++b) {
      os << data.samples[start + b].index << ',' << model_tag;
      for (std::size_t j = 0; j < d; ++j) os << ',' << format_double(rows.at(b, j));
      os << '\n';
    }
  });
  return os.str();
}

double hscore(double avg, double target) {
  const double denom = avg + target;
  return denom > 0.0 ? 2.0 * avg * target / denom : 0.0;
}

std::vector<double> probe_accuracy(const ParamSet& params, const ModelConfig& config,
                                   const Dataset& probe) {
  if (probe.samples.empty()) throw ContractError("evaluate: empty probe set");
  const std::size_t A = probe.spec.attributes;
  std::vector<double> hits(A, 0.0);
  for_each_chunk(probe, [&](std::size_t start, const Batch& batch) {
    const auto decoded = greedy_decode(params, config, batch, A);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const auto& gold = probe.samples[start + b].answer_ids;
      for (std::size_t a = 0; a < A; ++a) hits[a] += decoded[b][a] == gold[a] ? 1.0 : 0.0;
    }
  });
  for (auto& h : hits) h /= static_cast<double>(probe.samples.size());
  return hits;
}

double target_accuracy(const ParamSet& params, const ModelConfig& config, const Dataset& target) {
  if (target.samples.empty()) throw ContractError("evaluate: empty target set");
  std::size_t answer_len = 0;
  for (const auto& s : target.samples) answer_len = std::max(answer_len, s.answer_ids.size());
  double hits = 0.0;
  for_each_chunk(target, [&](std::size_t start, const Batch& batch) {
    const auto decoded = greedy_decode(params, config, batch, answer_len);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const auto& gold = target.samples[start + b].answer_ids;
      hits += std::equal(gold.begin(), gold.end(), decoded[b].begin()) ? 1.0 : 0.0;
    }
  });
  return hits / static_cast<double>(target.samples.size());
}

ScoreTable evaluate(const ParamSet& params, const ModelConfig& config, const Dataset* probe,
                    const Dataset* target) {
  if (!probe && !target) throw ContractError("evaluate: no evaluation set given");
  ScoreTable t;
  if (probe) {
    t.probe_accuracy = probe_accuracy(params, config, *probe);
    t.avg = std::accumulate(t.probe_accuracy.begin(), t.probe_accuracy.end(), 0.0) /
            static_cast<double>(t.probe_accuracy.size());
    t.has_probe = true;
  }
  if (target) {
    t.target = target_accuracy(params, config, *target);
    t.has_target = true;
  }
  if (t.has_probe && t.has_target) t.hscore = hscore(t.avg, t.target);
  return t;
}

std::string erank_csv(const std::vector<ErankReport>& reports) {
  std::ostringstream os;
  os << "model_tag,eval_set,position,erank,rank\n";
  for (const auto& r : reports) {
    std::vector<std::size_t> rank(r.per_position.size(), 0);
    std::vector<std::size_t> order(r.per_position.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return r.per_position[a] > r.per_position[b];
    });
    for (std::size_t k = 0; k < order.size(); ++k) rank[order[k]] = k + 1;
    for (std::size_t m = 0; m < r.per_position.size(); ++m)
      os << r.model_tag << ',' << r.eval_set << ',' << m << ',' << format_double(r.per_position[m])
         << ',' << rank[m] << '\n';
    os << r.model_tag << ',' << r.eval_set << ",all," << format_double(r.dataset_level) << ",\n";
  }
  return os.str();
}

std::string scores_csv(const std::vector<std::pair<std::string, ScoreTable>>& rows,
                       std::size_t attributes) {
  std::ostringstream os;
  os << "model_tag";
  for (std::size_t a = 0; a < attributes; ++a) os << ",probe_attr_" << a;
  os << ",avg,target,hscore\n";
  for (const auto& [tag, t] : rows) {
    os << tag;
    for (std::size_t a = 0; a < attributes; ++a)
      os << ',' << (t.has_probe ? format_double(t.probe_accuracy.at(a)) : "");
    os << ',' << (t.has_probe ? format_double(t.avg) : "");
    os << ',' << (t.has_target ? format_double(t.target) : "");
    os << ',' << (t.has_probe && t.has_target ? format_double(t.hscore) : "");
    os << '\n';
  }
  return os.str();
}

std::string compare_runs(const std::vector<std::filesystem::path>& run_dirs) {
  using nlohmann::json;
  std::ostringstream os;
  os << kCompareHeader << '\n';
  for (const auto& dir : run_dirs) {
    const auto run_path = dir / "run.json";
    const auto log_path = dir / "train.jsonl";
    for (const auto& p : {run_path, log_path})
      if (!std::filesystem::exists(p)) throw IoError("compare: missing " + p.string());
    const json run = json::parse(read_file(run_path));
    const std::string method = run.at("method").get<std::string>();
    const std::string seed = std::to_string(run.at("seed").get<std::uint64_t>());
    const std::string alpha = run.contains("alpha") && run["alpha"].is_number()
                                  ? format_double(run["alpha"].get<double>())
                                  : "";

    // Final-row extras.
    std::string erank, probe_avg, target, hs;
    if (std::filesystem::exists(dir / "erank.csv")) {
      std::istringstream in(read_file(dir / "erank.csv"));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        const auto f = split_csv_line(line);
        if (f.size() >= 4 && f[2] == "all") {
          erank = f[3];
          break;
        }
      }
    }
    if (std::filesystem::exists(dir / "scores.csv")) {
      std::istringstream in(read_file(dir / "scores.csv"));
      std::string header, line;
      std::getline(in, header);
      const auto cols = split_csv_line(header);
      if (std::getline(in, line)) {
        const auto f = split_csv_line(line);
        for (std::size_t i = 0; i < cols.size() && i < f.size(); ++i) {
          if (cols[i] == "avg") probe_avg = f[i];
          if (cols[i] == "target") target = f[i];
          if (cols[i] == "hscore") hs = f[i];
        }
      }
    }

    std::istringstream log(read_file(log_path));
    std::vector<json> steps;
    for (std::string line; std::getline(log, line);)
      if (!line.empty()) steps.push_back(json::parse(line));
    auto num = [](const json& j, const char* key) -> std::string {
      return j.contains(key) && j[key].is_number() ? format_double(j[key].get<double>()) : "";
    };
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const json& s = steps[i];
      const bool last = i + 1 == steps.size();
      os << method << ',' << seed << ',' << alpha << ',' << s.at("step").get<std::size_t>() << ','
         << num(s, "loss_vl_theta") << ',' << num(s, "loss_v") << ',' << num(s, "mean_cosine")
         << ',' << num(s, "mask_fraction") << ',' << (last ? erank : "") << ','
         << (last ? probe_avg : "") << ',' << (last ? target : "") << ',' << (last ? hs : "")
         << '\n';
    }
  }
  return os.str();
}

}  // namespace mdgd

#include "mdgd/experiment.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>

#include "mdgd/checkpoint.hpp"
#include "mdgd/errors.hpp"
#include "mdgd/spectral.hpp"

namespace mdgd {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

SceneSpec RunConfig::scene() const {
  return SceneSpec{.attributes = data.attributes,
                   .categories = data.categories,
                   .noise_sigma = data.noise_sigma,
                   .visual_tokens = model.visual_tokens,
                   .d_img = model.d_img,
                   .world_seed = data.world_seed};
}

void RunConfig::validate() const {
  model.validate();
  scene().validate();
  finetune.validate();
  if (data.focus >= data.attributes) throw ConfigError("data.focus: must be below data.attributes");
  if (Vocabulary(scene()).size() > model.vocab) {
    throw ConfigError("model.vocab: task alphabet needs " +
                      std::to_string(Vocabulary(scene()).size()) + " tokens");
  }
  if (model.visual_tokens + 2 + data.attributes > model.max_seq) {
    throw ConfigError("model.max_seq: pretrain sequences need " +
                      std::to_string(model.visual_tokens + 2 + data.attributes) + " positions");
  }
  for (auto [field, n] : {std::pair{"data.pretrain_samples", data.pretrain_samples},
                          {"data.downstream_samples", data.downstream_samples},
                          {"data.probe_samples", data.probe_samples},
                          {"data.target_samples", data.target_samples}})
    if (n == 0) throw ConfigError(std::string(field) + ": must be positive");
  if (!(pretrain.eta > 0.0)) throw ConfigError("pretrain.eta: must be positive");
  if (pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size: must be positive");
}

json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& d = c.data;
  const auto& f = c.finetune;
  return json{
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"model",
       {{"d_img", m.d_img}, {"visual_tokens", m.visual_tokens}, {"vocab", m.vocab},
        {"d_model", m.d_model}, {"n_layers", m.n_layers}, {"n_heads", m.n_heads},
        {"d_ff", m.d_ff}, {"max_seq", m.max_seq}, {"trainable_last_k", m.trainable_last_k},
        {"train_output_head", m.train_output_head}, {"seed", m.seed}}},
      {"data",
       {{"attributes", d.attributes}, {"categories", d.categories},
        {"noise_sigma", d.noise_sigma}, {"world_seed", d.world_seed},
        {"pretrain_samples", d.pretrain_samples}, {"downstream_samples", d.downstream_samples},
        {"probe_samples", d.probe_samples}, {"target_samples", d.target_samples},
        {"focus", d.focus}}},
      {"pretrain",
       {{"eta", c.pretrain.eta}, {"steps", c.pretrain.steps},
        {"batch_size", c.pretrain.batch_size}}},
      {"finetune",
       {{"eta", f.eta}, {"method", method_name(f.method)}, {"alpha", f.alpha},
        {"mask_granularity", granularity_name(f.mask_granularity)}, {"eps_proj", f.eps_proj},
        {"lv_normalization", f.lv_normalization == ag::L1Norm::kMean ? "mean" : "sum"},
        {"steps", f.steps}, {"batch_size", f.batch_size}}},
  };
}

namespace {

// Walks one JSON object, dispatching known keys and rejecting the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    for (const auto& [key, _] : j_.items()) {
      (void)_;
      keys_.push_back(key);
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    auto it = j_.find(key);
    seen_.push_back(key);
    if (it == j_.end()) return;
    const std::string where = path_.empty() ? key : path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError(where + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_unsigned()) throw ConfigError(where + ": expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError(where + ": expected a number");
    } else {
      if (!it->is_string()) throw ConfigError(where + ": expected a string");
    }
    out = it->get<T>();
  }

  const json* child(const char* key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& k : keys_)
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
        throw ConfigError((path_.empty() ? k : path_ + "." + k) + ": unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> keys_;
  std::vector<std::string> seen_;
};

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);
  if (const json* m = root.child("model")) {
    Section s(*m, "model");
    s.get("d_img", c.model.d_img);
    s.get("visual_tokens", c.model.visual_tokens);
    s.get("vocab", c.model.vocab);
    s.get("d_model", c.model.d_model);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("d_ff", c.model.d_ff);
    s.get("max_seq", c.model.max_seq);
    s.get("trainable_last_k", c.model.trainable_last_k);
    s.get("train_output_head", c.model.train_output_head);
    s.get("seed", c.model.seed);
    s.finish();
  }
  if (const json* d = root.child("data")) {
    Section s(*d, "data");
    s.get("attributes", c.data.attributes);
    s.get("categories", c.data.categories);
    s.get("noise_sigma", c.data.noise_sigma);
    s.get("world_seed", c.data.world_seed);
    s.get("pretrain_samples", c.data.pretrain_samples);
    s.get("downstream_samples", c.data.downstream_samples);
    s.get("probe_samples", c.data.probe_samples);
    s.get("target_samples", c.data.target_samples);
    s.get("focus", c.data.focus);
    s.finish();
  }
  if (const json* p = root.child("pretrain")) {
    Section s(*p, "pretrain");
    s.get("eta", c.pretrain.eta);
    s.get("steps", c.pretrain.steps);
    s.get("batch_size", c.pretrain.batch_size);
    s.finish();
  }
  if (const json* f = root.child("finetune")) {
    Section s(*f, "finetune");
    std::string method = method_name(c.finetune.method);
    std::string granularity = granularity_name(c.finetune.mask_granularity);
    std::string lv = c.finetune.lv_normalization == ag::L1Norm::kMean ? "mean" : "sum";
    s.get("eta", c.finetune.eta);
    s.get("method", method);
    s.get("alpha", c.finetune.alpha);
    s.get("mask_granularity", granularity);
    s.get("eps_proj", c.finetune.eps_proj);
    s.get("lv_normalization", lv);
    s.get("steps", c.finetune.steps);
    s.get("batch_size", c.finetune.batch_size);
    s.finish();
    c.finetune.method = parse_method(method);
    c.finetune.mask_granularity = parse_granularity(granularity);
    if (lv == "mean") c.finetune.lv_normalization = ag::L1Norm::kMean;
    else if (lv == "sum") c.finetune.lv_normalization = ag::L1Norm::kSum;
    else throw ConfigError("finetune.lv_normalization: expected 'mean' or 'sum'");
  }
  root.finish();
  c.finetune.seed = c.seed;
  c.validate();
  return c;
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("config not found: " + path.string());
  return parse_run_config(read_file_bytes(path));
}

std::string canonical_config_text(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

std::filesystem::path resolve_output_dir(const std::string& output_dir) {
  std::filesystem::path p(output_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("MDGD_RUN_ROOT"); root && *root) return std::filesystem::path(root) / p;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Datasets

namespace {

constexpr std::uint64_t kPretrainSalt = 0x707265;
constexpr std::uint64_t kTargetSalt = 0x746172;

std::uint64_t world_stream(const RunConfig& c, std::uint64_t salt) {
  return Rng(c.data.world_seed).fork(salt).next_u64();
}

}  // namespace

Dataset pretrain_set(const RunConfig& c) {
  return gen_pretrain(c.scene(), c.data.pretrain_samples, world_stream(c, kPretrainSalt));
}

Dataset probe_set(const RunConfig& c) {
  return gen_probe(c.scene(), c.data.probe_samples, world_stream(c, kPretrainSalt));
}

Dataset downstream_set(const RunConfig& c) {
  return gen_downstream(c.scene(), c.data.downstream_samples, Rng(c.seed).fork(0x6474).next_u64(),
                        c.data.focus);
}

Dataset target_set(const RunConfig& c) {
  return gen_downstream(c.scene(), c.data.target_samples, world_stream(c, kTargetSalt), c.data.focus);
}

// ---------------------------------------------------------------------------
// Files

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string step_json_line(const StepDiagnostics& d, Method method) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json cos = json::array();
  for (double c : d.block_cosines) cos.push_back(std::isfinite(c) ? json(c) : json(nullptr));
  json j = {{"step", d.step},
            {"method", method_name(method)},
            {"loss_vl_theta", d.loss_vl_theta},
            {"loss_vl_phi", opt(d.loss_vl_phi)},
            {"loss_v", opt(d.loss_v)},
            {"block_cosines", cos},
            {"mean_cosine", opt(d.mean_cosine)},
            {"g_tilde_norm", opt(d.g_tilde_norm)},
            {"mask_fraction", opt(d.mask_fraction)},
            {"grad_norm_task", d.grad_norm_task},
            {"grad_norm_align", opt(d.grad_norm_align)},
            {"update_norm", d.update_norm}};
  return j.dump() + "\n";
}

namespace {

std::string log_text(const std::vector<StepDiagnostics>& log, Method method) {
  std::string out;
  for (const auto& d : log) out += step_json_line(d, method);
  return out;
}

void write_run_files(const std::filesystem::path& dir, const json& run) {
  write_file_atomic(dir / "run.json", run.dump(2) + "\n");
  // Wall-clock data lives only in this sidecar.
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  write_file_atomic(dir / "run_meta.json", json{{"finished_utc", stamp}}.dump(2) + "\n");
}

void check_architecture(const ParamSet& loaded, const ModelConfig& model) {
  const ParamSet expected = init_params(model);
  if (loaded.size() != expected.size())
    throw FormatError("checkpoint parameter set does not match the model config");
  for (const auto& [name, p] : expected) {
    auto it = loaded.find(name);
    if (it == loaded.end() || it->second.value.shape() != p.value.shape())
      throw FormatError("checkpoint tensor '" + name + "' missing or mis-shaped");
  }
}

struct LoadedModel {
  RunConfig config;
  ParamSet params;
  std::string tag;
};

LoadedModel load_model(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  LoadedModel m;
  try {
    m.config = run_config_from_json(ckpt.metadata.at("config"));
    m.tag = ckpt.metadata.at("tag").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError("checkpoint metadata incomplete: " + std::string(e.what()));
  }
  check_architecture(ckpt.params, m.config.model);
  m.params = std::move(ckpt.params);
  apply_trainable_policy(m.params, m.config.model);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands

PipelineResult cmd_pretrain(const RunConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  ParamSet init = init_params(config.model);
  set_all_trainable(init, true);
  MdgdConfig opt = config.finetune;
  opt.method = Method::kFinetune;
  opt.eta = config.pretrain.eta;
  opt.steps = config.pretrain.steps;
  opt.batch_size = config.pretrain.batch_size;
  opt.seed = config.seed;
  TrainResult r = train_loop(init, config.model, pretrain_set(config), opt);

  Checkpoint ckpt{.params = r.theta, .metadata = {{"tag", "pretrained"}, {"config", to_json(config)}}};
  save_checkpoint(out_dir / "pretrained.ckpt", ckpt);
  write_file_atomic(out_dir / "pretrain.jsonl", log_text(r.log, Method::kFinetune));
  write_run_files(out_dir, {{"command", "pretrain"}, {"method", "pretrained"}, {"seed", config.seed},
                            {"alpha", nullptr}});
  return {std::move(r.theta), std::move(r.log)};
}

PipelineResult cmd_finetune(const RunConfig& config, const std::filesystem::path& pretrained,
                            const std::filesystem::path& out_dir) {
  config.validate();
  Checkpoint ckpt = load_checkpoint(pretrained);
  check_architecture(ckpt.params, config.model);
  ParamSet phi = std::move(ckpt.params);
  apply_trainable_policy(phi, config.model);
  MdgdConfig opt = config.finetune;
  opt.seed = config.seed;
  TrainResult r = train_loop(phi, config.model, downstream_set(config), opt);

  const std::string tag = method_name(opt.method);
  save_checkpoint(out_dir / "finetuned.ckpt",
                  Checkpoint{.params = r.theta, .metadata = {{"tag", tag}, {"config", to_json(config)}}});
  write_file_atomic(out_dir / "train.jsonl", log_text(r.log, opt.method));
  write_run_files(out_dir, {{"command", "finetune"},
                            {"method", tag},
                            {"seed", config.seed},
                            {"alpha", opt.method == Method::kMdgdGm ? json(opt.alpha) : json(nullptr)}});
  return {std::move(r.theta), std::move(r.log)};
}

Suite parse_suite(const std::string& s) {
  if (s == "probe") return Suite::kProbe;
  if (s == "target") return Suite::kTarget;
  if (s == "all") return Suite::kAll;
  throw ConfigError("--suite: expected probe, target or all");
}

ScoreTable cmd_eval(const std::filesystem::path& ckpt, Suite suite, const std::filesystem::path& out_dir) {
  const LoadedModel m = load_model(ckpt);
  std::optional<Dataset> probe, target;
  if (suite != Suite::kTarget) probe = probe_set(m.config);
  if (suite != Suite::kProbe) target = target_set(m.config);
  ScoreTable t = evaluate(m.params, m.config.model, probe ? &*probe : nullptr, target ? &*target : nullptr);
  write_file_atomic(out_dir / "scores.csv", scores_csv({{m.tag, t}}, m.config.data.attributes));
  return t;
}

Report parse_report(const std::string& s) {
  if (s == "erank") return Report::kErank;
  if (s == "dump") return Report::kDump;
  if (s == "compare") return Report::kCompare;
  throw ConfigError("--report: expected erank, dump or compare");
}

std::filesystem::path cmd_diagnose(const DiagnoseOptions& opts, const std::filesystem::path& out_dir) {
  if (opts.report == Report::kCompare) {
    if (opts.runs.empty()) throw ConfigError("--run: compare needs at least one run directory");
    const auto path = out_dir / "compare.csv";
    write_file_atomic(path, compare_runs(opts.runs));
    return path;
  }
  if (opts.checkpoints.empty()) throw ConfigError("--ckpt: at least one checkpoint required");
  if (opts.eval_set != "probe" && opts.eval_set != "target")
    throw ConfigError("--eval-set: expected probe or target");

  std::vector<ErankReport> reports;
  std::string dump;
  for (const auto& path : opts.checkpoints) {
    const LoadedModel m = load_model(path);
    const Dataset data = opts.eval_set == "probe" ? probe_set(m.config) : target_set(m.config);
    if (opts.report == Report::kErank) {
      reports.push_back(per_token_erank(m.params, m.config.model, data, m.tag, opts.eval_set, opts.top_k));
    } else {
      std::string csv = repr_dump_csv(m.params, m.config.model, data, opts.dump, m.tag);
      if (!dump.empty()) csv.erase(0, csv.find('\n') + 1);  // one header
      dump += csv;
    }
  }
  const auto path = opts.report == Report::kErank
                        ? out_dir / "erank.csv"
                        : out_dir / (std::string("dump_") + dump_kind_name(opts.dump) + ".csv");
  write_file_atomic(path, opts.report == Report::kErank ? erank_csv(reports) : dump);
  return path;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const IoError*>(&e)) return 3;
  if (dynamic_cast<const FormatError*>(&e)) return 4;
  if (dynamic_cast<const NumericError*>(&e)) return 5;
  return 1;
}

}  // namespace mdgd

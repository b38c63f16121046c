// Command-line driver: pretrain, finetune, eval, diagnose.

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "mdgd/errors.hpp"
#include "mdgd/experiment.hpp"

namespace {

std::filesystem::path output_dir_for(const std::string& flag, const std::string& from_config) {
  return mdgd::resolve_output_dir(flag.empty() ? from_config : flag);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modality-decoupled gradient descent laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_flag, pretrained, method, ckpt_flag, suite = "all";
  std::optional<double> alpha;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;

  auto* pretrain = app.add_subcommand("pretrain", "train the reference model on the pretraining task");
  pretrain->add_option("config", config_path, "run config (JSON)")->required();
  pretrain->add_option("--out", out_flag, "output directory (default: config output_dir)");
  pretrain->add_option("--seed", seed, "override the config seed");

  auto* finetune = app.add_subcommand("finetune", "fine-tune a pretrained checkpoint on the downstream task");
  finetune->add_option("config", config_path, "run config (JSON)")->required();
  finetune->add_option("--pretrained", pretrained, "pretrained checkpoint")->required();
  finetune->add_option("--method", method, "finetune|finetune_align|mdgd|mdgd_noalign|mdgd_gm");
  finetune->add_option("--alpha", alpha, "mask fraction for mdgd_gm");
  finetune->add_option("--seed", seed, "override the config seed");
  finetune->add_option("--steps", steps, "override finetune.steps");
  finetune->add_option("--out", out_flag, "output directory (default: config output_dir)");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on probe and/or target suites");
  eval->add_option("--ckpt", ckpt_flag, "checkpoint")->required();
  eval->add_option("--suite", suite, "probe|target|all");
  eval->add_option("--out", out_flag, "output directory (default: checkpoint directory)");

  mdgd::DiagnoseOptions diag;
  std::string report = "erank", dump_kind = "visual_last";
  std::vector<std::string> ckpts, runs;
  auto* diagnose = app.add_subcommand("diagnose", "representation reports");
  diagnose->add_option("--ckpt", ckpts, "checkpoint (repeatable)");
  diagnose->add_option("--run", runs, "run directory for --report compare (repeatable)");
  diagnose->add_option("--report", report, "erank|dump|compare");
  diagnose->add_option("--which", dump_kind, "zvl|visual_last (dump only)");
  diagnose->add_option("--eval-set", diag.eval_set, "probe|target");
  diagnose->add_option("--top-k", diag.top_k, "positions reported as top by erank");
  diagnose->add_option("--out", out_flag, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) {
      mdgd::RunConfig cfg = mdgd::load_run_config(config_path);
      if (seed) cfg.seed = cfg.finetune.seed = *seed;
      const auto out = output_dir_for(out_flag, cfg.output_dir);
      mdgd::cmd_pretrain(cfg, out);
      std::cout << "wrote " << (out / "pretrained.ckpt").string() << '\n';
    } else if (*finetune) {
      mdgd::RunConfig cfg = mdgd::load_run_config(config_path);
      if (!method.empty()) cfg.finetune.method = mdgd::parse_method(method);
      if (alpha) cfg.finetune.alpha = *alpha;
      if (seed) cfg.seed = cfg.finetune.seed = *seed;
      if (steps) cfg.finetune.steps = *steps;
      cfg.validate();
      const auto out = output_dir_for(out_flag, cfg.output_dir);
      mdgd::cmd_finetune(cfg, pretrained, out);
      std::cout << "wrote " << (out / "finetuned.ckpt").string() << '\n';
    } else if (*eval) {
      const std::filesystem::path ckpt(ckpt_flag);
      const auto out = out_flag.empty() ? ckpt.parent_path() : std::filesystem::path(out_flag);
      const auto t = mdgd::cmd_eval(ckpt, mdgd::parse_suite(suite), out);
      std::cout << "avg " << t.avg << " target " << t.target << " hscore " << t.hscore << '\n';
    } else if (*diagnose) {
      diag.report = mdgd::parse_report(report);
      diag.dump = mdgd::parse_dump_kind(dump_kind);
      for (const auto& c : ckpts) diag.checkpoints.emplace_back(c);
      for (const auto& r : runs) diag.runs.emplace_back(r);
      const auto path = mdgd::cmd_diagnose(diag, out_flag);
      std::cout << "wrote " << path.string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return mdgd::exit_code_for(e);
  }
  return 0;
}

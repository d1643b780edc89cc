// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Command-line front-end for the two-stage enhancement pipeline.
// Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "qnse/pipeline.hpp"
#include "qnse/wav.hpp"

namespace fs = std::filesystem;
using namespace qnse;

namespace {

struct CommonOpts {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "experiment config file");
  cmd->add_option("--seed", opts.seed, "override the master seed")
      ->each([&opts](const std::string&) { opts.seed_set = true; });
}

ExperimentConfig resolve_config(const CommonOpts& opts) {
  ExperimentConfig cfg = opts.config_path.empty()
                             ? ExperimentConfig::desk_default()
                             : ExperimentConfig::load(opts.config_path);
  if (opts.seed_set) cfg.seed = opts.seed;
  cfg.validate();
  return cfg;
}

std::string ckpt_path(const ExperimentConfig& cfg, const std::string& name) {
  return (fs::path(cfg.out_dir) / "checkpoints" / name).string();
}

int cmd_corpus_build(const CommonOpts& opts) {
  const ExperimentConfig cfg = resolve_config(opts);
  const DatasetManifest manifest = build_dataset(
      cfg.mix, cfg.corpus_path(), derive_seed(cfg.seed, "corpus"), cfg.stft);
  std::cout << "built " << manifest.records.size() << " utterances under "
            << cfg.corpus_path() << "\n";
  return 0;
}

int cmd_corpus_label(const CommonOpts& opts) {
  const ExperimentConfig cfg = resolve_config(opts);
  const DatasetManifest manifest = DatasetManifest::load(cfg.manifest_path());
  const std::vector<ScoredPair> pairs = label_dataset(manifest, cfg.metric);
  const std::string csv = (fs::path(cfg.corpus_path()) / "pairs.csv").string();
  save_scored_pairs_csv(csv, pairs);
  std::cout << "labeled " << pairs.size() << " pairs -> " << csv << "\n";
  return 0;
}

int cmd_train_qnet(const CommonOpts& opts) {
  const ExperimentConfig cfg = resolve_config(opts);
  const StageAResult r = run_stage_a(cfg);
  std::cout << "qnet checkpoint: " << r.qnet_ckpt << "\n"
            << "held-out pearson_r: " << format_g(r.pearson_r) << "\n"
            << "frozen val mse: " << format_g(r.best_val_mse) << "\n"
            << "epochs: " << r.epochs_run << "\n";
  return 0;
}

int cmd_train_pretrain(const CommonOpts& opts) {
  const ExperimentConfig cfg = resolve_config(opts);
  ensure_run_dirs(cfg);
  DatasetManifest manifest = DatasetManifest::load(cfg.manifest_path());
  EnhancerModel enh =
      EnhancerModel::build(cfg.enhancer_config(), derive_seed(cfg.seed, "enhancer"));
  PretrainHyper hyper = cfg.pretrain_hyper;
  hyper.seed = derive_seed(cfg.seed, "pretrain");
  const TrainingHistory history =
      pretrain_mse(enh, load_spec_pairs(manifest, Split::train),
                   load_spec_pairs(manifest, Split::validation), hyper);
  save_history_csv((fs::path(cfg.out_dir) / "traces" / "pretrain_history.csv").string(),
                   history);
  enh.save(ckpt_path(cfg, "enhancer_pretrained.ckpt"));
  std::cout << "pretrained enhancer after " << history.size() << " epochs, best val mse "
            << format_g(history.empty() ? 0.0 : history.back().val_mse) << "\n";
  return 0;
}

int cmd_train_finetune(const CommonOpts& opts) {
  const ExperimentConfig cfg = resolve_config(opts);
  const StageBResult r = run_stage_b(cfg, ckpt_path(cfg, "qnet.ckpt"));
  std::cout << "finetuned checkpoint: " << r.finetuned_ckpt << "\n"
            << "baseline true quality: " << format_g(r.baseline_true_quality) << "\n"
            << "best true quality: " << format_g(r.best_true_quality) << " at iteration "
            << r.best_iteration << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& split_name_str) {
  const ExperimentConfig cfg = resolve_config(opts);
  ensure_run_dirs(cfg);
  const DatasetManifest manifest = DatasetManifest::load(cfg.manifest_path());
  const Split split = parse_split(split_name_str);

  std::vector<std::pair<std::string, const EnhancerModel*>> systems;
  EnhancerModel pretrained, finetuned;
  if (fs::exists(ckpt_path(cfg, "enhancer_pretrained.ckpt"))) {
    pretrained = EnhancerModel::load(cfg.enhancer_config(),
                                     ckpt_path(cfg, "enhancer_pretrained.ckpt"));
    systems.emplace_back("mse", &pretrained);
  }
  if (fs::exists(ckpt_path(cfg, "enhancer_finetuned.ckpt"))) {
    finetuned = EnhancerModel::load(cfg.enhancer_config(),
                                    ckpt_path(cfg, "enhancer_finetuned.ckpt"));
    systems.emplace_back("quality_net", &finetuned);
  }

  const EvalTable table = evaluate_models(manifest, systems, split);
  const std::string path =
      (fs::path(cfg.out_dir) / "tables" / ("eval_" + split_name_str + ".csv")).string();
  save_eval_table(path, table);
  std::cout << table.to_csv();
  return 0;
}

int cmd_fooling(const CommonOpts& opts) {
  ExperimentConfig cfg = resolve_config(opts);
  // Extended drift run: no early stopping, sparse logging.
  cfg.finetune_hyper.iterations = cfg.fooling_iterations;
  cfg.finetune_hyper.patience = 0;
  cfg.finetune_hyper.log_every = cfg.fooling_log_every;
  ensure_run_dirs(cfg);

  const DatasetManifest manifest = DatasetManifest::load(cfg.manifest_path());
  const QualityNetModel qnet =
      QualityNetModel::load(cfg.qnet_config(), ckpt_path(cfg, "qnet.ckpt"));
  EnhancerModel enh = EnhancerModel::load(cfg.enhancer_config(),
                                          ckpt_path(cfg, "enhancer_pretrained.ckpt"));
  FinetuneHyper hyper = cfg.finetune_hyper;
  hyper.seed = derive_seed(cfg.seed, "finetune");
  const FinetuneResult fr = finetune_quality_net_loss(
      enh, qnet, load_spec_pairs(manifest, Split::train),
      make_finetune_val_items(manifest, cfg.finetune_val_subset), cfg.stft, hyper);

  const std::string trace_path =
      (fs::path(cfg.out_dir) / "traces" / "fooling_trace.csv").string();
  save_trace_csv(trace_path, fr.trace);
  const FoolingSummary summary = fooling_report(fr.trace, cfg.fooling_tau);
  std::ofstream out((fs::path(cfg.out_dir) / "tables" / "fooling_summary.csv").string(),
                    std::ios::trunc);
  out << "key,value\n"
      << "peak_iteration," << summary.peak_iteration << "\n"
      << "true_peak," << format_g(summary.true_peak) << "\n"
      << "true_end," << format_g(summary.true_end) << "\n"
      << "predicted_at_peak," << format_g(summary.predicted_at_peak) << "\n"
      << "predicted_end," << format_g(summary.predicted_end) << "\n"
      << "detected," << (summary.detected ? "true" : "false") << "\n";
  std::cout << "fooling detected: " << (summary.detected ? "true" : "false")
            << " (true peak at iteration " << summary.peak_iteration << ")\n";
  return 0;
}

int cmd_export_spec(const CommonOpts& opts, const std::string& id,
                    const std::string& which) {
  const ExperimentConfig cfg = resolve_config(opts);
  ensure_run_dirs(cfg);
  const DatasetManifest manifest = DatasetManifest::load(cfg.manifest_path());
  const std::string name = which == "pretrained" ? "enhancer_pretrained.ckpt"
                                                 : "enhancer_finetuned.ckpt";
  const EnhancerModel model =
      EnhancerModel::load(cfg.enhancer_config(), ckpt_path(cfg, name));
  export_spectrograms(cfg, manifest, model, id);
  std::cout << "exported spectrograms for " << id << "\n";
  return 0;
}

int cmd_gradcheck() {
  const GradientSuiteResult res = run_gradient_suite();
  for (const auto& line : res.lines) std::cout << line << "\n";
  std::cout << (res.ok ? "gradient suite ok" : "gradient suite FAILED")
            << " (worst " << format_g(res.worst) << ")\n";
  return res.ok ? 0 : 3;
}

int cmd_report(const CommonOpts& opts) {
  const ExperimentConfig cfg = resolve_config(opts);
  ensure_run_dirs(cfg);
  int rc = cmd_eval(opts, "test");
  const std::string trace_path =
      (fs::path(cfg.out_dir) / "traces" / "finetune_trace.csv").string();
  if (fs::exists(trace_path)) {
    const FoolingTrace trace = load_trace_csv(trace_path);
    if (trace.size() >= 2) {
      const FoolingSummary s = fooling_report(trace, cfg.fooling_tau);
      std::cout << "finetune true-quality peak at iteration " << s.peak_iteration
                << "\n";
    }
  }
  std::cout << "report written under " << cfg.out_dir << "\n";
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage learned-loss speech enhancement pipeline"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string eval_split = "test";
  std::string export_id, export_model = "finetuned";

  CLI::App* corpus = app.add_subcommand("corpus", "dataset generation and labeling");
  corpus->require_subcommand(1);
  CLI::App* corpus_build = corpus->add_subcommand("build", "synthesize the corpus");
  add_common(corpus_build, opts);
  CLI::App* corpus_label = corpus->add_subcommand("label", "score noisy/clean pairs");
  add_common(corpus_label, opts);

  CLI::App* train = app.add_subcommand("train", "training stages");
  train->require_subcommand(1);
  CLI::App* train_qnet = train->add_subcommand("qnet", "stage A: train the surrogate");
  add_common(train_qnet, opts);
  CLI::App* train_pre =
      train->add_subcommand("enhancer-pretrain", "MSE-pretrain the enhancer");
  add_common(train_pre, opts);
  CLI::App* train_fine = train->add_subcommand(
      "enhancer-finetune", "stage B: fine-tune with the frozen surrogate loss");
  add_common(train_fine, opts);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluation table on a split");
  add_common(eval_cmd, opts);
  eval_cmd->add_option("--split", eval_split, "train|validation|test");

  CLI::App* fooling = app.add_subcommand("fooling", "extended no-early-stop drift run");
  add_common(fooling, opts);

  CLI::App* export_spec =
      app.add_subcommand("export-spec", "export clean/noisy/enhanced spectrograms");
  add_common(export_spec, opts);
  export_spec->add_option("--id", export_id, "utterance id")->required();
  export_spec->add_option("--model", export_model, "pretrained|finetuned");

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gradcheck, opts);

  CLI::App* report = app.add_subcommand("report", "bundle tables and curves");
  add_common(report, opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (corpus_build->parsed()) return cmd_corpus_build(opts);
    if (corpus_label->parsed()) return cmd_corpus_label(opts);
    if (train_qnet->parsed()) return cmd_train_qnet(opts);
    if (train_pre->parsed()) return cmd_train_pretrain(opts);
    if (train_fine->parsed()) return cmd_train_finetune(opts);
    if (eval_cmd->parsed()) return cmd_eval(opts, eval_split);
    if (fooling->parsed()) return cmd_fooling(opts);
    if (export_spec->parsed()) return cmd_export_spec(opts, export_id, export_model);
    if (gradcheck->parsed()) return cmd_gradcheck();
    if (report->parsed()) return cmd_report(opts);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}

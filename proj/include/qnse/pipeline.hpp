// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Experiment orchestration: the two-stage training pipeline as reproducible
// runs, evaluation grids, fine-tuning traces, spectrogram exports, and the
// surrogate-fooling drift experiment.

#ifndef QNSE_PIPELINE_HPP
#define QNSE_PIPELINE_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "qnse/corpus.hpp"
#include "qnse/enhancer.hpp"
#include "qnse/quality_net.hpp"

namespace qnse {

/// A run is a pure function of this record plus the code version. Loaded
/// from / saved to flat "key = value" sections.
struct ExperimentConfig {
  // [run]
  std::string out_dir = "runs/desk";
  uint64_t seed = 42;
  // [corpus]
  std::string corpus_dir;  // defaults to <out_dir>/corpus
  MixSpec mix = MixSpec::desk_default();
  // [stft]
  StftConfig stft;
  // [metric]
  MetricBackend metric;
  // [qnet]
  std::string qnet_preset = "desk";
  bool qnet_spectral_norm = true;
  double qnet_leaky_slope = 0.3;
  bool qnet_log_compress = false;
  // [enhancer]
  std::string enhancer_preset = "desk";
  // [train_*]
  QnetHyper qnet_hyper;
  PretrainHyper pretrain_hyper;
  FinetuneHyper finetune_hyper;
  int finetune_val_subset = 16;
  // [fooling]
  double fooling_tau = 0.02;
  long fooling_iterations = 2200;
  long fooling_log_every = 10;

  static ExperimentConfig desk_default();
  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;
  void validate() const;

  std::string corpus_path() const;
  std::string manifest_path() const;
  QualityNetConfig qnet_config() const;
  EnhancerConfig enhancer_config() const;  // out_bins tied to the STFT bins
};

// ---- stage orchestration ----------------------------------------------------

struct StageAResult {
  std::string qnet_ckpt;
  std::string pretrained_ckpt;
  double pearson_r = 0.0;
  double best_val_mse = 0.0;
  int epochs_run = 0;
};

/// Builds/labels the corpus if needed, pretrains a provisional enhancer for
/// augmentation, augments, trains and freezes the surrogate, and writes
/// checkpoints plus training-history CSVs under the run directory.
StageAResult run_stage_a(const ExperimentConfig& cfg);

struct StageBResult {
  std::string finetuned_ckpt;
  FoolingTrace trace;
  long best_iteration = 0;
  double baseline_true_quality = 0.0;
  double best_true_quality = 0.0;
};

/// Loads the frozen surrogate, reuses (or trains) the MSE-pretrained
/// enhancer, fine-tunes it with the surrogate loss, and returns the
/// best-true-score model plus the full trace.
StageBResult run_stage_b(const ExperimentConfig& cfg, const std::string& qnet_ckpt);

// ---- evaluation ----------------------------------------------------------------

struct EvalCell {
  double quality = 0.0;          // builtin proxy, raw [-0.5, 4.5]
  double intelligibility = 0.0;  // builtin proxy, [0, 1]
};

struct EvalTable {
  std::vector<double> snr_rows;  // ascending; an Avg row is appended last
  std::vector<std::string> systems;
  std::vector<std::vector<EvalCell>> cells;  // [row][system], Avg last

  std::string to_csv() const;
};

/// Per SNR level and system: enhance, reconstruct with the noisy phase,
/// score against the clean reference. A "noisy" identity column is always
/// included first; a nullptr model gives an explicit pass-through system.
EvalTable evaluate_models(
    const DatasetManifest& manifest,
    const std::vector<std::pair<std::string, const EnhancerModel*>>& models,
    Split split);

// ---- fooling --------------------------------------------------------------------

struct FoolingSummary {
  long peak_iteration = 0;
  double true_peak = 0.0;
  double true_end = 0.0;
  double predicted_at_peak = 0.0;
  double predicted_end = 0.0;
  bool detected = false;
};

/// detected = predicted score still rising past the true-score peak while
/// the true score has dropped by more than tau from that peak.
FoolingSummary fooling_report(const FoolingTrace& trace, double tau);

// ---- exports ----------------------------------------------------------------------

/// Writes clean/noisy/enhanced log-magnitude matrices (dB, floor -80) in
/// the spectrogram cache format plus a CSV sidecar of proxy-quality scores.
void export_spectrograms(const ExperimentConfig& cfg, const DatasetManifest& manifest,
                         const EnhancerModel& model, const std::string& utterance_id);

void save_history_csv(const std::string& path, const TrainingHistory& history);
void save_trace_csv(const std::string& path, const FoolingTrace& trace);
FoolingTrace load_trace_csv(const std::string& path);
void save_eval_table(const std::string& path, const EvalTable& table);

// ---- gradient suite ----------------------------------------------------------------

struct GradientSuiteResult {
  bool ok = true;
  double worst = 0.0;
  std::vector<std::string> lines;
};

/// Finite-difference verification of every layer, both desk-scale models,
/// and the surrogate-loss path through a frozen quality net.
GradientSuiteResult run_gradient_suite();

// ---- misc helpers used by the CLI and tests -----------------------------------------

void ensure_run_dirs(const ExperimentConfig& cfg);
std::vector<SpecPair> load_spec_pairs(const DatasetManifest& manifest, Split split);
std::vector<FinetuneValItem> make_finetune_val_items(const DatasetManifest& manifest,
                                                     int subset);
double pearson_correlation(const Vec& a, const Vec& b);

}  // namespace qnse

#endif  // QNSE_PIPELINE_HPP

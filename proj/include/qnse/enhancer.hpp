// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef QNSE_ENHANCER_HPP
#define QNSE_ENHANCER_HPP

#include <string>
#include <vector>

#include "qnse/dsp.hpp"
#include "qnse/nn.hpp"
#include "qnse/quality_net.hpp"

namespace qnse {

/// BLSTM ratio-mask generator: BLSTM stack -> leaky dense -> sigmoid dense,
/// so mask entries are always in (0,1).
struct EnhancerConfig {
  int blstm_layers = 1;
  int hidden = 16;  // units per direction
  int fc_hidden = 24;
  int out_bins = 65;
  double leaky_slope = 0.3;

  static EnhancerConfig paper();
  static EnhancerConfig desk();
  void validate() const;
};

/// One training example in the spectrogram domain.
struct SpecPair {
  Mat noisy;
  Mat clean;
};

class EnhancerModel {
 public:
  static EnhancerModel build(const EnhancerConfig& cfg, uint64_t seed);
  static EnhancerModel load(const EnhancerConfig& cfg, const std::string& path);
  void save(const std::string& path) const;

  /// Ratio mask G(noisy) in (0,1), same shape as the input.
  Mat mask(const Mat& noisy) const;

  /// (mask, noisy (x) mask); enhanced is entrywise <= noisy.
  std::pair<Mat, Mat> enhance(const Mat& noisy) const;

  const EnhancerConfig& config() const { return cfg_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  struct Cache {
    std::vector<nn::BlstmCache> blstm;
    nn::DenseCache fc1, fc2;
    Mat fc1_z;
    Mat mask;  // sigmoid output
  };
  Mat forward(const Mat& noisy, Cache* cache) const;
  /// Backpropagates a gradient w.r.t. the mask, accumulating parameter
  /// gradients; returns the gradient w.r.t. the input features.
  Mat backward(const Mat& gmask, const Cache& cache);

 private:
  EnhancerConfig cfg_;
  nn::ParameterSet params_;
};

struct PretrainHyper {
  double lr = 1e-3;
  double rho = 0.9;
  double eps = 1e-8;
  int max_epochs = 60;
  int patience = 8;
  int accum_batch = 1;
  uint64_t seed = 1;
};

/// Minimizes mse(noisy (x) G(noisy), clean) with utterance-level RMSprop
/// updates and early stopping on validation MSE; the model is left at the
/// best checkpoint.
TrainingHistory pretrain_mse(EnhancerModel& m, const std::vector<SpecPair>& train,
                             const std::vector<SpecPair>& val,
                             const PretrainHyper& hyper);

/// Fixed validation utterance used for per-iteration scoring during
/// fine-tuning: spectrogram pair for the surrogate, phase and trimmed clean
/// waveform for the true metrics.
struct FinetuneValItem {
  Mat noisy_mag;
  Mat clean_mag;
  Mat phase;
  Waveform clean_trim;  // pre-trimmed to the reconstruction length
};

struct FoolingPoint {
  long iteration = 0;
  double loss = 0.0;
  double predicted_mean = 0.0;        // surrogate estimate (normalized)
  double true_quality_mean = 0.0;     // builtin proxy (normalized)
  double intelligibility_mean = 0.0;  // builtin proxy, [0,1]
};
using FoolingTrace = std::vector<FoolingPoint>;

struct FinetuneHyper {
  double lr = 1e-4;
  double rho = 0.9;
  double eps = 1e-8;
  long iterations = 400;
  long patience = 150;  // iterations without a true-quality improvement; 0 = off
  int accum_batch = 1;
  long log_every = 1;
  uint64_t seed = 1;
};

struct FinetuneResult {
  FoolingTrace trace;
  long best_iteration = 0;
  double best_true_quality = 0.0;
};

/// Minimizes sum_u (1 - Q(N_u (x) G(N_u), C_u))^2 through the frozen
/// surrogate, logging (iteration, loss, predicted, true quality,
/// intelligibility) on the fixed validation subset. The model is left at
/// the logged checkpoint with the highest TRUE validation quality.
FinetuneResult finetune_quality_net_loss(EnhancerModel& m, const QualityNetModel& q,
                                         const std::vector<SpecPair>& train,
                                         const std::vector<FinetuneValItem>& val,
                                         const StftConfig& cfg,
                                         const FinetuneHyper& hyper);

}  // namespace qnse

#endif  // QNSE_ENHANCER_HPP

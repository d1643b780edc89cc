// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef QNSE_QUALITY_NET_HPP
#define QNSE_QUALITY_NET_HPP

#include <string>
#include <vector>

#include "qnse/nn.hpp"

namespace qnse {

struct ConvSpec {
  int filters = 0;
  int kh = 0;
  int kw = 0;
};

/// CNN quality regressor: (degraded, clean) magnitude pair stacked as two
/// input channels -> conv stack -> global average pooling -> FC head with
/// one linear output node.
struct QualityNetConfig {
  std::vector<ConvSpec> conv;
  std::vector<int> fc;  // last width must be 1
  double leaky_slope = 0.3;
  bool spectral_norm = true;
  bool log_compress = false;  // optional log(1+x) input compression

  static QualityNetConfig paper();
  static QualityNetConfig desk();
  void validate() const;
};

/// Training example: degraded/clean magnitude matrices plus the normalized
/// true metric score.
struct LabeledPair {
  Mat degraded;
  Mat clean;
  double target = 0.0;
};

struct EpochStats {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};
using TrainingHistory = std::vector<EpochStats>;

struct QnetHyper {
  double lr = 1e-3;
  double rho = 0.9;
  double eps = 1e-8;
  int max_epochs = 50;
  int patience = 8;
  int accum_batch = 1;
  uint64_t seed = 1;
};

class QualityNetModel {
 public:
  static QualityNetModel build(const QualityNetConfig& cfg, uint64_t seed);
  static QualityNetModel load(const QualityNetConfig& cfg, const std::string& path);
  void save(const std::string& path) const;

  /// Scalar normalized-score estimate for any frame count T >= the largest
  /// kernel extent. Read-only; safe to call concurrently.
  double predict(const Mat& degraded, const Mat& clean) const;

  /// Bakes the current spectral normalization into the weights and marks
  /// the model immutable.
  void freeze();
  bool frozen() const { return frozen_; }

  const QualityNetConfig& config() const { return cfg_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  // Training-path internals (used by qnet_train, fine-tuning, and tests).
  struct Cache {
    std::vector<nn::Conv2dCache> conv;
    std::vector<std::vector<Mat>> conv_z;  // pre-activation maps per layer
    std::vector<nn::DenseCache> fc;
    std::vector<Mat> fc_z;
    std::vector<Mat> input;  // channels after optional compression
    Index T = 0, F = 0;
  };
  double forward(const Mat& degraded, const Mat& clean, const nn::SigmaMap* sigmas,
                 Cache* cache) const;
  /// Backpropagates dscore. Parameter gradients accumulate into grad_sink
  /// when given (pass &params() while training, nullptr through a frozen
  /// model); input-channel gradients are written on request.
  void backward(double dscore, const Cache& cache, const nn::SigmaMap* sigmas,
                nn::ParameterSet* grad_sink, Mat* g_degraded = nullptr,
                Mat* g_clean = nullptr) const;

 private:
  QualityNetConfig cfg_;
  nn::ParameterSet params_;
  bool frozen_ = false;

  Mat effective(const std::string& name, const nn::SigmaMap* sigmas) const;
};

/// MSE regression of the normalized metric score with RMSprop, spectral
/// normalization each update, and early stopping on the validation split.
/// The model is left at the best-validation checkpoint.
TrainingHistory qnet_train(QualityNetModel& m, const std::vector<LabeledPair>& train,
                           const std::vector<LabeledPair>& val, const QnetHyper& hyper);

}  // namespace qnse

#endif  // QNSE_QUALITY_NET_HPP

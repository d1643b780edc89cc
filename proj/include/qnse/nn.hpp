// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Minimal differentiable-network core: named dense parameters with gradient
// slots, the layer set the models need (dense, conv2d, global average
// pooling, LSTM/BLSTM, activations), RMSprop, spectral normalization, and
// finite-difference gradient verification. Reverse-mode gradients are
// hand-derived per layer; there is no general autodiff graph.

#ifndef QNSE_NN_HPP
#define QNSE_NN_HPP

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "qnse/common.hpp"

namespace qnse::nn {

/// A named tensor with a gradient slot. The logical shape may have any
/// rank; storage is the 2-D realization (first extent) x (product of the
/// rest), which is also the reshape spectral normalization operates on.
struct Param {
  std::vector<int> shape;
  Mat value;
  Mat grad;
  Vec u;                 // power-iteration state, present iff spectral
  bool spectral = false;

  Index rows() const { return value.rows(); }
  Index cols() const { return value.cols(); }
};

class ParameterSet {
 public:
  Param& add(const std::string& name, const std::vector<int>& shape,
             bool spectral = false);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return items_.count(name) > 0; }

  void zero_grads();
  long total_size() const;
  bool bitwise_equal(const ParameterSet& other) const;

  /// Deep copy of values and power-iteration state, used for
  /// best-checkpoint snapshots.
  struct Snapshot {
    std::map<std::string, Mat> values;
    std::map<std::string, Vec> us;
  };
  Snapshot snapshot() const;
  void restore(const Snapshot& snap);

  std::map<std::string, Param>& items() { return items_; }
  const std::map<std::string, Param>& items() const { return items_; }

 private:
  std::map<std::string, Param> items_;  // name-sorted, canonical order
};

// ---- initialization -------------------------------------------------------

/// Uniform fan-in/fan-out scaling, +-sqrt(6/(fan_in+fan_out)).
void init_glorot(Param& p, Rng& rng, int fan_in, int fan_out);
void init_uniform(Param& p, Rng& rng, double bound);

// ---- layers ---------------------------------------------------------------
// Every forward has a matching backward that consumes the saved cache,
// returns the input gradient, and accumulates parameter gradients.

struct DenseCache {
  Mat x;
};
Mat dense_forward(const Mat& x, const Mat& W, const Vec& b, DenseCache* cache = nullptr);
Mat dense_backward(const Mat& gy, const DenseCache& cache, const Mat& W, Mat& gW,
                   Mat& gb);

struct Conv2dCache {
  int C = 0, K = 0, kh = 0, kw = 0;
  Index T = 0, F = 0;
  Mat cols;  // (T*F) x (C*kh*kw) patch matrix
};
/// "Same" zero padding, cross-correlation convention, odd kernel extents.
/// Kernels are stored as a K x (C*kh*kw) matrix, patch index (c, i, j).
std::vector<Mat> conv2d_forward(const std::vector<Mat>& x, const Mat& W, const Vec& bias,
                                int kh, int kw, Conv2dCache* cache = nullptr);
std::vector<Mat> conv2d_backward(const std::vector<Mat>& gy, const Conv2dCache& cache,
                                 const Mat& W, Mat& gW, Mat& gbias);

Vec global_avg_pool2d(const std::vector<Mat>& x);
std::vector<Mat> global_avg_pool2d_backward(const Vec& gy, int K, Index T, Index F);

Mat leaky_relu(const Mat& x, double slope);
Mat leaky_relu_backward(const Mat& gy, const Mat& x, double slope);

Mat sigmoid(const Mat& x);
/// Takes the forward output y = sigmoid(x).
Mat sigmoid_backward(const Mat& gy, const Mat& y);

struct LstmCache {
  Mat x;  // inputs in processing order
  Mat gi, gf, gg, go, c, tanh_c, h;
  bool reverse = false;
};
/// Standard LSTM with zero initial state; gate order [input, forget,
/// candidate, output] along the 4H axis. direction=reverse processes the
/// time-reversed sequence and re-reverses its outputs.
Mat lstm_forward(const Mat& x, const Mat& Wx, const Mat& Wh, const Vec& b, bool reverse,
                 LstmCache* cache = nullptr);
/// Full backpropagation through time.
Mat lstm_backward(const Mat& gh, const LstmCache& cache, const Mat& Wx, const Mat& Wh,
                  Mat& gWx, Mat& gWh, Mat& gb);

struct BlstmCache {
  LstmCache fwd, rev;
};
/// Concatenation [forward H | reverse H] per step.
Mat blstm_forward(const Mat& x, const Mat& Wx_f, const Mat& Wh_f, const Vec& b_f,
                  const Mat& Wx_r, const Mat& Wh_r, const Vec& b_r,
                  BlstmCache* cache = nullptr);
Mat blstm_backward(const Mat& gh, const BlstmCache& cache, const Mat& Wx_f,
                   const Mat& Wh_f, const Mat& Wx_r, const Mat& Wh_r, Mat& gWx_f,
                   Mat& gWh_f, Mat& gb_f, Mat& gWx_r, Mat& gWh_r, Mat& gb_r);

/// Mean squared error; optionally writes 2*(pred-target)/count into grad.
double mse_loss(const Mat& pred, const Mat& target, Mat* grad = nullptr);

// ---- optimizer ------------------------------------------------------------

struct Rmsprop {
  double lr = 1e-3;
  double rho = 0.9;
  double eps = 1e-8;

  /// acc <- rho*acc + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(acc)+eps);
  /// gradients are cleared afterwards.
  void step(ParameterSet& params);

 private:
  std::map<std::string, Mat> acc_;
};

// ---- spectral normalization ------------------------------------------------

/// One power-iteration step: v = normalize(W^T u); u = normalize(W v);
/// sigma = u^T W v. Returns the sigma estimate (floored at 1e-12).
double spectral_norm_step(const Mat& W, Vec& u);

/// Spec-level convenience: (W / sigma, sigma) with u updated in place.
/// A degenerate (zero) matrix is returned unscaled with sigma = 1e-12.
std::pair<Mat, double> spectral_normalize(const Mat& W, Vec& u);

using SigmaMap = std::map<std::string, double>;

/// Sigma estimates for every parameter (1.0 for non-spectral ones). With
/// persist_u the per-parameter u vectors advance by one power iteration;
/// without it the set is left untouched (inference / validation mode).
SigmaMap resolve_sigmas(const ParameterSet& params, ParameterSet* persist_into);
inline SigmaMap resolve_sigmas(ParameterSet& params, bool persist_u) {
  return resolve_sigmas(params, persist_u ? &params : nullptr);
}

/// Rescale accumulated gradients from the normalized weights back to the
/// raw parameters (sigma treated as a constant).
void apply_sigma_to_grads(ParameterSet& params, const SigmaMap& sigmas);

// ---- checkpoint I/O ---------------------------------------------------------

/// "QNCKPT1\0" magic, u32 entry count; per entry: u16 path length, UTF-8
/// path, u8 rank, u32 extents, row-major little-endian float32 data.
/// Power-iteration vectors are stored as "<name>.u" entries.
void save_checkpoint(const std::string& path, const ParameterSet& params);
ParameterSet load_checkpoint(const std::string& path);
void load_checkpoint_into(const std::string& path, ParameterSet& params);

// ---- gradient verification ---------------------------------------------------

struct GradientReport {
  std::vector<std::pair<std::string, double>> per_param;  // max rel error each
  double max_rel_err() const;
};

/// Central finite differences of `loss` against the analytic gradients
/// produced by `backward` (which must zero grads, run the model, and fill
/// every Param::grad). With max_entries_per_param > 0 only a seeded sample
/// of entries per tensor is perturbed.
GradientReport finite_diff_check(ParameterSet& params,
                                 const std::function<double()>& loss,
                                 const std::function<void()>& backward,
                                 double step = 1e-5, int max_entries_per_param = 0,
                                 uint64_t sample_seed = 1);

}  // namespace qnse::nn

#endif  // QNSE_NN_HPP

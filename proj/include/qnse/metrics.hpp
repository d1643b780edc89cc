// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef QNSE_METRICS_HPP
#define QNSE_METRICS_HPP

#include <string>

#include "qnse/dsp.hpp"

namespace qnse {

/// Overall-quality rating in [-0.5, 4.5].
struct QualityScore {
  double value = 0.0;

  explicit QualityScore(double v);
};

/// Intelligibility rating in [0, 1].
struct IntelligibilityScore {
  double value = 0.0;

  explicit IntelligibilityScore(double v);
};

/// Where quality scores come from: the deterministic builtin composite, or
/// an external command line run on (degraded, reference) file paths.
struct MetricBackend {
  enum class Kind { builtin_proxy, external_command };
  Kind kind = Kind::builtin_proxy;
  // Literal command text with "{deg}" and "{ref}" placeholders.
  std::string command_template;

  void validate() const;
};

struct CommandFailedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ScoreParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ScoreRangeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Deterministic quality composite over frame-wise clamped segmental SNR
/// and RMS log-spectral distance, squashed into [-0.5, 4.5]. Monotone
/// increasing in segmental SNR, decreasing in spectral distance. The
/// framing comes from cfg so that metric features and model features share
/// one front-end.
QualityScore proxy_quality(const Waveform& degraded, const Waveform& clean,
                           const StftConfig& cfg);

/// Mean banded envelope correlation over 30-frame windows (stride 15),
/// 8 log-spaced bands, negative correlations clamped to zero.
IntelligibilityScore proxy_intelligibility(const Waveform& degraded,
                                           const Waveform& clean,
                                           const StftConfig& cfg);

/// Linear map with 4.5 -> 1 (range becomes [-1/9, 1]).
inline double normalize_score(const QualityScore& q) { return q.value / 4.5; }

/// Runs the backend's command with paths substituted and parses the last
/// real number on stdout as the score.
QualityScore external_metric(const MetricBackend& backend,
                             const std::string& degraded_path,
                             const std::string& reference_path);

}  // namespace qnse

#endif  // QNSE_METRICS_HPP

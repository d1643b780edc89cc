// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "qnse/metrics.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

namespace qnse {

namespace {

constexpr double kScoreLo = -0.5;
constexpr double kScoreHi = 4.5;

void check_finite_range(double v, double lo, double hi, const char* what) {
  if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + " not finite");
  if (v < lo || v > hi)
    throw std::invalid_argument(std::string(what) + " out of range: " + std::to_string(v));
}

void check_comparable(const Waveform& degraded, const Waveform& clean) {
  if (degraded.sample_rate_hz != clean.sample_rate_hz)
    throw std::invalid_argument("metric inputs: sample rate mismatch");
  if (degraded.samples.size() != clean.samples.size())
    throw std::invalid_argument("metric inputs: length mismatch");
}

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Log-spaced band edges over [0, bins): geometric progression forced to be
// strictly increasing, DC folded into the first band.
std::vector<int> band_edges(int bins, int bands) {
  std::vector<int> edges(bands + 1);
  edges[0] = 0;
  for (int k = 1; k <= bands; ++k) {
    const double e = std::pow(static_cast<double>(bins),
                              static_cast<double>(k) / bands);
    edges[k] = std::max(edges[k - 1] + 1, static_cast<int>(std::lround(e)));
  }
  edges[bands] = bins;
  return edges;
}

// Pearson correlation; zero-variance windows are defined as 0.
double pearson_or_zero(const Vec& a, const Vec& b) {
  const double ma = a.mean(), mb = b.mean();
  const Vec da = a.array() - ma;
  const Vec db = b.array() - mb;
  const double va = da.squaredNorm(), vb = db.squaredNorm();
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return da.dot(db) / std::sqrt(va * vb);
}

}  // namespace

QualityScore::QualityScore(double v) : value(v) {
  check_finite_range(v, kScoreLo, kScoreHi, "quality score");
}

IntelligibilityScore::IntelligibilityScore(double v) : value(v) {
  check_finite_range(v, 0.0, 1.0, "intelligibility score");
}

void MetricBackend::validate() const {
  if (kind == Kind::external_command) {
    if (command_template.find("{deg}") == std::string::npos ||
        command_template.find("{ref}") == std::string::npos)
      throw ConfigError("external metric template needs {deg} and {ref} placeholders");
  }
}

QualityScore proxy_quality(const Waveform& degraded, const Waveform& clean,
                           const StftConfig& cfg) {
  check_comparable(degraded, clean);
  const Index len = clean.samples.size();
  if (len < cfg.fft_size)
    throw std::invalid_argument("metric inputs shorter than one frame");
  const Index frames = 1 + (len - cfg.fft_size) / cfg.hop_size;

  // Frame-wise segmental SNR, clamped to [-10, 35]. A frame with zero error
  // counts as the upper clamp regardless of its reference energy.
  double seg_sum = 0.0;
  for (Index f = 0; f < frames; ++f) {
    const Index off = f * cfg.hop_size;
    double sig = 0.0, err = 0.0;
    for (int n = 0; n < cfg.fft_size; ++n) {
      const double c = clean.samples[off + n];
      const double d = degraded.samples[off + n];
      sig += c * c;
      err += (d - c) * (d - c);
    }
    double snr;
    if (err == 0.0)
      snr = 35.0;
    else if (sig == 0.0)
      snr = -10.0;
    else
      snr = std::clamp(10.0 * std::log10(sig / err), -10.0, 35.0);
    seg_sum += snr;
  }
  const double seg_snr = seg_sum / static_cast<double>(frames);

  // RMS log-spectral distance per frame, averaged over frames.
  constexpr double kEps = 1e-8;
  const auto [mag_d, phase_d] = magnitude_and_phase(stft(degraded, cfg));
  const auto [mag_c, phase_c] = magnitude_and_phase(stft(clean, cfg));
  double lsd_sum = 0.0;
  for (Index f = 0; f < mag_d.frames(); ++f) {
    double acc = 0.0;
    for (Index k = 0; k < mag_d.bins(); ++k) {
      const double r =
          20.0 * std::log10((mag_d.values(f, k) + kEps) / (mag_c.values(f, k) + kEps));
      acc += r * r;
    }
    lsd_sum += std::sqrt(acc / static_cast<double>(mag_d.bins()));
  }
  const double lsd = lsd_sum / static_cast<double>(mag_d.frames());

  const double score =
      kScoreLo + 5.0 * logistic(0.2 * seg_snr - 0.05 * lsd - 3.0);
  return QualityScore(score);
}

IntelligibilityScore proxy_intelligibility(const Waveform& degraded,
                                           const Waveform& clean,
                                           const StftConfig& cfg) {
  check_comparable(degraded, clean);
  constexpr int kBands = 8;
  constexpr Index kWin = 30;
  constexpr Index kStride = 15;

  const auto [mag_d, pd] = magnitude_and_phase(stft(degraded, cfg));
  const auto [mag_c, pc] = magnitude_and_phase(stft(clean, cfg));
  const Index frames = mag_d.frames();
  const std::vector<int> edges = band_edges(cfg.bins(), kBands);

  // Band-energy envelopes over time.
  Mat env_d(frames, kBands), env_c(frames, kBands);
  for (Index f = 0; f < frames; ++f)
    for (int b = 0; b < kBands; ++b) {
      double ed = 0.0, ec = 0.0;
      for (int k = edges[b]; k < edges[b + 1]; ++k) {
        ed += mag_d.values(f, k) * mag_d.values(f, k);
        ec += mag_c.values(f, k) * mag_c.values(f, k);
      }
      env_d(f, b) = ed;
      env_c(f, b) = ec;
    }

  std::vector<Index> starts;
  if (frames < kWin) {
    starts.push_back(0);  // single full-length window
  } else {
    for (Index s = 0; s + kWin <= frames; s += kStride) starts.push_back(s);
  }

  double sum = 0.0;
  long count = 0;
  for (int b = 0; b < kBands; ++b)
    for (const Index s : starts) {
      const Index n = frames < kWin ? frames : kWin;
      const Vec a = env_d.block(s, b, n, 1);
      const Vec c = env_c.block(s, b, n, 1);
      sum += std::max(0.0, pearson_or_zero(a, c));
      ++count;
    }
  return IntelligibilityScore(sum / static_cast<double>(count));
}

QualityScore external_metric(const MetricBackend& backend,
                             const std::string& degraded_path,
                             const std::string& reference_path) {
  if (backend.kind != MetricBackend::Kind::external_command)
    throw ConfigError("external_metric needs an external_command backend");
  backend.validate();

  std::string cmd = backend.command_template;
  const auto substitute = [&cmd](const std::string& key, const std::string& v) {
    for (size_t p = cmd.find(key); p != std::string::npos; p = cmd.find(key, p + v.size()))
      cmd.replace(p, key.size(), v);
  };
  substitute("{deg}", degraded_path);
  substitute("{ref}", reference_path);

  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw CommandFailedError("cannot spawn: " + cmd);
  std::string output;
  std::array<char, 512> chunk{};
  size_t n;
  while ((n = fread(chunk.data(), 1, chunk.size(), pipe)) > 0)
    output.append(chunk.data(), n);
  const int status = pclose(pipe);
  if (status != 0)
    throw CommandFailedError("metric command exited with status " +
                             std::to_string(status) + ": " + cmd);

  // Last real number on stdout wins.
  double value = 0.0;
  bool found = false;
  for (size_t i = 0; i < output.size(); ++i) {
    const char c = output[i];
    if (std::isdigit(static_cast<unsigned char>(c)) ||
        ((c == '-' || c == '+' || c == '.') && i + 1 < output.size() &&
         std::isdigit(static_cast<unsigned char>(output[i + 1])))) {
      char* end = nullptr;
      const double v = std::strtod(output.c_str() + i, &end);
      if (end != output.c_str() + i) {
        value = v;
        found = true;
        i = static_cast<size_t>(end - output.c_str()) - 1;
      }
    }
  }
  if (!found) throw ScoreParseError("no numeric score on metric stdout: " + output);
  if (!std::isfinite(value) || value < kScoreLo || value > kScoreHi)
    throw ScoreRangeError("metric score out of [-0.5, 4.5]: " + std::to_string(value));
  return QualityScore(value);
}

}  // namespace qnse

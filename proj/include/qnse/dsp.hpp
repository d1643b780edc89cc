// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef QNSE_DSP_HPP
#define QNSE_DSP_HPP

#include <string>
#include <utility>
#include <vector>

#include "qnse/common.hpp"

namespace qnse {

/// Mono time-domain signal, samples normalized to [-1, 1].
struct Waveform {
  Vec samples;
  int sample_rate_hz = 0;

  Index size() const { return samples.size(); }
  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate_hz;
  }
};

enum class WindowKind { hann, rect };

WindowKind parse_window(const std::string& name);
std::string window_name(WindowKind w);

/// Analysis/synthesis framing. fft_size must be a power of two and the
/// window must overlap-add to a constant at the chosen hop.
struct StftConfig {
  int fft_size = 128;
  int hop_size = 64;
  WindowKind window = WindowKind::hann;

  int bins() const { return fft_size / 2 + 1; }
  void validate() const;

  bool operator==(const StftConfig&) const = default;
};

/// One-sided complex spectrogram, rows = frames, cols = bins.
struct ComplexSpectrogram {
  MatC values;
  StftConfig config;

  Index frames() const { return values.rows(); }
  Index bins() const { return values.cols(); }
};

/// Nonnegative magnitudes, rows = frames, cols = bins.
struct MagnitudeSpectrogram {
  Mat values;
  StftConfig config;

  Index frames() const { return values.rows(); }
  Index bins() const { return values.cols(); }
};

/// In-place radix-2 FFT over a power-of-two-length buffer.
void fft_radix2(std::vector<std::complex<double>>& a, bool inverse);

/// Windowed one-sided DFT per frame; frames = 1 + floor((len - fft)/hop).
/// Throws std::invalid_argument when the signal is shorter than one frame.
ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg);

/// Splits into (|s|, arg(s)); zero entries get phase 0.
std::pair<MagnitudeSpectrogram, Mat> magnitude_and_phase(const ComplexSpectrogram& s);

/// Overlap-add synthesis of magnitude + phase with squared-window
/// normalization. Output length is (frames - 1) * hop + fft_size.
Waveform reconstruct(const MagnitudeSpectrogram& m, const Mat& phase,
                     const StftConfig& cfg, int sample_rate_hz);

/// Mean squared amplitude. Throws on an empty signal.
double rms_power(const Waveform& w);

/// clean + alpha * noise with alpha chosen so the achieved SNR equals
/// snr_db exactly. Noise is tiled/cropped starting at noise_offset when it
/// is not already aligned with the clean signal.
Waveform mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db,
                    Index noise_offset = 0);

}  // namespace qnse

#endif  // QNSE_DSP_HPP

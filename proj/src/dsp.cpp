// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "qnse/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qnse {

WindowKind parse_window(const std::string& name) {
  if (name == "hann") return WindowKind::hann;
  if (name == "rect") return WindowKind::rect;
  throw ConfigError("unknown window: " + name);
}

std::string window_name(WindowKind w) {
  return w == WindowKind::hann ? "hann" : "rect";
}

namespace {

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

Vec make_window(const StftConfig& cfg) {
  Vec w(cfg.fft_size);
  switch (cfg.window) {
    case WindowKind::hann:
      // Periodic Hann; sums to a constant at hop = N/2 and N/4.
      for (int n = 0; n < cfg.fft_size; ++n)
        w[n] = 0.5 * (1.0 - std::cos(2.0 * M_PI * n / cfg.fft_size));
      break;
    case WindowKind::rect:
      w.setOnes();
      break;
  }
  return w;
}

// Constant-overlap-add check: sum of shifted windows over one hop period.
bool window_is_cola(const Vec& w, int hop) {
  const int n = static_cast<int>(w.size());
  if (n % hop != 0) return false;
  Vec acc = Vec::Zero(hop);
  for (int start = 0; start < n; start += hop)
    for (int i = 0; i < hop; ++i) acc[i] += w[start + i];
  const double ref = acc[0];
  for (int i = 0; i < hop; ++i)
    if (std::abs(acc[i] - ref) > 1e-9 * std::max(1.0, std::abs(ref))) return false;
  return ref > 0.0;
}

}  // namespace

void StftConfig::validate() const {
  if (!is_pow2(fft_size)) throw ConfigError("fft_size must be a power of two");
  if (hop_size <= 0 || hop_size > fft_size)
    throw ConfigError("hop_size must be in [1, fft_size]");
  if (!window_is_cola(make_window(*this), hop_size))
    throw ConfigError("window does not overlap-add to a constant at hop " +
                      std::to_string(hop_size));
}

void fft_radix2(std::vector<std::complex<double>>& a, bool inverse) {
  const size_t n = a.size();
  if (!is_pow2(static_cast<int>(n)))
    throw std::invalid_argument("fft length must be a power of two");
  // Bit-reversal permutation.
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg) {
  cfg.validate();
  const Index len = w.samples.size();
  if (len < cfg.fft_size)
    throw std::invalid_argument("signal shorter than one analysis frame (" +
                                std::to_string(len) + " < " +
                                std::to_string(cfg.fft_size) + " samples)");
  const Index frames = 1 + (len - cfg.fft_size) / cfg.hop_size;
  const Vec win = make_window(cfg);

  ComplexSpectrogram out;
  out.config = cfg;
  out.values.resize(frames, cfg.bins());
  std::vector<std::complex<double>> buf(cfg.fft_size);
  for (Index f = 0; f < frames; ++f) {
    const Index off = f * cfg.hop_size;
    for (int n = 0; n < cfg.fft_size; ++n)
      buf[n] = std::complex<double>(w.samples[off + n] * win[n], 0.0);
    fft_radix2(buf, false);
    for (int k = 0; k < cfg.bins(); ++k) out.values(f, k) = buf[k];
  }
  return out;
}

std::pair<MagnitudeSpectrogram, Mat> magnitude_and_phase(const ComplexSpectrogram& s) {
  MagnitudeSpectrogram mag;
  mag.config = s.config;
  mag.values.resize(s.frames(), s.bins());
  Mat phase(s.frames(), s.bins());
  for (Index f = 0; f < s.frames(); ++f)
    for (Index k = 0; k < s.bins(); ++k) {
      const std::complex<double> z = s.values(f, k);
      mag.values(f, k) = std::abs(z);
      phase(f, k) = (z == std::complex<double>(0.0, 0.0)) ? 0.0 : std::arg(z);
    }
  return {std::move(mag), std::move(phase)};
}

Waveform reconstruct(const MagnitudeSpectrogram& m, const Mat& phase,
                     const StftConfig& cfg, int sample_rate_hz) {
  cfg.validate();
  if (m.values.rows() != phase.rows() || m.values.cols() != phase.cols())
    throw std::invalid_argument("magnitude/phase shape mismatch");
  if (m.values.cols() != cfg.bins())
    throw std::invalid_argument("spectrogram bins do not match config");

  const Index frames = m.values.rows();
  const Index out_len = (frames - 1) * cfg.hop_size + cfg.fft_size;
  const Vec win = make_window(cfg);

  Vec acc = Vec::Zero(out_len);
  Vec norm = Vec::Zero(out_len);
  std::vector<std::complex<double>> buf(cfg.fft_size);
  for (Index f = 0; f < frames; ++f) {
    // Rebuild the full conjugate-symmetric spectrum from the one-sided half.
    for (int k = 0; k < cfg.bins(); ++k)
      buf[k] = std::polar(m.values(f, k), phase(f, k));
    for (int k = cfg.bins(); k < cfg.fft_size; ++k)
      buf[k] = std::conj(buf[cfg.fft_size - k]);
    fft_radix2(buf, true);
    const Index off = f * cfg.hop_size;
    for (int n = 0; n < cfg.fft_size; ++n) {
      acc[off + n] += buf[n].real() * win[n];
      norm[off + n] += win[n] * win[n];
    }
  }
  Waveform out;
  out.sample_rate_hz = sample_rate_hz;
  out.samples.resize(out_len);
  for (Index i = 0; i < out_len; ++i)
    out.samples[i] = acc[i] / std::max(norm[i], 1e-8);
  return out;
}

double rms_power(const Waveform& w) {
  if (w.samples.size() == 0) throw std::invalid_argument("rms_power of empty signal");
  return w.samples.squaredNorm() / static_cast<double>(w.samples.size());
}

Waveform mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db,
                    Index noise_offset) {
  if (clean.sample_rate_hz != noise.sample_rate_hz)
    throw std::invalid_argument("mix_at_snr: sample rate mismatch");
  const Index len = clean.samples.size();
  if (len == 0 || noise.samples.size() == 0)
    throw std::invalid_argument("mix_at_snr: empty signal");

  // Tile/crop the noise deterministically from the given offset.
  Vec seg(len);
  const Index nlen = noise.samples.size();
  for (Index i = 0; i < len; ++i) seg[i] = noise.samples[(noise_offset + i) % nlen];

  const double p_clean = clean.samples.squaredNorm() / static_cast<double>(len);
  const double p_noise = seg.squaredNorm() / static_cast<double>(len);
  if (p_clean <= 0.0 || p_noise <= 0.0)
    throw std::invalid_argument("mix_at_snr: degenerate (zero-power) signal");

  const double alpha = std::sqrt(p_clean / (p_noise * std::pow(10.0, snr_db / 10.0)));
  Waveform out;
  out.sample_rate_hz = clean.sample_rate_hz;
  out.samples = clean.samples + alpha * seg;
  return out;
}

}  // namespace qnse

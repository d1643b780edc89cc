// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef QNSE_WAV_HPP
#define QNSE_WAV_HPP

#include <string>

#include "qnse/dsp.hpp"

namespace qnse {

/// Mono 16-bit PCM RIFF WAVE. Samples map to [-1, 1) via s / 32768.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

/// Spectrogram cache: "QNSPEC1\0" magic, u32 frames, u32 bins (little
/// endian), then row-major little-endian float32 values.
void write_spectrogram_cache(const std::string& path, const Mat& values);
Mat read_spectrogram_cache(const std::string& path);

}  // namespace qnse

#endif  // QNSE_WAV_HPP

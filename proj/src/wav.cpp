// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "qnse/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace qnse {

namespace {

void put_u16(std::vector<char>& b, uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::vector<char>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const char* p) {
  uint32_t v = 0;
  std::memcpy(&v, p, 4);
  return v;  // little-endian host assumed (x86/arm64)
}

uint16_t get_u16(const char* p) {
  uint16_t v = 0;
  std::memcpy(&v, p, 2);
  return v;
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const auto n = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<size_t>(n));
  in.read(buf.data(), n);
  if (!in) throw IoError("short read on " + path);
  return buf;
}

void write_file(const std::string& path, const std::vector<char>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write on " + path);
}

}  // namespace

Waveform read_wav(const std::string& path) {
  const std::vector<char> buf = read_file(path);
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw IoError(path + ": not a RIFF WAVE file");

  int sample_rate = 0;
  int channels = 0;
  int bits = 0;
  size_t data_off = 0, data_len = 0;
  size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const char* id = buf.data() + pos;
    const uint32_t sz = get_u32(buf.data() + pos + 4);
    const size_t body = pos + 8;
    if (std::memcmp(id, "fmt ", 4) == 0 && body + 16 <= buf.size()) {
      const uint16_t fmt = get_u16(buf.data() + body);
      channels = get_u16(buf.data() + body + 2);
      sample_rate = static_cast<int>(get_u32(buf.data() + body + 4));
      bits = get_u16(buf.data() + body + 14);
      if (fmt != 1) throw IoError(path + ": only PCM wav supported");
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_off = body;
      data_len = std::min<size_t>(sz, buf.size() - body);
    }
    pos = body + sz + (sz & 1);
  }
  if (channels != 1 || bits != 16 || sample_rate <= 0 || data_off == 0)
    throw IoError(path + ": expected mono 16-bit PCM");

  const size_t n = data_len / 2;
  Waveform w;
  w.sample_rate_hz = sample_rate;
  w.samples.resize(static_cast<Index>(n));
  for (size_t i = 0; i < n; ++i) {
    int16_t s = 0;
    std::memcpy(&s, buf.data() + data_off + 2 * i, 2);
    w.samples[static_cast<Index>(i)] = static_cast<double>(s) / 32768.0;
  }
  return w;
}

void write_wav(const std::string& path, const Waveform& w) {
  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  std::vector<char> buf;
  buf.reserve(44 + 2 * n);
  buf.insert(buf.end(), {'R', 'I', 'F', 'F'});
  put_u32(buf, 36 + 2 * n);
  buf.insert(buf.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(buf, 16);
  put_u16(buf, 1);  // PCM
  put_u16(buf, 1);  // mono
  put_u32(buf, static_cast<uint32_t>(w.sample_rate_hz));
  put_u32(buf, static_cast<uint32_t>(w.sample_rate_hz) * 2);
  put_u16(buf, 2);   // block align
  put_u16(buf, 16);  // bits
  buf.insert(buf.end(), {'d', 'a', 't', 'a'});
  put_u32(buf, 2 * n);
  for (uint32_t i = 0; i < n; ++i) {
    const double x = std::clamp(w.samples[static_cast<Index>(i)], -1.0, 1.0);
    const auto s = static_cast<int16_t>(
        std::clamp(std::lround(x * 32768.0), -32768L, 32767L));
    put_u16(buf, static_cast<uint16_t>(s));
  }
  write_file(path, buf);
}

void write_spectrogram_cache(const std::string& path, const Mat& values) {
  std::vector<char> buf;
  buf.reserve(16 + 4 * static_cast<size_t>(values.size()));
  const char magic[8] = {'Q', 'N', 'S', 'P', 'E', 'C', '1', '\0'};
  buf.insert(buf.end(), magic, magic + 8);
  put_u32(buf, static_cast<uint32_t>(values.rows()));
  put_u32(buf, static_cast<uint32_t>(values.cols()));
  for (Index r = 0; r < values.rows(); ++r)
    for (Index c = 0; c < values.cols(); ++c) {
      const float f = static_cast<float>(values(r, c));
      char bytes[4];
      std::memcpy(bytes, &f, 4);
      buf.insert(buf.end(), bytes, bytes + 4);
    }
  write_file(path, buf);
}

Mat read_spectrogram_cache(const std::string& path) {
  const std::vector<char> buf = read_file(path);
  const char magic[8] = {'Q', 'N', 'S', 'P', 'E', 'C', '1', '\0'};
  if (buf.size() < 16 || std::memcmp(buf.data(), magic, 8) != 0)
    throw IoError(path + ": bad spectrogram cache header");
  const uint32_t frames = get_u32(buf.data() + 8);
  const uint32_t bins = get_u32(buf.data() + 12);
  if (buf.size() < 16 + 4ull * frames * bins)
    throw IoError(path + ": truncated spectrogram cache");
  Mat m(frames, bins);
  const char* p = buf.data() + 16;
  for (uint32_t r = 0; r < frames; ++r)
    for (uint32_t c = 0; c < bins; ++c) {
      float f = 0;
      std::memcpy(&f, p, 4);
      p += 4;
      m(r, c) = static_cast<double>(f);
    }
  return m;
}

}  // namespace qnse

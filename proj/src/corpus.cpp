// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "qnse/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "qnse/wav.hpp"

namespace fs = std::filesystem;

namespace qnse {

namespace {

// Two-pole resonator; poles at radius r and angle 2*pi*fc/rate.
struct Resonator {
  double a1 = 0.0, a2 = 0.0, gain = 1.0;
  double y1 = 0.0, y2 = 0.0;

  void retune(double fc, double bw, int rate) {
    const double r = std::exp(-M_PI * bw / rate);
    a1 = 2.0 * r * std::cos(2.0 * M_PI * fc / rate);
    a2 = -r * r;
    gain = (1.0 - r) * std::sqrt(1.0 - r);
  }
  double tick(double x) {
    const double y = gain * x + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

double peak_normalize(Vec& samples, double target) {
  const double peak = samples.cwiseAbs().maxCoeff();
  if (peak <= 0.0) throw std::runtime_error("degenerate all-zero synthesis");
  samples *= target / peak;
  return peak;
}

}  // namespace

Waveform synth_clean(uint64_t seed, double duration_s, int rate) {
  if (duration_s < 0.5) throw std::invalid_argument("synth_clean: duration below 0.5 s");
  Rng rng(seed);
  const Index n = static_cast<Index>(std::llround(duration_s * rate));
  const int block = std::max(1, rate / 100);  // 10 ms control blocks

  // Pitch contour: random walk in log-f0 between 80 and 250 Hz.
  double logf0 = rng.uniform(std::log(95.0), std::log(210.0));
  const double lo = std::log(80.0), hi = std::log(250.0);

  // 2-4 time-varying resonators standing in for formants.
  const int nres = 2 + static_cast<int>(rng.uniform_int(3));
  const double fmax = 0.42 * rate;
  std::vector<Resonator> res(nres);
  std::vector<double> centers(nres), bands(nres);
  const double band_edges[5] = {300.0, 900.0, 2200.0, 3200.0, 3800.0};
  for (int i = 0; i < nres; ++i) {
    const double flo = std::min(band_edges[i], fmax * 0.8);
    const double fhi = std::min(band_edges[i + 1], fmax);
    centers[i] = rng.uniform(flo, fhi);
    bands[i] = rng.uniform(80.0, 200.0);
    res[i].retune(centers[i], bands[i], rate);
  }

  // Voiced/pause gating with smooth ramps; pauses keep a small floor so
  // that reference energy never drops to exactly zero.
  double gate_target = 1.0;
  Index seg_left = 0;
  double seg_gain = 1.0;
  constexpr double kPauseFloor = 0.04;

  const int harmonics = std::max(3, static_cast<int>(std::floor(0.45 * rate / 250.0)));
  double phase = 0.0;
  double gate = kPauseFloor;
  const double gate_coeff = std::exp(-1.0 / (0.012 * rate));

  Waveform w;
  w.sample_rate_hz = rate;
  w.samples.resize(n);
  for (Index t = 0; t < n; ++t) {
    if (seg_left == 0) {
      const bool voiced = rng.uniform() < 0.78;
      gate_target = voiced ? 1.0 : kPauseFloor;
      seg_gain = rng.uniform(0.6, 1.0);
      seg_left = static_cast<Index>(rng.uniform(0.12, 0.4) * rate);
    }
    --seg_left;
    if (t % block == 0) {
      logf0 = std::clamp(logf0 + 0.06 * rng.normal(), lo, hi);
      for (int i = 0; i < nres; ++i) {
        const double flo = std::min(band_edges[i], fmax * 0.8);
        const double fhi = std::min(band_edges[i + 1], fmax);
        centers[i] = std::clamp(centers[i] * std::exp(0.03 * rng.normal()), flo, fhi);
        res[i].retune(centers[i], bands[i], rate);
      }
    }
    const double f0 = std::exp(logf0);
    phase += 2.0 * M_PI * f0 / rate;
    if (phase > 2.0 * M_PI) phase -= 2.0 * M_PI;
    double src = 0.0;
    for (int k = 1; k <= harmonics; ++k) src += std::sin(k * phase) / k;
    src += 0.05 * rng.normal();  // breath component

    gate = gate_coeff * gate + (1.0 - gate_coeff) * (gate_target * seg_gain);
    double y = 0.0;
    for (auto& r : res) y += r.tick(src);
    w.samples[t] = y * gate;
  }
  peak_normalize(w.samples, 0.5);
  return w;
}

NoiseFamily parse_noise_family(const std::string& name) {
  if (name == "white") return NoiseFamily::white;
  if (name == "pink") return NoiseFamily::pink;
  if (name == "babble_like") return NoiseFamily::babble_like;
  if (name == "machine") return NoiseFamily::machine;
  if (name == "siren") return NoiseFamily::siren;
  if (name == "street") return NoiseFamily::street;
  throw ConfigError("unknown noise family: " + name);
}

std::string noise_family_name(NoiseFamily f) {
  switch (f) {
    case NoiseFamily::white: return "white";
    case NoiseFamily::pink: return "pink";
    case NoiseFamily::babble_like: return "babble_like";
    case NoiseFamily::machine: return "machine";
    case NoiseFamily::siren: return "siren";
    case NoiseFamily::street: return "street";
  }
  throw ConfigError("bad noise family value");
}

namespace {

// 1/f^(slope_half2) amplitude shaping via a random-phase spectrum.
Vec spectrally_shaped_noise(Rng& rng, Index n, double amp_exponent) {
  size_t m = 1;
  while (m < static_cast<size_t>(n)) m <<= 1;
  std::vector<std::complex<double>> spec(m, {0.0, 0.0});
  for (size_t k = 1; k <= m / 2; ++k) {
    const double amp = std::pow(static_cast<double>(k), -amp_exponent);
    const double ph = rng.uniform(0.0, 2.0 * M_PI);
    spec[k] = std::polar(amp, ph);
    if (k < m / 2) spec[m - k] = std::conj(spec[k]);
  }
  spec[m / 2] = std::complex<double>(spec[m / 2].real(), 0.0);
  fft_radix2(spec, true);
  Vec out(n);
  for (Index i = 0; i < n; ++i) out[i] = spec[static_cast<size_t>(i)].real();
  return out;
}

}  // namespace

Waveform synth_noise(NoiseFamily family, uint64_t seed, double duration_s, int rate) {
  Rng rng(seed);
  const Index n = static_cast<Index>(std::llround(duration_s * rate));
  Waveform w;
  w.sample_rate_hz = rate;
  w.samples.resize(n);

  switch (family) {
    case NoiseFamily::white:
      for (Index t = 0; t < n; ++t) w.samples[t] = rng.normal();
      break;
    case NoiseFamily::pink:
      w.samples = spectrally_shaped_noise(rng, n, 0.5);  // power ~ 1/f
      break;
    case NoiseFamily::babble_like: {
      w.samples.setZero();
      const int voices = 5;
      for (int v = 0; v < voices; ++v) {
        const Waveform voice = synth_clean(
            derive_seed(seed, "babble/" + std::to_string(v)), duration_s, rate);
        const double g = 0.6 + 0.4 * rng.uniform();
        w.samples += g * voice.samples;
      }
      break;
    }
    case NoiseFamily::machine: {
      const int tones = 5;
      std::vector<double> freq(tones), am_rate(tones), am_depth(tones), ph(tones),
          am_ph(tones);
      for (int i = 0; i < tones; ++i) {
        freq[i] = rng.uniform(90.0, std::min(1200.0, 0.4 * rate));
        am_rate[i] = rng.uniform(2.0, 8.0);
        am_depth[i] = rng.uniform(0.3, 0.9);
        ph[i] = rng.uniform(0.0, 2.0 * M_PI);
        am_ph[i] = rng.uniform(0.0, 2.0 * M_PI);
      }
      for (Index t = 0; t < n; ++t) {
        const double ts = static_cast<double>(t) / rate;
        double acc = 0.0;
        for (int i = 0; i < tones; ++i) {
          const double am =
              1.0 - am_depth[i] * 0.5 * (1.0 + std::sin(2.0 * M_PI * am_rate[i] * ts + am_ph[i]));
          acc += am * std::sin(2.0 * M_PI * freq[i] * ts + ph[i]);
        }
        w.samples[t] = acc;
      }
      break;
    }
    case NoiseFamily::siren: {
      const double f1 = rng.uniform(500.0, 700.0);
      const double f2 = rng.uniform(1100.0, std::min(1500.0, 0.4 * rate));
      const double sweep_hz = rng.uniform(0.4, 0.9);
      double phase = 0.0;
      for (Index t = 0; t < n; ++t) {
        const double ts = static_cast<double>(t) / rate;
        const double tri = std::abs(2.0 * (ts * sweep_hz - std::floor(ts * sweep_hz + 0.5)));
        const double f = f1 + (f2 - f1) * tri;
        phase += 2.0 * M_PI * f / rate;
        w.samples[t] = std::sin(phase);
      }
      break;
    }
    case NoiseFamily::street: {
      w.samples = spectrally_shaped_noise(rng, n, 0.6);
      const double base_rms = std::sqrt(w.samples.squaredNorm() / n);
      const int events = std::max(1, static_cast<int>(duration_s * 2.0));
      for (int e = 0; e < events; ++e) {
        const Index start = static_cast<Index>(rng.uniform_int(static_cast<uint64_t>(n)));
        const Index len = static_cast<Index>(rng.uniform(0.03, 0.08) * rate);
        const double amp = base_rms * rng.uniform(4.0, 9.0);
        const double decay = 5.0 / static_cast<double>(len);
        for (Index i = 0; i < len && start + i < n; ++i)
          w.samples[start + i] += amp * std::exp(-decay * i) * rng.normal();
      }
      break;
    }
  }
  peak_normalize(w.samples, 0.5);
  return w;
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "validation") return Split::validation;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split: " + name);
}

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  throw ConfigError("bad split value");
}

MixSpec MixSpec::desk_default() {
  MixSpec s;
  s.train.count = 200;
  s.train.snrs = {-8, -4, 0, 4, 8};
  s.train.families = {NoiseFamily::white, NoiseFamily::pink, NoiseFamily::babble_like,
                      NoiseFamily::machine};
  s.validation.count = 40;
  s.validation.snrs = {-10, -5, 0, 5, 10};
  s.validation.families = {NoiseFamily::siren};
  s.test.count = 40;
  s.test.snrs = {-6, 0, 6, 12, 18};
  s.test.families = {NoiseFamily::street};
  return s;
}

void MixSpec::validate() const {
  const SplitSpec* specs[3] = {&train, &validation, &test};
  for (const SplitSpec* s : specs) {
    if (s->count <= 0) throw ConfigError("mix spec: nonpositive utterance count");
    if (s->snrs.empty()) throw ConfigError("mix spec: empty SNR grid");
    if (s->families.empty()) throw ConfigError("mix spec: no noise families");
  }
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b)
      for (NoiseFamily fa : specs[a]->families)
        for (NoiseFamily fb : specs[b]->families)
          if (fa == fb)
            throw ConfigError("mix spec: noise family '" + noise_family_name(fa) +
                              "' appears in two splits");
  if (dur_min_s < 0.5 || dur_max_s < dur_min_s)
    throw ConfigError("mix spec: bad duration range");
  if (sample_rate <= 0) throw ConfigError("mix spec: bad sample rate");
}

std::string DatasetManifest::resolve(const std::string& rel_path) const {
  return (fs::path(root_dir) / rel_path).string();
}

const UtteranceRecord& DatasetManifest::find(const std::string& id) const {
  for (const auto& r : records)
    if (r.id == id) return r;
  throw std::invalid_argument("unknown utterance id: " + id);
}

void DatasetManifest::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out << "#id\tsplit\tclean_path\tnoise_family\tsnr_db\tnoisy_path\tduration_s\tseed\n";
  out << "#corpus_seed\t" << corpus_seed << "\n";
  out << "#stft\t" << stft.fft_size << "\t" << stft.hop_size << "\t"
      << window_name(stft.window) << "\n";
  for (const auto& r : records) {
    out << r.id << '\t' << split_name(r.split) << '\t' << r.clean_path << '\t'
        << r.noise_family << '\t' << format_g(r.snr_db) << '\t' << r.noisy_path << '\t'
        << format_g(r.duration_s) << '\t' << r.seed << '\n';
  }
  if (!out) throw IoError("short write on " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  DatasetManifest m;
  m.root_dir = fs::path(path).parent_path().string();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, '\t')) f.push_back(tok);
    if (line[0] == '#') {
      if (f[0] == "#corpus_seed" && f.size() >= 2)
        m.corpus_seed = std::stoull(f[1]);
      else if (f[0] == "#stft" && f.size() >= 4) {
        m.stft.fft_size = std::stoi(f[1]);
        m.stft.hop_size = std::stoi(f[2]);
        m.stft.window = parse_window(f[3]);
      }
      continue;
    }
    if (f.size() != 8) throw IoError(path + ": malformed manifest row: " + line);
    UtteranceRecord r;
    r.id = f[0];
    r.split = parse_split(f[1]);
    r.clean_path = f[2];
    r.noise_family = f[3];
    r.snr_db = std::stod(f[4]);
    r.noisy_path = f[5];
    r.duration_s = std::stod(f[6]);
    r.seed = std::stoull(f[7]);
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetManifest build_dataset(const MixSpec& spec, const std::string& out_dir,
                              uint64_t seed, const StftConfig& stft) {
  spec.validate();
  stft.validate();
  fs::create_directories(fs::path(out_dir) / "clean");
  fs::create_directories(fs::path(out_dir) / "noisy");

  DatasetManifest manifest;
  manifest.stft = stft;
  manifest.corpus_seed = seed;
  manifest.root_dir = out_dir;

  const struct {
    Split split;
    const char* prefix;
    const SplitSpec* s;
  } splits[3] = {{Split::train, "tr", &spec.train},
                 {Split::validation, "va", &spec.validation},
                 {Split::test, "te", &spec.test}};

  for (const auto& sp : splits) {
    for (int i = 0; i < sp.s->count; ++i) {
      char idbuf[16];
      std::snprintf(idbuf, sizeof(idbuf), "%s%04d", sp.prefix, i);
      UtteranceRecord r;
      r.id = idbuf;
      r.split = sp.split;
      r.seed = derive_seed(seed, "utt/" + r.id);
      Rng rng(r.seed);
      r.duration_s = rng.uniform(spec.dur_min_s, spec.dur_max_s);
      r.snr_db = sp.s->snrs[i % sp.s->snrs.size()];
      const NoiseFamily family =
          sp.s->families[(i / sp.s->snrs.size()) % sp.s->families.size()];
      r.noise_family = noise_family_name(family);
      r.clean_path = std::string("clean/") + r.id + ".wav";
      r.noisy_path = std::string("noisy/") + r.id + ".wav";

      Waveform clean =
          synth_clean(derive_seed(r.seed, "clean"), r.duration_s, spec.sample_rate);
      const Waveform noise = synth_noise(family, derive_seed(r.seed, "noise"),
                                         r.duration_s + 1.0, spec.sample_rate);
      const Index offset =
          static_cast<Index>(rng.uniform_int(static_cast<uint64_t>(noise.size())));
      Waveform noisy = mix_at_snr(clean, noise, r.snr_db, offset);

      // Common headroom gain so neither file clips; the pair SNR is
      // unchanged by a shared scale.
      const double peak =
          std::max(noisy.samples.cwiseAbs().maxCoeff(), clean.samples.cwiseAbs().maxCoeff());
      if (peak > 0.95) {
        const double g = 0.95 / peak;
        noisy.samples *= g;
        clean.samples *= g;
      }
      write_wav((fs::path(out_dir) / r.clean_path).string(), clean);
      write_wav((fs::path(out_dir) / r.noisy_path).string(), noisy);
      manifest.records.push_back(std::move(r));
    }
  }
  manifest.save((fs::path(out_dir) / "manifest.tsv").string());
  return manifest;
}

namespace {

double metric_score(const MetricBackend& backend, const Waveform& degraded,
                    const Waveform& clean, const std::string& degraded_path,
                    const std::string& reference_path, const StftConfig& stft) {
  if (backend.kind == MetricBackend::Kind::builtin_proxy)
    return proxy_quality(degraded, clean, stft).value;
  return external_metric(backend, degraded_path, reference_path).value;
}

}  // namespace

std::vector<ScoredPair> label_dataset(const DatasetManifest& manifest,
                                      const MetricBackend& backend) {
  backend.validate();
  fs::create_directories(fs::path(manifest.root_dir) / "spec");
  std::vector<ScoredPair> pairs;
  for (const auto& r : manifest.records) {
    try {
      const Waveform noisy = read_wav(manifest.resolve(r.noisy_path));
      const Waveform clean = read_wav(manifest.resolve(r.clean_path));
      const auto [noisy_mag, np] = magnitude_and_phase(stft(noisy, manifest.stft));
      const auto [clean_mag, cp] = magnitude_and_phase(stft(clean, manifest.stft));

      ScoredPair p;
      p.utterance_id = r.id;
      p.source = ScoredPair::Source::noisy;
      p.degraded_spec_path = "spec/" + r.id + ".noisy.spec";
      p.clean_spec_path = "spec/" + r.id + ".clean.spec";
      write_spectrogram_cache(manifest.resolve(p.degraded_spec_path), noisy_mag.values);
      write_spectrogram_cache(manifest.resolve(p.clean_spec_path), clean_mag.values);
      p.score = metric_score(backend, noisy, clean, manifest.resolve(r.noisy_path),
                             manifest.resolve(r.clean_path), manifest.stft);
      p.normalized_score = p.score / 4.5;
      pairs.push_back(std::move(p));
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping " << r.id << ": " << e.what() << "\n";
    }
  }
  return pairs;
}

std::vector<ScoredPair> augment_with_enhanced(const std::vector<ScoredPair>& pairs,
                                              const DatasetManifest& manifest,
                                              const EnhancerModel& model,
                                              const MetricBackend& backend) {
  backend.validate();
  fs::create_directories(fs::path(manifest.root_dir) / "spec");
  fs::create_directories(fs::path(manifest.root_dir) / "enhanced");

  std::vector<ScoredPair> out = pairs;
  for (const auto& r : manifest.records) {
    if (r.split != Split::train) continue;
    try {
      const Waveform noisy = read_wav(manifest.resolve(r.noisy_path));
      const Waveform clean = read_wav(manifest.resolve(r.clean_path));
      const auto [noisy_mag, phase] = magnitude_and_phase(stft(noisy, manifest.stft));
      const Mat enhanced = noisy_mag.values.cwiseProduct(model.mask(noisy_mag.values));

      MagnitudeSpectrogram em;
      em.values = enhanced;
      em.config = manifest.stft;
      const Waveform recon = reconstruct(em, phase, manifest.stft, noisy.sample_rate_hz);
      const std::string enh_wav_rel = "enhanced/" + r.id + ".wav";
      write_wav(manifest.resolve(enh_wav_rel), recon);

      // Label from the written file so external metrics and the stored
      // score agree bit-for-bit.
      const Waveform recon_file = read_wav(manifest.resolve(enh_wav_rel));
      Waveform clean_trim;
      clean_trim.sample_rate_hz = clean.sample_rate_hz;
      clean_trim.samples = clean.samples.head(recon_file.size());

      ScoredPair p;
      p.utterance_id = r.id;
      p.source = ScoredPair::Source::enhanced;
      p.degraded_spec_path = "spec/" + r.id + ".enh.spec";
      p.clean_spec_path = "spec/" + r.id + ".clean.spec";
      write_spectrogram_cache(manifest.resolve(p.degraded_spec_path), enhanced);
      p.score = metric_score(backend, recon_file, clean_trim,
                             manifest.resolve(enh_wav_rel),
                             manifest.resolve(r.clean_path), manifest.stft);
      p.normalized_score = p.score / 4.5;
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping enhanced " << r.id << ": " << e.what() << "\n";
    }
  }
  return out;
}

void save_scored_pairs_csv(const std::string& path,
                           const std::vector<ScoredPair>& pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out << "id,source,score,normalized_score\n";
  for (const auto& p : pairs)
    out << p.utterance_id << ','
        << (p.source == ScoredPair::Source::noisy ? "noisy" : "enhanced") << ','
        << format_g(p.score) << ',' << format_g(p.normalized_score) << '\n';
  if (!out) throw IoError("short write on " + path);
}

std::vector<ScoredPair> load_scored_pairs_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<ScoredPair> pairs;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, source, score, norm;
    if (!std::getline(ss, id, ',') || !std::getline(ss, source, ',') ||
        !std::getline(ss, score, ',') || !std::getline(ss, norm, ','))
      throw IoError(path + ": malformed row: " + line);
    ScoredPair p;
    p.utterance_id = id;
    p.source = source == "enhanced" ? ScoredPair::Source::enhanced
                                    : ScoredPair::Source::noisy;
    p.degraded_spec_path =
        "spec/" + id + (p.source == ScoredPair::Source::enhanced ? ".enh.spec" : ".noisy.spec");
    p.clean_spec_path = "spec/" + id + ".clean.spec";
    p.score = std::stod(score);
    p.normalized_score = std::stod(norm);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace qnse

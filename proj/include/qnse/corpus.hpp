// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef QNSE_CORPUS_HPP
#define QNSE_CORPUS_HPP

#include <string>
#include <vector>

#include "qnse/dsp.hpp"
#include "qnse/enhancer.hpp"
#include "qnse/metrics.hpp"

namespace qnse {

/// Deterministic speech-like signal: a harmonic source with a random-walk
/// pitch contour, filtered by time-varying resonators and amplitude-gated
/// into voiced/pause segments. Peak-normalized to 0.5.
Waveform synth_clean(uint64_t seed, double duration_s, int rate);

enum class NoiseFamily { white, pink, babble_like, machine, siren, street };

NoiseFamily parse_noise_family(const std::string& name);
std::string noise_family_name(NoiseFamily f);

/// Deterministic noise generator, peak-normalized to 0.5.
Waveform synth_noise(NoiseFamily family, uint64_t seed, double duration_s, int rate);

enum class Split { train, validation, test };
Split parse_split(const std::string& name);
std::string split_name(Split s);

struct SplitSpec {
  int count = 0;
  std::vector<double> snrs;
  std::vector<NoiseFamily> families;
};

struct MixSpec {
  SplitSpec train;
  SplitSpec validation;
  SplitSpec test;
  double dur_min_s = 1.5;
  double dur_max_s = 2.5;
  int sample_rate = 8000;

  static MixSpec desk_default();
  void validate() const;  // disjoint families, nonempty grids
};

struct UtteranceRecord {
  std::string id;
  Split split = Split::train;
  std::string clean_path;  // relative to the corpus root
  std::string noise_family;
  double snr_db = 0.0;
  std::string noisy_path;
  double duration_s = 0.0;
  uint64_t seed = 0;
};

struct DatasetManifest {
  std::vector<UtteranceRecord> records;
  StftConfig stft;
  uint64_t corpus_seed = 0;
  std::string root_dir;

  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);
  std::string resolve(const std::string& rel_path) const;
  const UtteranceRecord& find(const std::string& id) const;
};

/// Generates clean and mixed WAV files over the split grids and writes
/// <out_dir>/manifest.tsv. Fully reproducible from the seed.
DatasetManifest build_dataset(const MixSpec& spec, const std::string& out_dir,
                              uint64_t seed, const StftConfig& stft);

struct ScoredPair {
  std::string utterance_id;
  enum class Source { noisy, enhanced } source = Source::noisy;
  std::string degraded_spec_path;  // relative spectrogram cache paths
  std::string clean_spec_path;
  double score = 0.0;
  double normalized_score = 0.0;
};

/// Scores every utterance with the backend, caches magnitude spectrograms
/// under <root>/spec/, and returns the labeled pairs. Utterances whose
/// metric call fails are skipped with a warning on stderr.
std::vector<ScoredPair> label_dataset(const DatasetManifest& manifest,
                                      const MetricBackend& backend);

/// For each train-split utterance adds an (enhanced, clean) pair labeled by
/// the metric score of the reconstructed enhanced waveform (enhanced
/// magnitude + noisy phase). Original pairs are retained.
std::vector<ScoredPair> augment_with_enhanced(const std::vector<ScoredPair>& pairs,
                                              const DatasetManifest& manifest,
                                              const EnhancerModel& model,
                                              const MetricBackend& backend);

void save_scored_pairs_csv(const std::string& path, const std::vector<ScoredPair>& pairs);
std::vector<ScoredPair> load_scored_pairs_csv(const std::string& path);

}  // namespace qnse

#endif  // QNSE_CORPUS_HPP

// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "qnse/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "qnse/wav.hpp"

namespace fs = std::filesystem;

namespace qnse {

// ---- config ------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": " + v);
}

std::vector<double> parse_double_list(const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(std::stod(tok));
  }
  return out;
}

std::vector<NoiseFamily> parse_family_list(const std::string& v) {
  std::vector<NoiseFamily> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(parse_noise_family(tok));
  }
  return out;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += format_g(v[i]);
  }
  return out;
}

std::string join_families(const std::vector<NoiseFamily>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += noise_family_name(v[i]);
  }
  return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::desk_default() { return ExperimentConfig{}; }

std::string ExperimentConfig::corpus_path() const {
  return corpus_dir.empty() ? (fs::path(out_dir) / "corpus").string() : corpus_dir;
}

std::string ExperimentConfig::manifest_path() const {
  return (fs::path(corpus_path()) / "manifest.tsv").string();
}

QualityNetConfig ExperimentConfig::qnet_config() const {
  QualityNetConfig c =
      qnet_preset == "paper" ? QualityNetConfig::paper() : QualityNetConfig::desk();
  c.spectral_norm = qnet_spectral_norm;
  c.leaky_slope = qnet_leaky_slope;
  c.log_compress = qnet_log_compress;
  return c;
}

EnhancerConfig ExperimentConfig::enhancer_config() const {
  EnhancerConfig c =
      enhancer_preset == "paper" ? EnhancerConfig::paper() : EnhancerConfig::desk();
  c.out_bins = stft.bins();  // the mask width always matches the front-end
  return c;
}

void ExperimentConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("run.out_dir must be set");
  stft.validate();
  mix.validate();
  metric.validate();
  if (qnet_preset != "paper" && qnet_preset != "desk")
    throw ConfigError("qnet.preset must be paper or desk");
  if (enhancer_preset != "paper" && enhancer_preset != "desk")
    throw ConfigError("enhancer.preset must be paper or desk");
  qnet_config().validate();
  enhancer_config().validate();
  if (finetune_val_subset < 1) throw ConfigError("train_finetune.val_subset must be >= 1");
  if (fooling_tau <= 0.0) throw ConfigError("fooling.tau must be positive");
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);

  ExperimentConfig cfg = desk_default();
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string sk = section + "." + key;

    if (sk == "run.out_dir") cfg.out_dir = value;
    else if (sk == "run.seed") cfg.seed = std::stoull(value);
    else if (sk == "corpus.dir") cfg.corpus_dir = value;
    else if (sk == "corpus.sample_rate") cfg.mix.sample_rate = std::stoi(value);
    else if (sk == "corpus.dur_min_s") cfg.mix.dur_min_s = std::stod(value);
    else if (sk == "corpus.dur_max_s") cfg.mix.dur_max_s = std::stod(value);
    else if (sk == "corpus.train_count") cfg.mix.train.count = std::stoi(value);
    else if (sk == "corpus.train_snrs") cfg.mix.train.snrs = parse_double_list(value);
    else if (sk == "corpus.train_families") cfg.mix.train.families = parse_family_list(value);
    else if (sk == "corpus.validation_count") cfg.mix.validation.count = std::stoi(value);
    else if (sk == "corpus.validation_snrs") cfg.mix.validation.snrs = parse_double_list(value);
    else if (sk == "corpus.validation_families")
      cfg.mix.validation.families = parse_family_list(value);
    else if (sk == "corpus.test_count") cfg.mix.test.count = std::stoi(value);
    else if (sk == "corpus.test_snrs") cfg.mix.test.snrs = parse_double_list(value);
    else if (sk == "corpus.test_families") cfg.mix.test.families = parse_family_list(value);
    else if (sk == "stft.fft_size") cfg.stft.fft_size = std::stoi(value);
    else if (sk == "stft.hop_size") cfg.stft.hop_size = std::stoi(value);
    else if (sk == "stft.window") cfg.stft.window = parse_window(value);
    else if (sk == "metric.backend") {
      if (value == "builtin") cfg.metric.kind = MetricBackend::Kind::builtin_proxy;
      else if (value == "external") cfg.metric.kind = MetricBackend::Kind::external_command;
      else throw ConfigError("metric.backend must be builtin or external");
    } else if (sk == "metric.command_template") cfg.metric.command_template = value;
    else if (sk == "qnet.preset") cfg.qnet_preset = value;
    else if (sk == "qnet.spectral_norm") cfg.qnet_spectral_norm = parse_bool(value, sk);
    else if (sk == "qnet.leaky_slope") cfg.qnet_leaky_slope = std::stod(value);
    else if (sk == "qnet.log_compress") cfg.qnet_log_compress = parse_bool(value, sk);
    else if (sk == "enhancer.preset") cfg.enhancer_preset = value;
    else if (sk == "train_qnet.lr") cfg.qnet_hyper.lr = std::stod(value);
    else if (sk == "train_qnet.rho") cfg.qnet_hyper.rho = std::stod(value);
    else if (sk == "train_qnet.eps") cfg.qnet_hyper.eps = std::stod(value);
    else if (sk == "train_qnet.max_epochs") cfg.qnet_hyper.max_epochs = std::stoi(value);
    else if (sk == "train_qnet.patience") cfg.qnet_hyper.patience = std::stoi(value);
    else if (sk == "train_qnet.accum_batch") cfg.qnet_hyper.accum_batch = std::stoi(value);
    else if (sk == "train_pretrain.lr") cfg.pretrain_hyper.lr = std::stod(value);
    else if (sk == "train_pretrain.rho") cfg.pretrain_hyper.rho = std::stod(value);
    else if (sk == "train_pretrain.eps") cfg.pretrain_hyper.eps = std::stod(value);
    else if (sk == "train_pretrain.max_epochs")
      cfg.pretrain_hyper.max_epochs = std::stoi(value);
    else if (sk == "train_pretrain.patience") cfg.pretrain_hyper.patience = std::stoi(value);
    else if (sk == "train_pretrain.accum_batch")
      cfg.pretrain_hyper.accum_batch = std::stoi(value);
    else if (sk == "train_finetune.lr") cfg.finetune_hyper.lr = std::stod(value);
    else if (sk == "train_finetune.rho") cfg.finetune_hyper.rho = std::stod(value);
    else if (sk == "train_finetune.eps") cfg.finetune_hyper.eps = std::stod(value);
    else if (sk == "train_finetune.iterations")
      cfg.finetune_hyper.iterations = std::stol(value);
    else if (sk == "train_finetune.patience") cfg.finetune_hyper.patience = std::stol(value);
    else if (sk == "train_finetune.accum_batch")
      cfg.finetune_hyper.accum_batch = std::stoi(value);
    else if (sk == "train_finetune.log_every") cfg.finetune_hyper.log_every = std::stol(value);
    else if (sk == "train_finetune.val_subset") cfg.finetune_val_subset = std::stoi(value);
    else if (sk == "fooling.tau") cfg.fooling_tau = std::stod(value);
    else if (sk == "fooling.iterations") cfg.fooling_iterations = std::stol(value);
    else if (sk == "fooling.log_every") cfg.fooling_log_every = std::stol(value);
    else throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key " + sk);
  }
  return cfg;
}

void ExperimentConfig::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out << "[run]\n";
  out << "out_dir = " << out_dir << "\n";
  out << "seed = " << seed << "\n\n";
  out << "[corpus]\n";
  out << "dir = " << corpus_path() << "\n";
  out << "sample_rate = " << mix.sample_rate << "\n";
  out << "dur_min_s = " << format_g(mix.dur_min_s) << "\n";
  out << "dur_max_s = " << format_g(mix.dur_max_s) << "\n";
  out << "train_count = " << mix.train.count << "\n";
  out << "train_snrs = " << join_doubles(mix.train.snrs) << "\n";
  out << "train_families = " << join_families(mix.train.families) << "\n";
  out << "validation_count = " << mix.validation.count << "\n";
  out << "validation_snrs = " << join_doubles(mix.validation.snrs) << "\n";
  out << "validation_families = " << join_families(mix.validation.families) << "\n";
  out << "test_count = " << mix.test.count << "\n";
  out << "test_snrs = " << join_doubles(mix.test.snrs) << "\n";
  out << "test_families = " << join_families(mix.test.families) << "\n\n";
  out << "[stft]\n";
  out << "fft_size = " << stft.fft_size << "\n";
  out << "hop_size = " << stft.hop_size << "\n";
  out << "window = " << window_name(stft.window) << "\n\n";
  out << "[metric]\n";
  out << "backend = "
      << (metric.kind == MetricBackend::Kind::builtin_proxy ? "builtin" : "external")
      << "\n";
  out << "command_template = " << metric.command_template << "\n\n";
  out << "[qnet]\n";
  out << "preset = " << qnet_preset << "\n";
  out << "spectral_norm = " << (qnet_spectral_norm ? "true" : "false") << "\n";
  out << "leaky_slope = " << format_g(qnet_leaky_slope) << "\n";
  out << "log_compress = " << (qnet_log_compress ? "true" : "false") << "\n\n";
  out << "[enhancer]\n";
  out << "preset = " << enhancer_preset << "\n\n";
  out << "[train_qnet]\n";
  out << "lr = " << format_g(qnet_hyper.lr) << "\n";
  out << "rho = " << format_g(qnet_hyper.rho) << "\n";
  out << "eps = " << format_g(qnet_hyper.eps) << "\n";
  out << "max_epochs = " << qnet_hyper.max_epochs << "\n";
  out << "patience = " << qnet_hyper.patience << "\n";
  out << "accum_batch = " << qnet_hyper.accum_batch << "\n\n";
  out << "[train_pretrain]\n";
  out << "lr = " << format_g(pretrain_hyper.lr) << "\n";
  out << "rho = " << format_g(pretrain_hyper.rho) << "\n";
  out << "eps = " << format_g(pretrain_hyper.eps) << "\n";
  out << "max_epochs = " << pretrain_hyper.max_epochs << "\n";
  out << "patience = " << pretrain_hyper.patience << "\n";
  out << "accum_batch = " << pretrain_hyper.accum_batch << "\n\n";
  out << "[train_finetune]\n";
  out << "lr = " << format_g(finetune_hyper.lr) << "\n";
  out << "rho = " << format_g(finetune_hyper.rho) << "\n";
  out << "eps = " << format_g(finetune_hyper.eps) << "\n";
  out << "iterations = " << finetune_hyper.iterations << "\n";
  out << "patience = " << finetune_hyper.patience << "\n";
  out << "accum_batch = " << finetune_hyper.accum_batch << "\n";
  out << "log_every = " << finetune_hyper.log_every << "\n";
  out << "val_subset = " << finetune_val_subset << "\n\n";
  out << "[fooling]\n";
  out << "tau = " << format_g(fooling_tau) << "\n";
  out << "iterations = " << fooling_iterations << "\n";
  out << "log_every = " << fooling_log_every << "\n";
  if (!out) throw IoError("short write on " + path);
}

// ---- run-dir helpers --------------------------------------------------------------

void ensure_run_dirs(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");
  fs::create_directories(fs::path(cfg.out_dir) / "traces");
  fs::create_directories(fs::path(cfg.out_dir) / "tables");
  fs::create_directories(fs::path(cfg.out_dir) / "spectrograms");
  cfg.save((fs::path(cfg.out_dir) / "config.resolved").string());
}

double pearson_correlation(const Vec& a, const Vec& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("pearson: need two equally sized samples");
  const Vec da = a.array() - a.mean();
  const Vec db = b.array() - b.mean();
  const double va = da.squaredNorm(), vb = db.squaredNorm();
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return da.dot(db) / std::sqrt(va * vb);
}

std::vector<SpecPair> load_spec_pairs(const DatasetManifest& manifest, Split split) {
  std::vector<SpecPair> out;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    const std::string noisy_cache = manifest.resolve("spec/" + r.id + ".noisy.spec");
    const std::string clean_cache = manifest.resolve("spec/" + r.id + ".clean.spec");
    SpecPair p;
    if (fs::exists(noisy_cache) && fs::exists(clean_cache)) {
      p.noisy = read_spectrogram_cache(noisy_cache);
      p.clean = read_spectrogram_cache(clean_cache);
    } else {
      const Waveform noisy = read_wav(manifest.resolve(r.noisy_path));
      const Waveform clean = read_wav(manifest.resolve(r.clean_path));
      p.noisy = magnitude_and_phase(stft(noisy, manifest.stft)).first.values;
      p.clean = magnitude_and_phase(stft(clean, manifest.stft)).first.values;
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<FinetuneValItem> make_finetune_val_items(const DatasetManifest& manifest,
                                                     int subset) {
  std::vector<FinetuneValItem> out;
  for (const auto& r : manifest.records) {
    if (r.split != Split::validation) continue;
    if (static_cast<int>(out.size()) >= subset) break;
    const Waveform noisy = read_wav(manifest.resolve(r.noisy_path));
    const Waveform clean = read_wav(manifest.resolve(r.clean_path));
    auto [mag, phase] = magnitude_and_phase(stft(noisy, manifest.stft));
    FinetuneValItem item;
    item.noisy_mag = std::move(mag.values);
    item.clean_mag = magnitude_and_phase(stft(clean, manifest.stft)).first.values;
    item.phase = std::move(phase);
    const Index recon_len = (item.noisy_mag.rows() - 1) * manifest.stft.hop_size +
                            manifest.stft.fft_size;
    item.clean_trim.sample_rate_hz = clean.sample_rate_hz;
    item.clean_trim.samples = clean.samples.head(recon_len);
    out.push_back(std::move(item));
  }
  if (out.empty())
    throw std::invalid_argument("no validation utterances for fine-tune scoring");
  return out;
}

// ---- CSV emission -------------------------------------------------------------------

void save_history_csv(const std::string& path, const TrainingHistory& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out << "epoch,train_mse,val_mse\n";
  for (const auto& e : history)
    out << e.epoch << ',' << format_g(e.train_mse) << ',' << format_g(e.val_mse) << '\n';
}

void save_trace_csv(const std::string& path, const FoolingTrace& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out << "iteration,loss,predicted_mean,true_quality_mean,intelligibility_mean\n";
  for (const auto& p : trace)
    out << p.iteration << ',' << format_g(p.loss) << ',' << format_g(p.predicted_mean)
        << ',' << format_g(p.true_quality_mean) << ','
        << format_g(p.intelligibility_mean) << '\n';
}

FoolingTrace load_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  FoolingTrace trace;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto& tok : f)
      if (!std::getline(ss, tok, ',')) throw IoError(path + ": malformed row: " + line);
    FoolingPoint p;
    p.iteration = std::stol(f[0]);
    p.loss = std::stod(f[1]);
    p.predicted_mean = std::stod(f[2]);
    p.true_quality_mean = std::stod(f[3]);
    p.intelligibility_mean = std::stod(f[4]);
    trace.push_back(p);
  }
  return trace;
}

std::string EvalTable::to_csv() const {
  std::string out = "snr_db";
  for (const auto& s : systems)
    out += "," + s + "_quality," + s + "_intelligibility";
  out += "\n";
  for (size_t row = 0; row < cells.size(); ++row) {
    const bool avg_row = row + 1 == cells.size();
    out += avg_row ? std::string("avg") : format_g(snr_rows[row]);
    for (const auto& cell : cells[row])
      out += "," + format_g(cell.quality) + "," + format_g(cell.intelligibility);
    out += "\n";
  }
  return out;
}

void save_eval_table(const std::string& path, const EvalTable& table) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out << table.to_csv();
  if (!out) throw IoError("short write on " + path);
}

// ---- evaluation -----------------------------------------------------------------------

namespace {

struct SystemScores {
  double quality = 0.0;
  double intelligibility = 0.0;
};

// Shared signal path for every system including the "noisy" identity
// column: spectral enhancement, overlap-add with the noisy phase, proxies
// against the trimmed clean reference.
SystemScores score_utterance(const Waveform& noisy, const Waveform& clean,
                             const EnhancerModel* model, const StftConfig& cfg) {
  const auto [mag, phase] = magnitude_and_phase(stft(noisy, cfg));
  MagnitudeSpectrogram enhanced;
  enhanced.config = cfg;
  enhanced.values = model ? Mat(mag.values.cwiseProduct(model->mask(mag.values)))
                          : mag.values;
  const Waveform recon = reconstruct(enhanced, phase, cfg, noisy.sample_rate_hz);
  Waveform clean_trim;
  clean_trim.sample_rate_hz = clean.sample_rate_hz;
  clean_trim.samples = clean.samples.head(recon.size());
  SystemScores s;
  s.quality = proxy_quality(recon, clean_trim, cfg).value;
  s.intelligibility = proxy_intelligibility(recon, clean_trim, cfg).value;
  return s;
}

}  // namespace

EvalTable evaluate_models(
    const DatasetManifest& manifest,
    const std::vector<std::pair<std::string, const EnhancerModel*>>& models,
    Split split) {
  EvalTable table;
  table.systems.push_back("noisy");
  for (const auto& [name, model] : models) table.systems.push_back(name);

  for (const auto& r : manifest.records)
    if (r.split == split &&
        std::find(table.snr_rows.begin(), table.snr_rows.end(), r.snr_db) ==
            table.snr_rows.end())
      table.snr_rows.push_back(r.snr_db);
  std::sort(table.snr_rows.begin(), table.snr_rows.end());
  if (table.snr_rows.empty())
    throw std::invalid_argument("evaluate_models: split has no utterances");

  const size_t nsys = table.systems.size();
  std::vector<std::vector<EvalCell>> acc(table.snr_rows.size(),
                                         std::vector<EvalCell>(nsys));
  std::vector<long> counts(table.snr_rows.size(), 0);

  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    const size_t row =
        std::find(table.snr_rows.begin(), table.snr_rows.end(), r.snr_db) -
        table.snr_rows.begin();
    const Waveform noisy = read_wav(manifest.resolve(r.noisy_path));
    const Waveform clean = read_wav(manifest.resolve(r.clean_path));
    ++counts[row];
    for (size_t s = 0; s < nsys; ++s) {
      const EnhancerModel* model = s == 0 ? nullptr : models[s - 1].second;
      const SystemScores scores = score_utterance(noisy, clean, model, manifest.stft);
      acc[row][s].quality += scores.quality;
      acc[row][s].intelligibility += scores.intelligibility;
    }
  }

  table.cells.resize(table.snr_rows.size() + 1, std::vector<EvalCell>(nsys));
  for (size_t row = 0; row < table.snr_rows.size(); ++row)
    for (size_t s = 0; s < nsys; ++s) {
      table.cells[row][s].quality = acc[row][s].quality / counts[row];
      table.cells[row][s].intelligibility = acc[row][s].intelligibility / counts[row];
    }
  // Avg row: equal weighting of the level rows.
  const size_t avg = table.snr_rows.size();
  for (size_t s = 0; s < nsys; ++s) {
    double q = 0.0, i = 0.0;
    for (size_t row = 0; row < avg; ++row) {
      q += table.cells[row][s].quality;
      i += table.cells[row][s].intelligibility;
    }
    table.cells[avg][s].quality = q / static_cast<double>(avg);
    table.cells[avg][s].intelligibility = i / static_cast<double>(avg);
  }
  return table;
}

// ---- fooling -----------------------------------------------------------------------------

FoolingSummary fooling_report(const FoolingTrace& trace, double tau) {
  if (trace.size() < 2)
    throw std::invalid_argument("fooling_report: trace needs at least two points");
  size_t peak = 0;
  for (size_t i = 1; i < trace.size(); ++i)
    if (trace[i].true_quality_mean > trace[peak].true_quality_mean) peak = i;
  FoolingSummary s;
  s.peak_iteration = trace[peak].iteration;
  s.true_peak = trace[peak].true_quality_mean;
  s.true_end = trace.back().true_quality_mean;
  s.predicted_at_peak = trace[peak].predicted_mean;
  s.predicted_end = trace.back().predicted_mean;
  s.detected = s.predicted_end > s.predicted_at_peak && s.true_end < s.true_peak - tau;
  return s;
}

// ---- stages -------------------------------------------------------------------------------

namespace {

DatasetManifest ensure_corpus(const ExperimentConfig& cfg) {
  if (fs::exists(cfg.manifest_path())) return DatasetManifest::load(cfg.manifest_path());
  return build_dataset(cfg.mix, cfg.corpus_path(), derive_seed(cfg.seed, "corpus"),
                       cfg.stft);
}

std::vector<ScoredPair> ensure_labels(const ExperimentConfig& cfg,
                                      const DatasetManifest& manifest) {
  const std::string pairs_csv = (fs::path(cfg.corpus_path()) / "pairs.csv").string();
  if (fs::exists(pairs_csv)) return load_scored_pairs_csv(pairs_csv);
  std::vector<ScoredPair> pairs = label_dataset(manifest, cfg.metric);
  save_scored_pairs_csv(pairs_csv, pairs);
  return pairs;
}

std::vector<LabeledPair> to_labeled(const std::vector<ScoredPair>& pairs,
                                    const DatasetManifest& manifest,
                                    const std::set<std::string>& ids) {
  std::vector<LabeledPair> out;
  for (const auto& p : pairs) {
    if (!ids.count(p.utterance_id)) continue;
    LabeledPair lp;
    lp.degraded = read_spectrogram_cache(manifest.resolve(p.degraded_spec_path));
    lp.clean = read_spectrogram_cache(manifest.resolve(p.clean_spec_path));
    lp.target = p.normalized_score;
    out.push_back(std::move(lp));
  }
  return out;
}

std::set<std::string> split_ids(const DatasetManifest& manifest, Split split) {
  std::set<std::string> ids;
  for (const auto& r : manifest.records)
    if (r.split == split) ids.insert(r.id);
  return ids;
}

EnhancerModel pretrain_or_load(const ExperimentConfig& cfg,
                               const DatasetManifest& manifest,
                               const std::string& ckpt) {
  if (fs::exists(ckpt)) return EnhancerModel::load(cfg.enhancer_config(), ckpt);
  EnhancerModel enh =
      EnhancerModel::build(cfg.enhancer_config(), derive_seed(cfg.seed, "enhancer"));
  PretrainHyper hyper = cfg.pretrain_hyper;
  hyper.seed = derive_seed(cfg.seed, "pretrain");
  const std::vector<SpecPair> train = load_spec_pairs(manifest, Split::train);
  const std::vector<SpecPair> val = load_spec_pairs(manifest, Split::validation);
  const TrainingHistory history = pretrain_mse(enh, train, val, hyper);
  save_history_csv((fs::path(cfg.out_dir) / "traces" / "pretrain_history.csv").string(),
                   history);
  enh.save(ckpt);
  return enh;
}

void save_key_values(const std::string& path,
                     const std::vector<std::pair<std::string, std::string>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  out << "key,value\n";
  for (const auto& [k, v] : rows) out << k << ',' << v << '\n';
}

}  // namespace

StageAResult run_stage_a(const ExperimentConfig& cfg) {
  cfg.validate();
  ensure_run_dirs(cfg);
  const DatasetManifest manifest = ensure_corpus(cfg);
  const std::vector<ScoredPair> pairs = ensure_labels(cfg, manifest);

  StageAResult result;
  result.pretrained_ckpt =
      (fs::path(cfg.out_dir) / "checkpoints" / "enhancer_pretrained.ckpt").string();
  result.qnet_ckpt = (fs::path(cfg.out_dir) / "checkpoints" / "qnet.ckpt").string();

  // Provisional enhancer whose outputs widen the surrogate's training
  // distribution.
  const EnhancerModel enh = pretrain_or_load(cfg, manifest, result.pretrained_ckpt);

  const std::set<std::string> train_ids = split_ids(manifest, Split::train);
  const std::set<std::string> val_ids = split_ids(manifest, Split::validation);
  std::vector<ScoredPair> train_pairs;
  for (const auto& p : pairs)
    if (train_ids.count(p.utterance_id)) train_pairs.push_back(p);

  const std::string aug_csv = (fs::path(cfg.corpus_path()) / "pairs_augmented.csv").string();
  std::vector<ScoredPair> augmented;
  if (fs::exists(aug_csv)) {
    augmented = load_scored_pairs_csv(aug_csv);
  } else {
    augmented = augment_with_enhanced(train_pairs, manifest, enh, cfg.metric);
    save_scored_pairs_csv(aug_csv, augmented);
  }

  const std::vector<LabeledPair> train_lp = to_labeled(augmented, manifest, train_ids);
  const std::vector<LabeledPair> val_lp = to_labeled(pairs, manifest, val_ids);

  QualityNetModel qnet =
      QualityNetModel::build(cfg.qnet_config(), derive_seed(cfg.seed, "qnet"));
  QnetHyper hyper = cfg.qnet_hyper;
  hyper.seed = derive_seed(cfg.seed, "qnet_train");
  const TrainingHistory history = qnet_train(qnet, train_lp, val_lp, hyper);
  save_history_csv((fs::path(cfg.out_dir) / "traces" / "qnet_history.csv").string(),
                   history);
  result.epochs_run = static_cast<int>(history.size());

  qnet.freeze();
  qnet.save(result.qnet_ckpt);

  // Held-out fidelity of the frozen surrogate.
  Vec preds(static_cast<Index>(val_lp.size())), targets(static_cast<Index>(val_lp.size()));
  for (size_t i = 0; i < val_lp.size(); ++i) {
    preds[static_cast<Index>(i)] = qnet.predict(val_lp[i].degraded, val_lp[i].clean);
    targets[static_cast<Index>(i)] = val_lp[i].target;
  }
  result.pearson_r = pearson_correlation(preds, targets);
  result.best_val_mse = (preds - targets).squaredNorm() / static_cast<double>(preds.size());

  save_key_values(
      (fs::path(cfg.out_dir) / "tables" / "stage_a_summary.csv").string(),
      {{"pearson_r", format_g(result.pearson_r)},
       {"val_mse_frozen", format_g(result.best_val_mse)},
       {"epochs_run", std::to_string(result.epochs_run)}});
  return result;
}

StageBResult run_stage_b(const ExperimentConfig& cfg, const std::string& qnet_ckpt) {
  cfg.validate();
  ensure_run_dirs(cfg);
  const DatasetManifest manifest = ensure_corpus(cfg);

  const QualityNetModel qnet = QualityNetModel::load(cfg.qnet_config(), qnet_ckpt);
  if (!qnet.frozen())
    throw std::invalid_argument("stage B requires a frozen surrogate checkpoint");

  const std::string pre_ckpt =
      (fs::path(cfg.out_dir) / "checkpoints" / "enhancer_pretrained.ckpt").string();
  EnhancerModel enh = pretrain_or_load(cfg, manifest, pre_ckpt);

  const std::vector<SpecPair> train = load_spec_pairs(manifest, Split::train);
  const std::vector<FinetuneValItem> val =
      make_finetune_val_items(manifest, cfg.finetune_val_subset);

  FinetuneHyper hyper = cfg.finetune_hyper;
  hyper.seed = derive_seed(cfg.seed, "finetune");
  const FinetuneResult fr = finetune_quality_net_loss(enh, qnet, train, val, cfg.stft, hyper);

  StageBResult result;
  result.finetuned_ckpt =
      (fs::path(cfg.out_dir) / "checkpoints" / "enhancer_finetuned.ckpt").string();
  enh.save(result.finetuned_ckpt);
  save_trace_csv((fs::path(cfg.out_dir) / "traces" / "finetune_trace.csv").string(),
                 fr.trace);
  result.trace = fr.trace;
  result.best_iteration = fr.best_iteration;
  result.best_true_quality = fr.best_true_quality;
  result.baseline_true_quality = fr.trace.front().true_quality_mean;
  return result;
}

// ---- exports -------------------------------------------------------------------------------

void export_spectrograms(const ExperimentConfig& cfg, const DatasetManifest& manifest,
                         const EnhancerModel& model, const std::string& utterance_id) {
  const UtteranceRecord& r = manifest.find(utterance_id);
  const Waveform noisy = read_wav(manifest.resolve(r.noisy_path));
  const Waveform clean = read_wav(manifest.resolve(r.clean_path));
  const auto [noisy_mag, phase] = magnitude_and_phase(stft(noisy, manifest.stft));
  const Mat clean_mag = magnitude_and_phase(stft(clean, manifest.stft)).first.values;
  const Mat enhanced = noisy_mag.values.cwiseProduct(model.mask(noisy_mag.values));

  const auto to_db = [](const Mat& m) {
    return Mat(m.unaryExpr(
        [](double v) { return std::max(-80.0, 20.0 * std::log10(std::max(v, 1e-30))); }));
  };
  const fs::path dir = fs::path(cfg.out_dir) / "spectrograms";
  fs::create_directories(dir);
  write_spectrogram_cache((dir / (utterance_id + ".clean.spec")).string(), to_db(clean_mag));
  write_spectrogram_cache((dir / (utterance_id + ".noisy.spec")).string(),
                          to_db(noisy_mag.values));
  write_spectrogram_cache((dir / (utterance_id + ".enhanced.spec")).string(),
                          to_db(enhanced));

  Waveform clean_trim;
  clean_trim.sample_rate_hz = clean.sample_rate_hz;
  const Index recon_len =
      (noisy_mag.values.rows() - 1) * manifest.stft.hop_size + manifest.stft.fft_size;
  clean_trim.samples = clean.samples.head(recon_len);

  const double clean_score =
      proxy_quality(clean_trim, clean_trim, manifest.stft).value;  // zero-error anchor
  const SystemScores noisy_scores = score_utterance(noisy, clean, nullptr, manifest.stft);
  const SystemScores enh_scores = score_utterance(noisy, clean, &model, manifest.stft);

  std::ofstream out((dir / (utterance_id + "_scores.csv")).string(), std::ios::trunc);
  if (!out) throw IoError("cannot create score sidecar for " + utterance_id);
  out << "file,quality\n";
  out << "clean," << format_g(clean_score) << "\n";
  out << "noisy," << format_g(noisy_scores.quality) << "\n";
  out << "enhanced," << format_g(enh_scores.quality) << "\n";
}

// ---- gradient suite ---------------------------------------------------------------------------

namespace {

Mat random_mat(Rng& rng, Index r, Index c, double scale) {
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// Keep leaky-relu inputs away from the kink so central differences stay
// clean at step 1e-5.
Mat random_mat_kink_safe(Rng& rng, Index r, Index c, double scale) {
  Mat m = random_mat(rng, r, c, scale);
  return m.unaryExpr([](double v) {
    if (std::abs(v) < 0.05) return v < 0.0 ? v - 0.1 : v + 0.1;
    return v;
  });
}

void add_check(GradientSuiteResult& res, const std::string& name,
               const nn::GradientReport& rep, double tol) {
  const double worst = rep.max_rel_err();
  res.worst = std::max(res.worst, worst);
  const bool ok = worst < tol;
  if (!ok) res.ok = false;
  res.lines.push_back(name + ": max_rel_err=" + format_g(worst) + " tol=" +
                      format_g(tol) + (ok ? " ok" : " FAIL"));
}

}  // namespace

GradientSuiteResult run_gradient_suite() {
  GradientSuiteResult res;
  Rng rng(20260810);

  {  // dense
    nn::ParameterSet ps;
    nn::Param& x = ps.add("x", {3, 4});
    nn::Param& W = ps.add("W", {4, 2});
    nn::Param& b = ps.add("b", {2});
    x.value = random_mat(rng, 3, 4, 1.0);
    W.value = random_mat(rng, 4, 2, 0.7);
    b.value = random_mat(rng, 2, 1, 0.5);
    const Mat proj = random_mat(rng, 3, 2, 1.0);
    const auto loss = [&]() {
      return nn::dense_forward(x.value, W.value, b.value.col(0), nullptr)
          .cwiseProduct(proj)
          .sum();
    };
    const auto backward = [&]() {
      ps.zero_grads();
      nn::DenseCache c;
      nn::dense_forward(x.value, W.value, b.value.col(0), &c);
      x.grad = nn::dense_backward(proj, c, W.value, W.grad, b.grad);
    };
    add_check(res, "dense", nn::finite_diff_check(ps, loss, backward), 1e-4);
  }

  {  // conv2d, C=2 -> K=3, 3x3 kernel on a 5x5 map
    nn::ParameterSet ps;
    nn::Param& x0 = ps.add("x0", {5, 5});
    nn::Param& x1 = ps.add("x1", {5, 5});
    nn::Param& W = ps.add("W", {3, 2, 3, 3});
    nn::Param& b = ps.add("b", {3});
    x0.value = random_mat(rng, 5, 5, 1.0);
    x1.value = random_mat(rng, 5, 5, 1.0);
    W.value = random_mat(rng, 3, 18, 0.5);
    b.value = random_mat(rng, 3, 1, 0.3);
    std::vector<Mat> proj(3);
    for (auto& p : proj) p = random_mat(rng, 5, 5, 1.0);
    const auto fwd = [&](nn::Conv2dCache* cache) {
      return nn::conv2d_forward({x0.value, x1.value}, W.value, b.value.col(0), 3, 3,
                                cache);
    };
    const auto loss = [&]() {
      const std::vector<Mat> y = fwd(nullptr);
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += y[k].cwiseProduct(proj[k]).sum();
      return acc;
    };
    const auto backward = [&]() {
      ps.zero_grads();
      nn::Conv2dCache c;
      fwd(&c);
      const std::vector<Mat> gx = nn::conv2d_backward(proj, c, W.value, W.grad, b.grad);
      x0.grad = gx[0];
      x1.grad = gx[1];
    };
    add_check(res, "conv2d", nn::finite_diff_check(ps, loss, backward), 1e-4);
  }

  {  // global average pooling
    nn::ParameterSet ps;
    nn::Param& x0 = ps.add("x0", {4, 3});
    nn::Param& x1 = ps.add("x1", {4, 3});
    x0.value = random_mat(rng, 4, 3, 1.0);
    x1.value = random_mat(rng, 4, 3, 1.0);
    const Vec proj = random_mat(rng, 2, 1, 1.0).col(0);
    const auto loss = [&]() {
      return proj.dot(nn::global_avg_pool2d({x0.value, x1.value}));
    };
    const auto backward = [&]() {
      ps.zero_grads();
      const std::vector<Mat> gx = nn::global_avg_pool2d_backward(proj, 2, 4, 3);
      x0.grad = gx[0];
      x1.grad = gx[1];
    };
    add_check(res, "global_avg_pool2d", nn::finite_diff_check(ps, loss, backward), 1e-4);
  }

  {  // leaky relu (inputs away from the kink)
    nn::ParameterSet ps;
    nn::Param& x = ps.add("x", {3, 3});
    x.value = random_mat_kink_safe(rng, 3, 3, 1.0);
    const Mat proj = random_mat(rng, 3, 3, 1.0);
    const auto loss = [&]() {
      return nn::leaky_relu(x.value, 0.3).cwiseProduct(proj).sum();
    };
    const auto backward = [&]() {
      ps.zero_grads();
      x.grad = nn::leaky_relu_backward(proj, x.value, 0.3);
    };
    add_check(res, "leaky_relu", nn::finite_diff_check(ps, loss, backward), 1e-4);
  }

  {  // sigmoid
    nn::ParameterSet ps;
    nn::Param& x = ps.add("x", {3, 3});
    x.value = random_mat(rng, 3, 3, 1.5);
    const Mat proj = random_mat(rng, 3, 3, 1.0);
    const auto loss = [&]() { return nn::sigmoid(x.value).cwiseProduct(proj).sum(); };
    const auto backward = [&]() {
      ps.zero_grads();
      x.grad = nn::sigmoid_backward(proj, nn::sigmoid(x.value));
    };
    add_check(res, "sigmoid", nn::finite_diff_check(ps, loss, backward), 1e-4);
  }

  for (const bool reverse : {false, true}) {  // lstm, T=5, hidden=4
    nn::ParameterSet ps;
    nn::Param& x = ps.add("x", {5, 3});
    nn::Param& Wx = ps.add("Wx", {3, 16});
    nn::Param& Wh = ps.add("Wh", {4, 16});
    nn::Param& b = ps.add("b", {16});
    x.value = random_mat(rng, 5, 3, 1.0);
    Wx.value = random_mat(rng, 3, 16, 0.4);
    Wh.value = random_mat(rng, 4, 16, 0.4);
    b.value = random_mat(rng, 16, 1, 0.2);
    const Mat proj = random_mat(rng, 5, 4, 1.0);
    const auto loss = [&]() {
      return nn::lstm_forward(x.value, Wx.value, Wh.value, b.value.col(0), reverse,
                              nullptr)
          .cwiseProduct(proj)
          .sum();
    };
    const auto backward = [&]() {
      ps.zero_grads();
      nn::LstmCache c;
      nn::lstm_forward(x.value, Wx.value, Wh.value, b.value.col(0), reverse, &c);
      x.grad = nn::lstm_backward(proj, c, Wx.value, Wh.value, Wx.grad, Wh.grad, b.grad);
    };
    add_check(res, reverse ? "lstm_reverse" : "lstm_forward",
              nn::finite_diff_check(ps, loss, backward), 1e-4);
  }

  {  // blstm, T=4
    nn::ParameterSet ps;
    nn::Param& x = ps.add("x", {4, 3});
    nn::Param& Wxf = ps.add("Wxf", {3, 12});
    nn::Param& Whf = ps.add("Whf", {3, 12});
    nn::Param& bf = ps.add("bf", {12});
    nn::Param& Wxr = ps.add("Wxr", {3, 12});
    nn::Param& Whr = ps.add("Whr", {3, 12});
    nn::Param& br = ps.add("br", {12});
    x.value = random_mat(rng, 4, 3, 1.0);
    Wxf.value = random_mat(rng, 3, 12, 0.4);
    Whf.value = random_mat(rng, 3, 12, 0.4);
    bf.value = random_mat(rng, 12, 1, 0.2);
    Wxr.value = random_mat(rng, 3, 12, 0.4);
    Whr.value = random_mat(rng, 3, 12, 0.4);
    br.value = random_mat(rng, 12, 1, 0.2);
    const Mat proj = random_mat(rng, 4, 6, 1.0);
    const auto loss = [&]() {
      return nn::blstm_forward(x.value, Wxf.value, Whf.value, bf.value.col(0), Wxr.value,
                               Whr.value, br.value.col(0), nullptr)
          .cwiseProduct(proj)
          .sum();
    };
    const auto backward = [&]() {
      ps.zero_grads();
      nn::BlstmCache c;
      nn::blstm_forward(x.value, Wxf.value, Whf.value, bf.value.col(0), Wxr.value,
                        Whr.value, br.value.col(0), &c);
      x.grad = nn::blstm_backward(proj, c, Wxf.value, Whf.value, Wxr.value, Whr.value,
                                  Wxf.grad, Whf.grad, bf.grad, Wxr.grad, Whr.grad,
                                  br.grad);
    };
    add_check(res, "blstm", nn::finite_diff_check(ps, loss, backward), 1e-4);
  }

  {  // mse
    nn::ParameterSet ps;
    nn::Param& pred = ps.add("pred", {3, 4});
    pred.value = random_mat(rng, 3, 4, 1.0);
    const Mat target = random_mat(rng, 3, 4, 1.0);
    const auto loss = [&]() { return nn::mse_loss(pred.value, target); };
    const auto backward = [&]() {
      ps.zero_grads();
      nn::mse_loss(pred.value, target, &pred.grad);
    };
    add_check(res, "mse_loss", nn::finite_diff_check(ps, loss, backward), 1e-6);
  }

  {  // full desk quality net, spectral normalization active with fixed sigmas
    QualityNetConfig qcfg = QualityNetConfig::desk();
    QualityNetModel q = QualityNetModel::build(qcfg, 7);
    Rng in_rng(99);
    Mat deg = random_mat(in_rng, 9, 12, 0.5).cwiseAbs();
    Mat clean = random_mat(in_rng, 9, 12, 0.5).cwiseAbs();
    const nn::SigmaMap sigmas = nn::resolve_sigmas(q.params(), false);
    const auto loss = [&]() { return q.forward(deg, clean, &sigmas, nullptr); };
    const auto backward = [&]() {
      q.params().zero_grads();
      QualityNetModel::Cache c;
      q.forward(deg, clean, &sigmas, &c);
      q.backward(1.0, c, &sigmas, &q.params());
      nn::apply_sigma_to_grads(q.params(), sigmas);
    };
    add_check(res, "quality_net_desk", nn::finite_diff_check(q.params(), loss, backward),
              1e-4);
  }

  {  // full desk enhancer through the masking MSE loss
    EnhancerConfig ecfg = EnhancerConfig::desk();
    EnhancerModel g = EnhancerModel::build(ecfg, 11);
    Rng in_rng(101);
    const Mat noisy = random_mat(in_rng, 6, ecfg.out_bins, 0.5).cwiseAbs();
    const Mat target = random_mat(in_rng, 6, ecfg.out_bins, 0.5).cwiseAbs();
    const auto loss = [&]() {
      return nn::mse_loss(noisy.cwiseProduct(g.mask(noisy)), target);
    };
    const auto backward = [&]() {
      g.params().zero_grads();
      EnhancerModel::Cache c;
      const Mat mask = g.forward(noisy, &c);
      Mat g_enh;
      nn::mse_loss(noisy.cwiseProduct(mask), target, &g_enh);
      g.backward(g_enh.cwiseProduct(noisy), c);
    };
    add_check(res, "enhancer_desk", nn::finite_diff_check(g.params(), loss, backward),
              1e-4);
  }

  {  // surrogate loss through a frozen quality net into the enhancer
    QualityNetModel q = QualityNetModel::build(QualityNetConfig::desk(), 13);
    q.freeze();
    EnhancerConfig ecfg = EnhancerConfig::desk();
    EnhancerModel g = EnhancerModel::build(ecfg, 17);
    Rng in_rng(103);
    const Mat noisy = random_mat(in_rng, 8, ecfg.out_bins, 0.5).cwiseAbs();
    const Mat clean = random_mat(in_rng, 8, ecfg.out_bins, 0.5).cwiseAbs();
    const auto loss = [&]() {
      const double s = q.predict(noisy.cwiseProduct(g.mask(noisy)), clean);
      return (1.0 - s) * (1.0 - s);
    };
    const auto backward = [&]() {
      g.params().zero_grads();
      EnhancerModel::Cache gc;
      const Mat mask = g.forward(noisy, &gc);
      const Mat enhanced = noisy.cwiseProduct(mask);
      QualityNetModel::Cache qc;
      const double s = q.forward(enhanced, clean, nullptr, &qc);
      Mat g_enh;
      q.backward(-2.0 * (1.0 - s), qc, nullptr, nullptr, &g_enh);
      g.backward(g_enh.cwiseProduct(noisy), gc);
    };
    add_check(res, "surrogate_loss_path",
              nn::finite_diff_check(g.params(), loss, backward, 1e-5, 25, 5), 1e-4);
  }

  return res;
}

}  // namespace qnse

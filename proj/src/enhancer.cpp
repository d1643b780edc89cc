// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "qnse/enhancer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "qnse/metrics.hpp"

namespace qnse {

EnhancerConfig EnhancerConfig::paper() {
  EnhancerConfig c;
  c.blstm_layers = 2;
  c.hidden = 200;
  c.fc_hidden = 300;
  c.out_bins = 257;
  return c;
}

EnhancerConfig EnhancerConfig::desk() { return EnhancerConfig{}; }

void EnhancerConfig::validate() const {
  if (blstm_layers <= 0 || hidden <= 0 || fc_hidden <= 0 || out_bins <= 0)
    throw ConfigError("enhancer: nonpositive layer size");
  if (leaky_slope <= 0.0 || leaky_slope >= 1.0)
    throw ConfigError("enhancer: leaky slope must be in (0,1)");
}

namespace {

std::string lname(int l, const char* dir, const char* what) {
  return "blstm" + std::to_string(l + 1) + "." + dir + "." + what;
}

void init_lstm_dir(nn::ParameterSet& params, const std::string& base_tag, int l,
                   const char* dir, int in, int hidden, uint64_t seed) {
  nn::Param& Wx = params.add(lname(l, dir, "Wx"), {in, 4 * hidden});
  nn::Param& Wh = params.add(lname(l, dir, "Wh"), {hidden, 4 * hidden});
  nn::Param& b = params.add(lname(l, dir, "b"), {4 * hidden});
  Rng rx(derive_seed(seed, base_tag + lname(l, dir, "Wx")));
  nn::init_uniform(Wx, rx, 0.08);
  Rng rh(derive_seed(seed, base_tag + lname(l, dir, "Wh")));
  nn::init_uniform(Wh, rh, 0.08);
  // Forget-gate bias starts at +1 to keep early BPTT stable.
  for (int j = 0; j < hidden; ++j) b.value(hidden + j, 0) = 1.0;
}

}  // namespace

EnhancerModel EnhancerModel::build(const EnhancerConfig& cfg, uint64_t seed) {
  cfg.validate();
  EnhancerModel m;
  m.cfg_ = cfg;

  int in = cfg.out_bins;
  for (int l = 0; l < cfg.blstm_layers; ++l) {
    init_lstm_dir(m.params_, "enh/", l, "f", in, cfg.hidden, seed);
    init_lstm_dir(m.params_, "enh/", l, "r", in, cfg.hidden, seed);
    in = 2 * cfg.hidden;
  }
  nn::Param& W1 = m.params_.add("fc1.W", {in, cfg.fc_hidden});
  Rng r1(derive_seed(seed, "enh/fc1.W"));
  nn::init_glorot(W1, r1, in, cfg.fc_hidden);
  m.params_.add("fc1.b", {cfg.fc_hidden});
  nn::Param& W2 = m.params_.add("fc2.W", {cfg.fc_hidden, cfg.out_bins});
  Rng r2(derive_seed(seed, "enh/fc2.W"));
  nn::init_glorot(W2, r2, cfg.fc_hidden, cfg.out_bins);
  m.params_.add("fc2.b", {cfg.out_bins});
  return m;
}

Mat EnhancerModel::forward(const Mat& noisy, Cache* cache) const {
  if (noisy.cols() != cfg_.out_bins)
    throw std::invalid_argument("enhancer: expected " + std::to_string(cfg_.out_bins) +
                                " bins, got " + std::to_string(noisy.cols()));
  if (cache) cache->blstm.resize(cfg_.blstm_layers);

  Mat h = noisy;
  for (int l = 0; l < cfg_.blstm_layers; ++l) {
    h = nn::blstm_forward(h, params_.at(lname(l, "f", "Wx")).value,
                          params_.at(lname(l, "f", "Wh")).value,
                          params_.at(lname(l, "f", "b")).value.col(0),
                          params_.at(lname(l, "r", "Wx")).value,
                          params_.at(lname(l, "r", "Wh")).value,
                          params_.at(lname(l, "r", "b")).value.col(0),
                          cache ? &cache->blstm[l] : nullptr);
  }
  Mat z1 = nn::dense_forward(h, params_.at("fc1.W").value,
                             params_.at("fc1.b").value.col(0),
                             cache ? &cache->fc1 : nullptr);
  Mat a1 = nn::leaky_relu(z1, cfg_.leaky_slope);
  Mat z2 = nn::dense_forward(a1, params_.at("fc2.W").value,
                             params_.at("fc2.b").value.col(0),
                             cache ? &cache->fc2 : nullptr);
  Mat mask = nn::sigmoid(z2);
  if (cache) {
    cache->fc1_z = std::move(z1);
    cache->mask = mask;
  }
  return mask;
}

Mat EnhancerModel::backward(const Mat& gmask, const Cache& cache) {
  Mat g = nn::sigmoid_backward(gmask, cache.mask);
  g = nn::dense_backward(g, cache.fc2, params_.at("fc2.W").value,
                         params_.at("fc2.W").grad, params_.at("fc2.b").grad);
  g = nn::leaky_relu_backward(g, cache.fc1_z, cfg_.leaky_slope);
  g = nn::dense_backward(g, cache.fc1, params_.at("fc1.W").value,
                         params_.at("fc1.W").grad, params_.at("fc1.b").grad);
  for (int l = cfg_.blstm_layers - 1; l >= 0; --l) {
    g = nn::blstm_backward(
        g, cache.blstm[l], params_.at(lname(l, "f", "Wx")).value,
        params_.at(lname(l, "f", "Wh")).value, params_.at(lname(l, "r", "Wx")).value,
        params_.at(lname(l, "r", "Wh")).value, params_.at(lname(l, "f", "Wx")).grad,
        params_.at(lname(l, "f", "Wh")).grad, params_.at(lname(l, "f", "b")).grad,
        params_.at(lname(l, "r", "Wx")).grad, params_.at(lname(l, "r", "Wh")).grad,
        params_.at(lname(l, "r", "b")).grad);
  }
  return g;
}

Mat EnhancerModel::mask(const Mat& noisy) const { return forward(noisy, nullptr); }

std::pair<Mat, Mat> EnhancerModel::enhance(const Mat& noisy) const {
  Mat m = mask(noisy);
  Mat enhanced = noisy.cwiseProduct(m);
  return {std::move(m), std::move(enhanced)};
}

void EnhancerModel::save(const std::string& path) const {
  nn::save_checkpoint(path, params_);
}

EnhancerModel EnhancerModel::load(const EnhancerConfig& cfg, const std::string& path) {
  EnhancerModel m = build(cfg, 0);
  nn::load_checkpoint_into(path, m.params_);
  return m;
}

TrainingHistory pretrain_mse(EnhancerModel& m, const std::vector<SpecPair>& train,
                             const std::vector<SpecPair>& val,
                             const PretrainHyper& hyper) {
  if (train.empty()) throw std::invalid_argument("pretrain_mse: empty dataset");

  nn::Rmsprop opt;
  opt.lr = hyper.lr;
  opt.rho = hyper.rho;
  opt.eps = hyper.eps;

  const auto val_mse = [&]() {
    if (val.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& pair : val) {
      const Mat enhanced = pair.noisy.cwiseProduct(m.mask(pair.noisy));
      acc += nn::mse_loss(enhanced, pair.clean);
    }
    return acc / static_cast<double>(val.size());
  };

  TrainingHistory history;
  double best_val = std::numeric_limits<double>::infinity();
  nn::ParameterSet::Snapshot best = m.params().snapshot();
  int since_best = 0;

  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const int batch = std::max(1, hyper.accum_batch);

  for (int epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(hyper.seed, "pretrain/epoch" + std::to_string(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    double train_acc = 0.0;
    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t stop = std::min(order.size(), start + batch);
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      for (size_t i = start; i < stop; ++i) {
        const SpecPair& pair = train[order[i]];
        EnhancerModel::Cache cache;
        const Mat mask = m.forward(pair.noisy, &cache);
        const Mat enhanced = pair.noisy.cwiseProduct(mask);
        Mat g_enh;
        const double loss = nn::mse_loss(enhanced, pair.clean, &g_enh);
        if (!std::isfinite(loss))
          throw std::runtime_error("pretrain_mse: non-finite loss, aborting");
        train_acc += loss;
        const Mat gmask = inv_b * g_enh.cwiseProduct(pair.noisy);
        m.backward(gmask, cache);
      }
      opt.step(m.params());
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_mse = train_acc / static_cast<double>(train.size());
    stats.val_mse = val_mse();
    history.push_back(stats);

    const double watched = val.empty() ? stats.train_mse : stats.val_mse;
    if (watched < best_val) {
      best_val = watched;
      best = m.params().snapshot();
      since_best = 0;
    } else if (++since_best > hyper.patience) {
      break;
    }
  }
  m.params().restore(best);
  return history;
}

FinetuneResult finetune_quality_net_loss(EnhancerModel& m, const QualityNetModel& q,
                                         const std::vector<SpecPair>& train,
                                         const std::vector<FinetuneValItem>& val,
                                         const StftConfig& cfg,
                                         const FinetuneHyper& hyper) {
  if (!q.frozen())
    throw std::invalid_argument(
        "finetune_quality_net_loss: surrogate must be frozen before fine-tuning");
  if (train.empty())
    throw std::invalid_argument("finetune_quality_net_loss: empty dataset");

  nn::Rmsprop opt;
  opt.lr = hyper.lr;
  opt.rho = hyper.rho;
  opt.eps = hyper.eps;

  // Per-iteration scoring on the fixed validation subset; deterministic
  // ordering, means over utterances.
  const auto eval_val = [&](FoolingPoint& point) {
    if (val.empty()) return;
    double pred = 0.0, tq = 0.0, ti = 0.0, loss = 0.0;
    for (const auto& item : val) {
      const Mat enhanced = item.noisy_mag.cwiseProduct(m.mask(item.noisy_mag));
      const double score = q.predict(enhanced, item.clean_mag);
      pred += score;
      loss += (1.0 - score) * (1.0 - score);
      MagnitudeSpectrogram ms;
      ms.values = enhanced;
      ms.config = cfg;
      const Waveform recon =
          reconstruct(ms, item.phase, cfg, item.clean_trim.sample_rate_hz);
      tq += normalize_score(proxy_quality(recon, item.clean_trim, cfg));
      ti += proxy_intelligibility(recon, item.clean_trim, cfg).value;
    }
    const double n = static_cast<double>(val.size());
    point.predicted_mean = pred / n;
    point.true_quality_mean = tq / n;
    point.intelligibility_mean = ti / n;
    if (point.iteration == 0) point.loss = loss / n;
  };

  FinetuneResult result;
  FoolingPoint base;
  base.iteration = 0;
  eval_val(base);
  result.trace.push_back(base);

  nn::ParameterSet::Snapshot best = m.params().snapshot();
  double best_tq = base.true_quality_mean;
  long best_iter = 0;
  long since_best = 0;

  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();  // force an initial shuffle
  long pass = 0;

  const int batch = std::max(1, hyper.accum_batch);
  for (long iter = 1; iter <= hyper.iterations; ++iter) {
    double loss_acc = 0.0;
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (int b = 0; b < batch; ++b) {
      if (cursor >= order.size()) {
        Rng shuffle_rng(derive_seed(hyper.seed, "finetune/pass" + std::to_string(pass++)));
        for (size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        cursor = 0;
      }
      const SpecPair& pair = train[order[cursor++]];

      EnhancerModel::Cache gcache;
      const Mat mask = m.forward(pair.noisy, &gcache);
      const Mat enhanced = pair.noisy.cwiseProduct(mask);

      QualityNetModel::Cache qcache;
      const double score = q.forward(enhanced, pair.clean, nullptr, &qcache);
      if (!std::isfinite(score))
        throw std::runtime_error("finetune_quality_net_loss: non-finite score");
      loss_acc += (1.0 - score) * (1.0 - score);

      Mat g_enh;
      q.backward(-2.0 * (1.0 - score) * inv_b, qcache, nullptr,
                 /*grad_sink=*/nullptr, &g_enh);
      const Mat gmask = g_enh.cwiseProduct(pair.noisy);
      m.backward(gmask, gcache);
    }
    opt.step(m.params());

    if (iter % std::max<long>(1, hyper.log_every) == 0 || iter == hyper.iterations) {
      FoolingPoint point;
      point.iteration = iter;
      point.loss = loss_acc * inv_b;
      eval_val(point);
      result.trace.push_back(point);

      if (point.true_quality_mean > best_tq) {
        best_tq = point.true_quality_mean;
        best = m.params().snapshot();
        best_iter = iter;
        since_best = 0;
      } else {
        since_best = iter - best_iter;
      }
      if (hyper.patience > 0 && since_best >= hyper.patience) break;
    }
  }

  m.params().restore(best);
  result.best_iteration = best_iter;
  result.best_true_quality = best_tq;
  return result;
}

}  // namespace qnse

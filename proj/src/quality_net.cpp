// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "qnse/quality_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace qnse {

QualityNetConfig QualityNetConfig::paper() {
  QualityNetConfig c;
  c.conv = {{15, 5, 5}, {25, 7, 7}, {40, 9, 9}, {50, 11, 11}};
  c.fc = {50, 10, 1};
  return c;
}

QualityNetConfig QualityNetConfig::desk() {
  QualityNetConfig c;
  c.conv = {{4, 3, 3}, {8, 3, 3}, {12, 5, 5}, {16, 5, 5}};
  c.fc = {16, 8, 1};
  return c;
}

void QualityNetConfig::validate() const {
  if (conv.empty() || fc.empty()) throw ConfigError("quality net: empty layer list");
  if (fc.back() != 1) throw ConfigError("quality net: final FC width must be 1");
  for (const auto& s : conv) {
    if (s.filters <= 0) throw ConfigError("quality net: nonpositive filter count");
    if (s.kh % 2 == 0 || s.kw % 2 == 0)
      throw ConfigError("quality net: kernel extents must be odd");
  }
  for (int w : fc)
    if (w <= 0) throw ConfigError("quality net: nonpositive FC width");
  if (leaky_slope <= 0.0 || leaky_slope >= 1.0)
    throw ConfigError("quality net: leaky slope must be in (0,1)");
}

namespace {

std::string conv_w(int l) { return "conv" + std::to_string(l + 1) + ".W"; }
std::string conv_b(int l) { return "conv" + std::to_string(l + 1) + ".b"; }
std::string fc_w(int l) { return "fc" + std::to_string(l + 1) + ".W"; }
std::string fc_b(int l) { return "fc" + std::to_string(l + 1) + ".b"; }

}  // namespace

QualityNetModel QualityNetModel::build(const QualityNetConfig& cfg, uint64_t seed) {
  cfg.validate();
  QualityNetModel m;
  m.cfg_ = cfg;

  int in_ch = 2;  // [degraded; clean] channel stack
  for (size_t l = 0; l < cfg.conv.size(); ++l) {
    const auto& s = cfg.conv[l];
    nn::Param& W = m.params_.add(conv_w(static_cast<int>(l)),
                                 {s.filters, in_ch, s.kh, s.kw}, cfg.spectral_norm);
    Rng rw(derive_seed(seed, "qnet/" + conv_w(static_cast<int>(l))));
    init_glorot(W, rw, in_ch * s.kh * s.kw, s.filters * s.kh * s.kw);
    if (cfg.spectral_norm) {
      Rng ru(derive_seed(seed, "qnet/" + conv_w(static_cast<int>(l)) + "/u"));
      for (Index i = 0; i < W.u.size(); ++i) W.u[i] = ru.normal();
      W.u.normalize();
    }
    m.params_.add(conv_b(static_cast<int>(l)), {s.filters});
    in_ch = s.filters;
  }

  int in_w = in_ch;  // pooled feature width = filters of the last conv layer
  for (size_t l = 0; l < cfg.fc.size(); ++l) {
    const int out_w = cfg.fc[l];
    nn::Param& W =
        m.params_.add(fc_w(static_cast<int>(l)), {in_w, out_w}, cfg.spectral_norm);
    Rng rw(derive_seed(seed, "qnet/" + fc_w(static_cast<int>(l))));
    init_glorot(W, rw, in_w, out_w);
    if (cfg.spectral_norm) {
      Rng ru(derive_seed(seed, "qnet/" + fc_w(static_cast<int>(l)) + "/u"));
      for (Index i = 0; i < W.u.size(); ++i) W.u[i] = ru.normal();
      W.u.normalize();
    }
    m.params_.add(fc_b(static_cast<int>(l)), {out_w});
    in_w = out_w;
  }
  return m;
}

Mat QualityNetModel::effective(const std::string& name, const nn::SigmaMap* sigmas) const {
  const nn::Param& p = params_.at(name);
  if (!sigmas || !p.spectral) return p.value;
  const double sigma = sigmas->at(name);
  if (sigma <= 1e-12 || sigma == 1.0) return p.value;
  return p.value / sigma;
}

double QualityNetModel::forward(const Mat& degraded, const Mat& clean,
                                const nn::SigmaMap* sigmas, Cache* cache) const {
  if (degraded.rows() != clean.rows() || degraded.cols() != clean.cols())
    throw std::invalid_argument("quality net: degraded/clean shape mismatch");
  int max_k = 0;
  for (const auto& s : cfg_.conv) max_k = std::max({max_k, s.kh, s.kw});
  if (degraded.rows() < max_k)
    throw std::invalid_argument("quality net: too few frames for the kernel extents");

  std::vector<Mat> h(2);
  if (cfg_.log_compress) {
    h[0] = degraded.unaryExpr([](double v) { return std::log1p(v); });
    h[1] = clean.unaryExpr([](double v) { return std::log1p(v); });
  } else {
    h[0] = degraded;
    h[1] = clean;
  }
  if (cache) {
    cache->input = h;
    cache->conv.resize(cfg_.conv.size());
    cache->conv_z.resize(cfg_.conv.size());
    cache->fc.resize(cfg_.fc.size());
    cache->fc_z.resize(cfg_.fc.size());
    cache->T = degraded.rows();
    cache->F = degraded.cols();
  }

  for (size_t l = 0; l < cfg_.conv.size(); ++l) {
    const auto& s = cfg_.conv[l];
    const Mat W = effective(conv_w(static_cast<int>(l)), sigmas);
    const Vec b = params_.at(conv_b(static_cast<int>(l))).value.col(0);
    std::vector<Mat> z = nn::conv2d_forward(h, W, b, s.kh, s.kw,
                                            cache ? &cache->conv[l] : nullptr);
    if (cache) cache->conv_z[l] = z;
    h.resize(z.size());
    for (size_t k = 0; k < z.size(); ++k) h[k] = nn::leaky_relu(z[k], cfg_.leaky_slope);
  }

  const Vec pooled = nn::global_avg_pool2d(h);
  Mat a = pooled.transpose();  // 1 x K row
  for (size_t l = 0; l < cfg_.fc.size(); ++l) {
    const Mat W = effective(fc_w(static_cast<int>(l)), sigmas);
    const Vec b = params_.at(fc_b(static_cast<int>(l))).value.col(0);
    Mat z = nn::dense_forward(a, W, b, cache ? &cache->fc[l] : nullptr);
    if (cache) cache->fc_z[l] = z;
    a = (l + 1 < cfg_.fc.size()) ? nn::leaky_relu(z, cfg_.leaky_slope) : z;
  }
  return a(0, 0);
}

void QualityNetModel::backward(double dscore, const Cache& cache,
                               const nn::SigmaMap* sigmas, nn::ParameterSet* grad_sink,
                               Mat* g_degraded, Mat* g_clean) const {
  Mat gy(1, 1);
  gy(0, 0) = dscore;

  // FC head, last layer is linear.
  for (int l = static_cast<int>(cfg_.fc.size()) - 1; l >= 0; --l) {
    if (l + 1 < static_cast<int>(cfg_.fc.size()))
      gy = nn::leaky_relu_backward(gy, cache.fc_z[l], cfg_.leaky_slope);
    const Mat W = effective(fc_w(l), sigmas);
    Mat scratch_w, scratch_b;
    if (!grad_sink) {
      scratch_w = Mat::Zero(W.rows(), W.cols());
      scratch_b = Mat::Zero(W.cols(), 1);
    }
    Mat& gW = grad_sink ? grad_sink->at(fc_w(l)).grad : scratch_w;
    Mat& gb = grad_sink ? grad_sink->at(fc_b(l)).grad : scratch_b;
    gy = nn::dense_backward(gy, cache.fc[l], W, gW, gb);
  }

  const int last = static_cast<int>(cfg_.conv.size()) - 1;
  std::vector<Mat> gch = nn::global_avg_pool2d_backward(
      gy.row(0).transpose(), cfg_.conv[last].filters, cache.T, cache.F);

  for (int l = last; l >= 0; --l) {
    for (size_t k = 0; k < gch.size(); ++k)
      gch[k] = nn::leaky_relu_backward(gch[k], cache.conv_z[l][k], cfg_.leaky_slope);
    const Mat W = effective(conv_w(l), sigmas);
    Mat scratch_w, scratch_b;
    if (!grad_sink) {
      scratch_w = Mat::Zero(W.rows(), W.cols());
      scratch_b = Mat::Zero(W.rows(), 1);
    }
    Mat& gW = grad_sink ? grad_sink->at(conv_w(l)).grad : scratch_w;
    Mat& gb = grad_sink ? grad_sink->at(conv_b(l)).grad : scratch_b;
    gch = nn::conv2d_backward(gch, cache.conv[l], W, gW, gb);
  }

  if (g_degraded || g_clean) {
    // Chain through the optional log(1+x) compression.
    const auto finish = [&](int ch, Mat* out) {
      if (!out) return;
      if (cfg_.log_compress) {
        // input cache holds log1p(x); d log1p(x)/dx = exp(-log1p(x)).
        *out = gch[ch].binaryExpr(cache.input[ch], [](double g, double lx) {
          return g * std::exp(-lx);
        });
      } else {
        *out = gch[ch];
      }
    };
    finish(0, g_degraded);
    finish(1, g_clean);
  }
}

double QualityNetModel::predict(const Mat& degraded, const Mat& clean) const {
  if (frozen_ || !cfg_.spectral_norm) return forward(degraded, clean, nullptr, nullptr);
  const nn::SigmaMap sigmas = nn::resolve_sigmas(params_, nullptr);
  return forward(degraded, clean, &sigmas, nullptr);
}

void QualityNetModel::freeze() {
  if (frozen_) return;
  for (auto& [name, p] : params_.items()) {
    if (!p.spectral) continue;
    Vec u = p.u;
    double sigma = 1e-12;
    for (int i = 0; i < 100; ++i) sigma = nn::spectral_norm_step(p.value, u);
    if (sigma > 1e-12) p.value /= sigma;
    p.spectral = false;
    p.u.resize(0);
  }
  frozen_ = true;
}

void QualityNetModel::save(const std::string& path) const {
  nn::ParameterSet out = params_;
  nn::Param& meta = out.add("meta.frozen", {1});
  meta.value(0, 0) = frozen_ ? 1.0 : 0.0;
  nn::save_checkpoint(path, out);
}

QualityNetModel QualityNetModel::load(const QualityNetConfig& cfg,
                                      const std::string& path) {
  nn::ParameterSet raw = nn::load_checkpoint(path);
  const bool frozen =
      raw.contains("meta.frozen") && raw.at("meta.frozen").value(0, 0) != 0.0;

  QualityNetConfig build_cfg = cfg;
  if (frozen) build_cfg.spectral_norm = false;  // normalization already baked in
  QualityNetModel m = build(build_cfg, 0);
  m.cfg_ = cfg;
  m.cfg_.spectral_norm = build_cfg.spectral_norm;
  for (auto& [name, p] : m.params_.items()) {
    const nn::Param& q = raw.at(name);
    if (q.shape != p.shape) throw IoError(path + ": shape mismatch for " + name);
    p.value = q.value;
    if (p.spectral) {
      if (!q.spectral) throw IoError(path + ": missing u for " + name);
      p.u = q.u;
    }
  }
  m.frozen_ = frozen;
  return m;
}

TrainingHistory qnet_train(QualityNetModel& m, const std::vector<LabeledPair>& train,
                           const std::vector<LabeledPair>& val, const QnetHyper& hyper) {
  if (train.empty()) throw std::invalid_argument("qnet_train: empty training set");
  if (m.frozen()) throw std::invalid_argument("qnet_train: model is frozen");

  nn::Rmsprop opt;
  opt.lr = hyper.lr;
  opt.rho = hyper.rho;
  opt.eps = hyper.eps;

  const auto val_mse = [&]() {
    if (val.empty()) return 0.0;
    const nn::SigmaMap sigmas = nn::resolve_sigmas(m.params(), nullptr);
    double acc = 0.0;
    for (const auto& pair : val) {
      const double pred = m.forward(pair.degraded, pair.clean, &sigmas, nullptr);
      acc += (pred - pair.target) * (pred - pair.target);
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
    Rng shuffle_rng(derive_seed(hyper.seed, "qnet/epoch" + std::to_string(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    double train_acc = 0.0;
    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t stop = std::min(order.size(), start + batch);
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      const nn::SigmaMap sigmas = nn::resolve_sigmas(m.params(), true);
      for (size_t i = start; i < stop; ++i) {
        const LabeledPair& pair = train[order[i]];
        QualityNetModel::Cache cache;
        const double pred = m.forward(pair.degraded, pair.clean, &sigmas, &cache);
        const double err = pred - pair.target;
        if (!std::isfinite(err))
          throw std::runtime_error("qnet_train: non-finite loss, aborting");
        train_acc += err * err;
        m.backward(2.0 * err * inv_b, cache, &sigmas, &m.params());
      }
      nn::apply_sigma_to_grads(m.params(), sigmas);
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

}  // namespace qnse

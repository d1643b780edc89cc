// Copyright 2026 the qnse authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "qnse/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace qnse::nn {

namespace {

long shape_size(const std::vector<int>& shape) {
  long n = 1;
  for (int e : shape) n *= e;
  return n;
}

std::pair<Index, Index> realized_dims(const std::vector<int>& shape) {
  if (shape.empty()) throw std::invalid_argument("empty parameter shape");
  long rest = 1;
  for (size_t i = 1; i < shape.size(); ++i) rest *= shape[i];
  return {shape[0], std::max<long>(rest, 1)};
}

}  // namespace

Param& ParameterSet::add(const std::string& name, const std::vector<int>& shape,
                         bool spectral) {
  if (items_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  for (int e : shape)
    if (e <= 0) throw std::invalid_argument("nonpositive extent in " + name);
  Param p;
  p.shape = shape;
  const auto [r, c] = realized_dims(shape);
  p.value = Mat::Zero(r, c);
  p.grad = Mat::Zero(r, c);
  p.spectral = spectral;
  if (spectral) p.u = Vec::Zero(r);
  return items_.emplace(name, std::move(p)).first->second;
}

Param& ParameterSet::at(const std::string& name) {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::invalid_argument("no parameter: " + name);
  return it->second;
}

const Param& ParameterSet::at(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw std::invalid_argument("no parameter: " + name);
  return it->second;
}

void ParameterSet::zero_grads() {
  for (auto& [name, p] : items_) p.grad.setZero();
}

long ParameterSet::total_size() const {
  long n = 0;
  for (const auto& [name, p] : items_) n += shape_size(p.shape);
  return n;
}

bool ParameterSet::bitwise_equal(const ParameterSet& other) const {
  if (items_.size() != other.items_.size()) return false;
  for (const auto& [name, p] : items_) {
    auto it = other.items_.find(name);
    if (it == other.items_.end()) return false;
    const Param& q = it->second;
    if (p.shape != q.shape) return false;
    if (std::memcmp(p.value.data(), q.value.data(),
                    sizeof(double) * p.value.size()) != 0)
      return false;
  }
  return true;
}

ParameterSet::Snapshot ParameterSet::snapshot() const {
  Snapshot snap;
  for (const auto& [name, p] : items_) {
    snap.values.emplace(name, p.value);
    if (p.spectral) snap.us.emplace(name, p.u);
  }
  return snap;
}

void ParameterSet::restore(const Snapshot& snap) {
  for (const auto& [name, v] : snap.values) at(name).value = v;
  for (const auto& [name, u] : snap.us) at(name).u = u;
}

void init_glorot(Param& p, Rng& rng, int fan_in, int fan_out) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (Index i = 0; i < p.value.rows(); ++i)
    for (Index j = 0; j < p.value.cols(); ++j)
      p.value(i, j) = rng.uniform(-bound, bound);
}

void init_uniform(Param& p, Rng& rng, double bound) {
  for (Index i = 0; i < p.value.rows(); ++i)
    for (Index j = 0; j < p.value.cols(); ++j)
      p.value(i, j) = rng.uniform(-bound, bound);
}

// ---- dense ----------------------------------------------------------------

Mat dense_forward(const Mat& x, const Mat& W, const Vec& b, DenseCache* cache) {
  if (x.cols() != W.rows() || W.cols() != b.size())
    throw std::invalid_argument("dense: shape mismatch");
  if (cache) cache->x = x;
  Mat y = x * W;
  y.rowwise() += b.transpose();
  return y;
}

Mat dense_backward(const Mat& gy, const DenseCache& cache, const Mat& W, Mat& gW,
                   Mat& gb) {
  gW.noalias() += cache.x.transpose() * gy;
  gb.col(0).noalias() += gy.colwise().sum().transpose();
  return gy * W.transpose();
}

// ---- conv2d ----------------------------------------------------------------

namespace {

// (T*F) x (C*kh*kw) patch matrix with "same" zero padding.
Mat im2col(const std::vector<Mat>& x, int kh, int kw) {
  const int C = static_cast<int>(x.size());
  const Index T = x[0].rows(), F = x[0].cols();
  const int ph = kh / 2, pw = kw / 2;
  Mat cols = Mat::Zero(T * F, static_cast<Index>(C) * kh * kw);
  for (Index t = 0; t < T; ++t)
    for (Index f = 0; f < F; ++f) {
      const Index p = t * F + f;
      Index idx = 0;
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < kh; ++i) {
          const Index ti = t + i - ph;
          if (ti < 0 || ti >= T) {
            idx += kw;
            continue;
          }
          for (int j = 0; j < kw; ++j, ++idx) {
            const Index fj = f + j - pw;
            if (fj >= 0 && fj < F) cols(p, idx) = x[c](ti, fj);
          }
          // idx already advanced by kw in the inner loop
        }
    }
  return cols;
}

std::vector<Mat> col2im(const Mat& gcols, int C, int kh, int kw, Index T, Index F) {
  const int ph = kh / 2, pw = kw / 2;
  std::vector<Mat> gx(C, Mat::Zero(T, F));
  for (Index t = 0; t < T; ++t)
    for (Index f = 0; f < F; ++f) {
      const Index p = t * F + f;
      Index idx = 0;
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < kh; ++i) {
          const Index ti = t + i - ph;
          if (ti < 0 || ti >= T) {
            idx += kw;
            continue;
          }
          for (int j = 0; j < kw; ++j, ++idx) {
            const Index fj = f + j - pw;
            if (fj >= 0 && fj < F) gx[c](ti, fj) += gcols(p, idx);
          }
        }
    }
  return gx;
}

}  // namespace

std::vector<Mat> conv2d_forward(const std::vector<Mat>& x, const Mat& W, const Vec& bias,
                                int kh, int kw, Conv2dCache* cache) {
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ConfigError("conv2d kernel extents must be odd");
  if (x.empty()) throw std::invalid_argument("conv2d: no input channels");
  const int C = static_cast<int>(x.size());
  const int K = static_cast<int>(W.rows());
  const Index T = x[0].rows(), F = x[0].cols();
  if (W.cols() != static_cast<Index>(C) * kh * kw || bias.size() != K)
    throw std::invalid_argument("conv2d: kernel shape mismatch");

  Mat cols = im2col(x, kh, kw);
  Mat out = cols * W.transpose();  // (T*F) x K
  out.rowwise() += bias.transpose();

  std::vector<Mat> y(K);
  for (int k = 0; k < K; ++k) {
    y[k].resize(T, F);
    for (Index t = 0; t < T; ++t)
      for (Index f = 0; f < F; ++f) y[k](t, f) = out(t * F + f, k);
  }
  if (cache) {
    cache->C = C;
    cache->K = K;
    cache->kh = kh;
    cache->kw = kw;
    cache->T = T;
    cache->F = F;
    cache->cols = std::move(cols);
  }
  return y;
}

std::vector<Mat> conv2d_backward(const std::vector<Mat>& gy, const Conv2dCache& cache,
                                 const Mat& W, Mat& gW, Mat& gbias) {
  const Index T = cache.T, F = cache.F;
  Mat G(T * F, cache.K);
  for (int k = 0; k < cache.K; ++k)
    for (Index t = 0; t < T; ++t)
      for (Index f = 0; f < F; ++f) G(t * F + f, k) = gy[k](t, f);

  gW.noalias() += G.transpose() * cache.cols;
  gbias.col(0).noalias() += G.colwise().sum().transpose();
  const Mat gcols = G * W;
  return col2im(gcols, cache.C, cache.kh, cache.kw, T, F);
}

// ---- global average pooling --------------------------------------------------

Vec global_avg_pool2d(const std::vector<Mat>& x) {
  if (x.empty()) throw std::invalid_argument("global_avg_pool2d: no channels");
  Vec y(static_cast<Index>(x.size()));
  for (size_t k = 0; k < x.size(); ++k) y[static_cast<Index>(k)] = x[k].mean();
  return y;
}

std::vector<Mat> global_avg_pool2d_backward(const Vec& gy, int K, Index T, Index F) {
  std::vector<Mat> gx(K);
  const double scale = 1.0 / static_cast<double>(T * F);
  for (int k = 0; k < K; ++k) gx[k] = Mat::Constant(T, F, gy[k] * scale);
  return gx;
}

// ---- activations --------------------------------------------------------------

Mat leaky_relu(const Mat& x, double slope) {
  return x.unaryExpr([slope](double v) { return v >= 0.0 ? v : slope * v; });
}

Mat leaky_relu_backward(const Mat& gy, const Mat& x, double slope) {
  return gy.binaryExpr(x, [slope](double g, double v) {
    return v >= 0.0 ? g : slope * g;  // subgradient slope 1 at 0
  });
}

Mat sigmoid(const Mat& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Mat sigmoid_backward(const Mat& gy, const Mat& y) {
  return gy.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
}

// ---- LSTM ----------------------------------------------------------------------

Mat lstm_forward(const Mat& x_in, const Mat& Wx, const Mat& Wh, const Vec& b,
                 bool reverse, LstmCache* cache) {
  const Index T = x_in.rows();
  const Index H4 = Wx.cols();
  if (H4 % 4 != 0 || Wh.cols() != H4 || b.size() != H4)
    throw std::invalid_argument("lstm: gate width must be 4*hidden");
  const Index H = H4 / 4;
  if (Wh.rows() != H || Wx.rows() != x_in.cols())
    throw std::invalid_argument("lstm: shape mismatch");

  Mat x = reverse ? Mat(x_in.colwise().reverse()) : x_in;
  Mat gi(T, H), gf(T, H), gg(T, H), go(T, H), c(T, H), tanh_c(T, H), h(T, H);

  Eigen::RowVectorXd h_prev = Eigen::RowVectorXd::Zero(H);
  Eigen::RowVectorXd c_prev = Eigen::RowVectorXd::Zero(H);
  for (Index t = 0; t < T; ++t) {
    Eigen::RowVectorXd z = x.row(t) * Wx + h_prev * Wh + b.transpose();
    for (Index j = 0; j < H; ++j) {
      const auto sig = [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      };
      gi(t, j) = sig(z[j]);
      gf(t, j) = sig(z[H + j]);
      gg(t, j) = std::tanh(z[2 * H + j]);
      go(t, j) = sig(z[3 * H + j]);
      c(t, j) = gf(t, j) * c_prev[j] + gi(t, j) * gg(t, j);
      tanh_c(t, j) = std::tanh(c(t, j));
      h(t, j) = go(t, j) * tanh_c(t, j);
    }
    h_prev = h.row(t);
    c_prev = c.row(t);
  }

  Mat out = reverse ? Mat(h.colwise().reverse()) : h;
  if (cache) {
    cache->x = std::move(x);
    cache->gi = std::move(gi);
    cache->gf = std::move(gf);
    cache->gg = std::move(gg);
    cache->go = std::move(go);
    cache->c = std::move(c);
    cache->tanh_c = std::move(tanh_c);
    cache->h = std::move(h);
    cache->reverse = reverse;
  }
  return out;
}

Mat lstm_backward(const Mat& gh_in, const LstmCache& cc, const Mat& Wx, const Mat& Wh,
                  Mat& gWx, Mat& gWh, Mat& gb) {
  const Index T = cc.x.rows();
  const Index H = cc.h.cols();
  const Mat gh = cc.reverse ? Mat(gh_in.colwise().reverse()) : gh_in;

  Mat gx = Mat::Zero(T, cc.x.cols());
  Eigen::RowVectorXd dh_next = Eigen::RowVectorXd::Zero(H);
  Eigen::RowVectorXd dc_next = Eigen::RowVectorXd::Zero(H);
  Eigen::RowVectorXd dz(4 * H);

  for (Index t = T - 1; t >= 0; --t) {
    const Eigen::RowVectorXd dh = gh.row(t) + dh_next;
    Eigen::RowVectorXd dc = dc_next;
    for (Index j = 0; j < H; ++j) {
      const double tc = cc.tanh_c(t, j);
      dc[j] += dh[j] * cc.go(t, j) * (1.0 - tc * tc);
      const double c_prev = t > 0 ? cc.c(t - 1, j) : 0.0;
      const double di = dc[j] * cc.gg(t, j);
      const double df = dc[j] * c_prev;
      const double dg = dc[j] * cc.gi(t, j);
      const double dout = dh[j] * tc;
      dz[j] = di * cc.gi(t, j) * (1.0 - cc.gi(t, j));
      dz[H + j] = df * cc.gf(t, j) * (1.0 - cc.gf(t, j));
      dz[2 * H + j] = dg * (1.0 - cc.gg(t, j) * cc.gg(t, j));
      dz[3 * H + j] = dout * cc.go(t, j) * (1.0 - cc.go(t, j));
      dc_next[j] = dc[j] * cc.gf(t, j);
    }
    gWx.noalias() += cc.x.row(t).transpose() * dz;
    if (t > 0) gWh.noalias() += cc.h.row(t - 1).transpose() * dz;
    gb.col(0).noalias() += dz.transpose();
    gx.row(t) = dz * Wx.transpose();
    dh_next = dz * Wh.transpose();
  }
  return cc.reverse ? Mat(gx.colwise().reverse()) : gx;
}

Mat blstm_forward(const Mat& x, const Mat& Wx_f, const Mat& Wh_f, const Vec& b_f,
                  const Mat& Wx_r, const Mat& Wh_r, const Vec& b_r, BlstmCache* cache) {
  const Mat hf = lstm_forward(x, Wx_f, Wh_f, b_f, false, cache ? &cache->fwd : nullptr);
  const Mat hr = lstm_forward(x, Wx_r, Wh_r, b_r, true, cache ? &cache->rev : nullptr);
  Mat out(x.rows(), hf.cols() + hr.cols());
  out << hf, hr;
  return out;
}

Mat blstm_backward(const Mat& gh, const BlstmCache& cache, const Mat& Wx_f,
                   const Mat& Wh_f, const Mat& Wx_r, const Mat& Wh_r, Mat& gWx_f,
                   Mat& gWh_f, Mat& gb_f, Mat& gWx_r, Mat& gWh_r, Mat& gb_r) {
  const Index H = cache.fwd.h.cols();
  const Mat gh_f = gh.leftCols(H);
  const Mat gh_r = gh.rightCols(gh.cols() - H);
  Mat gx = lstm_backward(gh_f, cache.fwd, Wx_f, Wh_f, gWx_f, gWh_f, gb_f);
  gx += lstm_backward(gh_r, cache.rev, Wx_r, Wh_r, gWx_r, gWh_r, gb_r);
  return gx;
}

// ---- loss -----------------------------------------------------------------------

double mse_loss(const Mat& pred, const Mat& target, Mat* grad) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw std::invalid_argument("mse_loss: shape mismatch");
  const double count = static_cast<double>(pred.size());
  const Mat diff = pred - target;
  if (grad) *grad = (2.0 / count) * diff;
  return diff.squaredNorm() / count;
}

// ---- optimizer --------------------------------------------------------------------

void Rmsprop::step(ParameterSet& params) {
  for (auto& [name, p] : params.items()) {
    Mat& acc = acc_.try_emplace(name, Mat::Zero(p.value.rows(), p.value.cols()))
                   .first->second;
    acc = rho * acc + (1.0 - rho) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr * p.grad.array() / (acc.array().sqrt() + eps);
    p.grad.setZero();
  }
}

// ---- spectral normalization ----------------------------------------------------------

double spectral_norm_step(const Mat& W, Vec& u) {
  if (u.size() != W.rows()) throw std::invalid_argument("spectral norm: bad u size");
  Vec v = W.transpose() * u;
  const double vn = v.norm();
  if (vn < 1e-300) return 1e-12;
  v /= vn;
  Vec Wv = W * v;
  const double un = Wv.norm();
  if (un < 1e-300) return 1e-12;
  u = Wv / un;
  return std::max(u.dot(Wv), 1e-12);
}

std::pair<Mat, double> spectral_normalize(const Mat& W, Vec& u) {
  const double sigma = spectral_norm_step(W, u);
  if (sigma <= 1e-12) return {W, 1e-12};
  return {W / sigma, sigma};
}

SigmaMap resolve_sigmas(const ParameterSet& params, ParameterSet* persist_into) {
  SigmaMap sigmas;
  for (const auto& [name, p] : params.items()) {
    if (!p.spectral) {
      sigmas[name] = 1.0;
      continue;
    }
    Vec u = p.u;
    const double sigma = spectral_norm_step(p.value, u);
    sigmas[name] = sigma;
    if (persist_into) persist_into->at(name).u = u;
  }
  return sigmas;
}

void apply_sigma_to_grads(ParameterSet& params, const SigmaMap& sigmas) {
  for (auto& [name, p] : params.items()) {
    const auto it = sigmas.find(name);
    if (it != sigmas.end() && it->second != 1.0 && it->second > 1e-12)
      p.grad /= it->second;
  }
}

// ---- checkpoint I/O ---------------------------------------------------------------------

namespace {

void put_bytes(std::ofstream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_entry(std::ofstream& out, const std::string& name,
                 const std::vector<int>& shape, const Mat& value) {
  const uint16_t len = static_cast<uint16_t>(name.size());
  put_bytes(out, &len, 2);
  put_bytes(out, name.data(), name.size());
  const uint8_t rank = static_cast<uint8_t>(shape.size());
  put_bytes(out, &rank, 1);
  for (int e : shape) {
    const uint32_t ext = static_cast<uint32_t>(e);
    put_bytes(out, &ext, 4);
  }
  for (Index i = 0; i < value.rows(); ++i)
    for (Index j = 0; j < value.cols(); ++j) {
      const float f = static_cast<float>(value(i, j));
      put_bytes(out, &f, 4);
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const ParameterSet& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  const char magic[8] = {'Q', 'N', 'C', 'K', 'P', 'T', '1', '\0'};
  put_bytes(out, magic, 8);
  uint32_t count = 0;
  for (const auto& [name, p] : params.items()) count += p.spectral ? 2u : 1u;
  put_bytes(out, &count, 4);
  for (const auto& [name, p] : params.items()) {
    write_entry(out, name, p.shape, p.value);
    if (p.spectral)
      write_entry(out, name + ".u", {static_cast<int>(p.u.size())},
                  Mat(p.u));
  }
  if (!out) throw IoError("short write on " + path);
}

namespace {

struct RawEntry {
  std::vector<int> shape;
  Mat value;
};

std::map<std::string, RawEntry> read_entries(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  const char want[8] = {'Q', 'N', 'C', 'K', 'P', 'T', '1', '\0'};
  if (!in || std::memcmp(magic, want, 8) != 0)
    throw IoError(path + ": bad checkpoint header");
  uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);

  std::map<std::string, RawEntry> entries;
  for (uint32_t e = 0; e < count; ++e) {
    uint16_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 2);
    std::string name(len, '\0');
    in.read(name.data(), len);
    uint8_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), 1);
    std::vector<int> shape(rank);
    for (int i = 0; i < rank; ++i) {
      uint32_t ext = 0;
      in.read(reinterpret_cast<char*>(&ext), 4);
      shape[i] = static_cast<int>(ext);
    }
    const auto [r, c] = realized_dims(shape);
    Mat value(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) {
        float f = 0;
        in.read(reinterpret_cast<char*>(&f), 4);
        value(i, j) = static_cast<double>(f);
      }
    if (!in) throw IoError(path + ": truncated checkpoint");
    entries.emplace(std::move(name), RawEntry{std::move(shape), std::move(value)});
  }
  return entries;
}

}  // namespace

ParameterSet load_checkpoint(const std::string& path) {
  const auto entries = read_entries(path);
  ParameterSet params;
  for (const auto& [name, e] : entries) {
    if (name.size() > 2 && name.ends_with(".u") &&
        entries.count(name.substr(0, name.size() - 2)))
      continue;  // attached below
    const auto u_it = entries.find(name + ".u");
    Param& p = params.add(name, e.shape, u_it != entries.end());
    p.value = e.value;
    if (u_it != entries.end()) p.u = u_it->second.value.col(0);
  }
  return params;
}

void load_checkpoint_into(const std::string& path, ParameterSet& params) {
  ParameterSet loaded = load_checkpoint(path);
  for (auto& [name, p] : params.items()) {
    const Param& q = loaded.at(name);
    if (q.shape != p.shape)
      throw IoError(path + ": shape mismatch for " + name);
    p.value = q.value;
    if (p.spectral) {
      if (!q.spectral) throw IoError(path + ": missing power-iteration state for " + name);
      p.u = q.u;
    }
  }
}

// ---- gradient verification -----------------------------------------------------------------

double GradientReport::max_rel_err() const {
  double worst = 0.0;
  for (const auto& [name, e] : per_param) worst = std::max(worst, e);
  return worst;
}

GradientReport finite_diff_check(ParameterSet& params,
                                 const std::function<double()>& loss,
                                 const std::function<void()>& backward, double step,
                                 int max_entries_per_param, uint64_t sample_seed) {
  backward();
  std::map<std::string, Mat> analytic;
  for (const auto& [name, p] : params.items()) analytic.emplace(name, p.grad);

  GradientReport report;
  Rng rng(sample_seed);
  for (auto& [name, p] : params.items()) {
    std::vector<Index> idx(static_cast<size_t>(p.value.size()));
    std::iota(idx.begin(), idx.end(), 0);
    if (max_entries_per_param > 0 &&
        static_cast<long>(idx.size()) > max_entries_per_param) {
      // Seeded partial Fisher-Yates keeps the check tractable on big tensors.
      for (int i = 0; i < max_entries_per_param; ++i) {
        const size_t j = i + rng.uniform_int(idx.size() - i);
        std::swap(idx[static_cast<size_t>(i)], idx[j]);
      }
      idx.resize(static_cast<size_t>(max_entries_per_param));
    }

    double worst = 0.0;
    double* data = p.value.data();
    const double* a = analytic.at(name).data();
    for (const Index i : idx) {
      const double saved = data[i];
      data[i] = saved + step;
      const double lp = loss();
      data[i] = saved - step;
      const double lm = loss();
      data[i] = saved;
      const double numeric = (lp - lm) / (2.0 * step);
      const double denom = std::max({std::abs(a[i]), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a[i] - numeric) / denom);
    }
    report.per_param.emplace_back(name, worst);
  }
  return report;
}

}  // namespace qnse::nn

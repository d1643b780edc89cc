// Shared test helpers: independent oracles and scratch-directory plumbing.

#ifndef QNSE_TESTS_SUPPORT_HPP
#define QNSE_TESTS_SUPPORT_HPP

#include <complex>
#include <filesystem>
#include <string>
#include <vector>

#include "qnse/common.hpp"

namespace qnse::test {

/// Largest singular value by cyclic Jacobi eigendecomposition of W^T W.
/// Deliberately independent of the power-iteration path it checks.
inline double jacobi_largest_singular_value(const Mat& W) {
  const Index n = W.cols();
  Mat A = W.transpose() * W;
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (Index p = 0; p < n; ++p)
      for (Index q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
    if (off < 1e-24) break;
    for (Index p = 0; p < n; ++p)
      for (Index q = p + 1; q < n; ++q) {
        if (std::abs(A(p, q)) < 1e-300) continue;
        const double theta = 0.5 * std::atan2(2.0 * A(p, q), A(q, q) - A(p, p));
        const double c = std::cos(theta), s = std::sin(theta);
        for (Index k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
      }
  }
  double lambda_max = 0.0;
  for (Index i = 0; i < n; ++i) lambda_max = std::max(lambda_max, A(i, i));
  return std::sqrt(std::max(lambda_max, 0.0));
}

/// Direct O(n^2) DFT used as the FFT/STFT oracle.
inline std::vector<std::complex<double>> direct_dft(const std::vector<double>& x) {
  const size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (size_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * M_PI * static_cast<double>(k * t) / static_cast<double>(n);
      acc += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

/// Self-deleting scratch directory under the build tree.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("qnse_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::string str() const { return path_.string(); }
  std::filesystem::path path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline Mat random_mat(Rng& rng, Index r, Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace qnse::test

#endif  // QNSE_TESTS_SUPPORT_HPP

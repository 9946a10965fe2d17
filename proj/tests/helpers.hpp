#pragma once

// Shared test utilities. The HSIC oracle here is written from the estimator
// definition with explicit matrices and naive matrix products, independent of
// the library's evaluation path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include "debias/rng.hpp"

namespace testutil {

using Matrix = std::vector<std::vector<double>>;

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.size(), m = b[0].size(), k = b.size();
  Matrix c(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t t = 0; t < k; ++t) c[i][j] += a[i][t] * b[t][j];
    }
  }
  return c;
}

inline double trace(const Matrix& a) {
  double t = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) t += a[i][i];
  return t;
}

inline Matrix rbf_matrix(const std::vector<std::vector<double>>& samples, double sigma) {
  const std::size_t n = samples.size();
  Matrix k(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double d2 = 0.0;
      for (std::size_t t = 0; t < samples[i].size(); ++t) {
        const double d = samples[i][t] - samples[j][t];
        d2 += d * d;
      }
      k[i][j] = std::exp(-d2 / (2.0 * sigma * sigma));
    }
  }
  return k;
}

inline Matrix centering_matrix(std::size_t n) {
  Matrix h(n, std::vector<double>(n, -1.0 / static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) h[i][i] += 1.0;
  return h;
}

/// (n-1)^{-2} tr(K H L H) by explicit triple matrix product.
inline double hsic_explicit(const std::vector<std::vector<double>>& a,
                            const std::vector<std::vector<double>>& b,
                            double sigma_a, double sigma_b) {
  const std::size_t n = a.size();
  const Matrix k = rbf_matrix(a, sigma_a);
  const Matrix l = rbf_matrix(b, sigma_b);
  const Matrix h = centering_matrix(n);
  const double t = trace(matmul(matmul(k, h), matmul(l, h)));
  const double nm1 = static_cast<double>(n - 1);
  return t / (nm1 * nm1);
}

/// Same statistic via tr((HKH)(HLH)); H idempotent makes the two equal.
inline double hsic_explicit_centered(const std::vector<std::vector<double>>& a,
                                     const std::vector<std::vector<double>>& b,
                                     double sigma_a, double sigma_b) {
  const std::size_t n = a.size();
  const Matrix k = rbf_matrix(a, sigma_a);
  const Matrix l = rbf_matrix(b, sigma_b);
  const Matrix h = centering_matrix(n);
  const Matrix hkh = matmul(matmul(h, k), h);
  const Matrix hlh = matmul(matmul(h, l), h);
  const double t = trace(matmul(hkh, hlh));
  const double nm1 = static_cast<double>(n - 1);
  return t / (nm1 * nm1);
}

inline std::vector<std::vector<double>> scalar_samples(const std::vector<double>& v) {
  std::vector<std::vector<double>> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = {v[i]};
  return out;
}

/// Average ranks, then Pearson on the ranks.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size(), 0.0);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

/// Fresh scratch directory under the system temp dir.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("debias_test_" + tag + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is),
                     std::istreambuf_iterator<char>());
}

inline std::vector<double> random_vector(std::size_t n, debias::RandomStream& rng,
                                         double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace testutil

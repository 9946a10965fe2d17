#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "debias/rng.hpp"

namespace debias::kernel {

// All arithmetic in this module is double precision: HSIC values on
// probability vectors are small and sensitive to rounding.

using Sample = std::vector<double>;

inline std::vector<Sample> as_samples(const std::vector<double>& scalars) {
  std::vector<Sample> out(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) out[i] = {scalars[i]};
  return out;
}

inline double squared_distance(const Sample& a, const Sample& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("kernel: sample dimension mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

/// Median of pairwise Euclidean distances over all unordered pairs.
/// Falls back to 1.0 when the median distance is 0 (constant samples).
inline double median_bandwidth(const std::vector<Sample>& samples) {
  const std::size_t n = samples.size();
  if (n < 2) throw std::invalid_argument("median_bandwidth: need at least 2 samples");
  std::vector<double> dists;
  dists.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dists.push_back(std::sqrt(squared_distance(samples[i], samples[j])));
    }
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t m = dists.size();
  const double med = (m % 2 == 1) ? dists[m / 2]
                                  : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
  return med > 0.0 ? med : 1.0;
}

inline double median_bandwidth(const std::vector<double>& scalars) {
  return median_bandwidth(as_samples(scalars));
}

/// n x n Gaussian RBF kernel matrix with its bandwidth.
struct GramMatrix {
  std::vector<double> values;  // row-major n x n, symmetric, unit diagonal
  std::size_t n = 0;
  double bandwidth_sigma = 0.0;

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

/// K_ij = exp(-||a_i - a_j||^2 / (2 sigma^2)).
inline GramMatrix rbf_gram(const std::vector<Sample>& samples, double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("rbf_gram: sigma must be positive");
  const std::size_t n = samples.size();
  GramMatrix g;
  g.n = n;
  g.bandwidth_sigma = sigma;
  g.values.assign(n * n, 1.0);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::exp(-squared_distance(samples[i], samples[j]) * inv);
      g.values[i * n + j] = v;
      g.values[j * n + i] = v;
    }
  }
  return g;
}

inline GramMatrix rbf_gram(const std::vector<double>& scalars, double sigma) {
  return rbf_gram(as_samples(scalars), sigma);
}

struct HsicResult {
  double value = 0.0;  // clamped to be non-negative
  std::size_t n = 0;
  double sigma_a = 0.0;
  double sigma_b = 0.0;
};

namespace detail {

/// Double centering: returns HKH for symmetric K.
inline std::vector<double> center(const std::vector<double>& k, std::size_t n) {
  std::vector<double> mean(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += k[i * n + j];
    mean[i] = acc / static_cast<double>(n);
  }
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i) grand += mean[i];
  grand /= static_cast<double>(n);
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = k[i * n + j] - mean[i] - mean[j] + grand;
    }
  }
  return out;
}

inline double frobenius_inner(const std::vector<double>& a,
                              const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

/// Biased estimator (n-1)^{-2} tr(KHLH) from precomputed Gram matrices.
/// Evaluates the trace both as tr((HKH)L) and tr((HKH)(HLH)) and requires the
/// two to agree to 1e-10 (H is idempotent, so they are equal in exact
/// arithmetic); this cross-checks the centering path on every call.
inline HsicResult hsic_from_grams(const GramMatrix& ka, const GramMatrix& lb) {
  if (ka.n != lb.n) throw std::invalid_argument("hsic: sample count mismatch");
  const std::size_t n = ka.n;
  if (n < 2) throw std::invalid_argument("hsic: need at least 2 samples");
  const std::vector<double> kc = detail::center(ka.values, n);
  const double t1 = detail::frobenius_inner(kc, lb.values);
  const std::vector<double> lc = detail::center(lb.values, n);
  const double t2 = detail::frobenius_inner(kc, lc);
  const double scale = 1.0 / (static_cast<double>(n - 1) * static_cast<double>(n - 1));
  if (std::abs(t1 - t2) * scale > 1e-10 * std::max(1.0, std::abs(t1) * scale)) {
    throw std::runtime_error("hsic: trace identity cross-check failed");
  }
  HsicResult res;
  res.n = n;
  res.sigma_a = ka.bandwidth_sigma;
  res.sigma_b = lb.bandwidth_sigma;
  res.value = std::max(0.0, t1 * scale);
  return res;
}

inline HsicResult hsic_biased(const std::vector<Sample>& a,
                              const std::vector<Sample>& b, double sigma_a,
                              double sigma_b) {
  if (a.size() != b.size()) throw std::invalid_argument("hsic: sample count mismatch");
  if (a.size() < 2) throw std::invalid_argument("hsic: need at least 2 samples");
  return hsic_from_grams(rbf_gram(a, sigma_a), rbf_gram(b, sigma_b));
}

inline HsicResult hsic_biased(const std::vector<double>& a,
                              const std::vector<double>& b, double sigma_a,
                              double sigma_b) {
  return hsic_biased(as_samples(a), as_samples(b), sigma_a, sigma_b);
}

struct HsicGradient {
  HsicResult result;
  std::vector<Sample> grad_a;  // dHSIC / da_i, one vector per sample
  std::vector<Sample> grad_b;
};

/// HSIC value plus its gradient with respect to both sample sets. Bandwidths
/// are treated as constants. Uses dK_iq/da_i = K_iq (a_q - a_i) / sigma^2, so
/// grad_a[i] = 2 (n-1)^{-2} sum_q (HLH)_iq K_iq (a_q - a_i) / sigma_a^2.
inline HsicGradient hsic_with_gradient(const std::vector<Sample>& a,
                                       const std::vector<Sample>& b,
                                       double sigma_a, double sigma_b) {
  if (a.size() != b.size()) throw std::invalid_argument("hsic: sample count mismatch");
  const std::size_t n = a.size();
  if (n < 2) throw std::invalid_argument("hsic: need at least 2 samples");
  const GramMatrix ka = rbf_gram(a, sigma_a);
  const GramMatrix lb = rbf_gram(b, sigma_b);

  HsicGradient out;
  out.result = hsic_from_grams(ka, lb);

  const std::vector<double> kc = detail::center(ka.values, n);
  const std::vector<double> lc = detail::center(lb.values, n);
  const double scale = 2.0 / (static_cast<double>(n - 1) * static_cast<double>(n - 1));
  const std::size_t da = a[0].size(), db = b[0].size();
  out.grad_a.assign(n, Sample(da, 0.0));
  out.grad_b.assign(n, Sample(db, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t q = 0; q < n; ++q) {
      const double wa = scale * lc[i * n + q] * ka.at(i, q) / (sigma_a * sigma_a);
      for (std::size_t d = 0; d < da; ++d) {
        out.grad_a[i][d] += wa * (a[q][d] - a[i][d]);
      }
      const double wb = scale * kc[i * n + q] * lb.at(i, q) / (sigma_b * sigma_b);
      for (std::size_t d = 0; d < db; ++d) {
        out.grad_b[i][d] += wb * (b[q][d] - b[i][d]);
      }
    }
  }
  return out;
}

inline HsicGradient hsic_with_gradient(const std::vector<double>& a,
                                       const std::vector<double>& b,
                                       double sigma_a, double sigma_b) {
  return hsic_with_gradient(as_samples(a), as_samples(b), sigma_a, sigma_b);
}

struct PermutationTest {
  double observed = 0.0;
  double p_value = 1.0;
  double percentile_95 = 0.0;
  double percentile_99 = 0.0;
};

/// Permutation null distribution for HSIC with median-heuristic bandwidths.
/// Replica r draws its permutation from RandomStream(seed + r), so results do
/// not depend on evaluation order. p = (1 + #{perm >= observed}) / (1 + m).
inline PermutationTest permutation_test(const std::vector<Sample>& a,
                                        const std::vector<Sample>& b,
                                        std::size_t permutations,
                                        std::uint64_t seed) {
  if (permutations < 100) {
    throw std::invalid_argument("permutation_test: need at least 100 permutations");
  }
  const std::size_t n = a.size();
  const double sigma_a = median_bandwidth(a);
  const double sigma_b = median_bandwidth(b);
  const GramMatrix ka = rbf_gram(a, sigma_a);
  const GramMatrix lb = rbf_gram(b, sigma_b);
  const std::vector<double> kc = detail::center(ka.values, n);
  const double scale = 1.0 / (static_cast<double>(n - 1) * static_cast<double>(n - 1));

  PermutationTest out;
  out.observed = hsic_from_grams(ka, lb).value;

  // Permuting b conjugates L by the permutation; H commutes with that
  // conjugation, so tr((HKH) P L P^T) is the permuted statistic.
  std::vector<double> values(permutations);
  std::vector<std::size_t> perm(n);
  std::size_t count_ge = 0;
  for (std::size_t r = 0; r < permutations; ++r) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    RandomStream rng(seed + r);
    rng.shuffle(perm);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* krow = &kc[i * n];
      const double* lrow = &lb.values[perm[i] * n];
      for (std::size_t j = 0; j < n; ++j) acc += krow[j] * lrow[perm[j]];
    }
    values[r] = std::max(0.0, acc * scale);
    if (values[r] >= out.observed) ++count_ge;
  }
  out.p_value = static_cast<double>(1 + count_ge) /
                static_cast<double>(1 + permutations);
  std::sort(values.begin(), values.end());
  const auto rank = [&](double q) {
    const std::size_t k = static_cast<std::size_t>(
        std::ceil(q * static_cast<double>(permutations)));
    return values[std::max<std::size_t>(1, k) - 1];
  };
  out.percentile_95 = rank(0.95);
  out.percentile_99 = rank(0.99);
  return out;
}

inline PermutationTest permutation_test(const std::vector<double>& a,
                                        const std::vector<double>& b,
                                        std::size_t permutations,
                                        std::uint64_t seed) {
  return permutation_test(as_samples(a), as_samples(b), permutations, seed);
}

}  // namespace debias::kernel

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/data.hpp"
#include "debias/hsic.hpp"
#include "debias/io.hpp"
#include "debias/networks.hpp"

namespace debias {

/// Mean precision at the positively-labeled ranks of the descending-score
/// ordering. Ties are broken by ascending original index.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("average_precision: length mismatch");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double acc = 0.0;
  std::size_t positives = 0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] == 1) {
      ++hits;
      acc += static_cast<double>(hits) / static_cast<double>(rank + 1);
      ++positives;
    }
  }
  if (positives == 0) {
    throw std::invalid_argument("average_precision: no positive labels");
  }
  return acc / static_cast<double>(positives);
}

/// |P(pred=1 | s=0) - P(pred=1 | s=1)|.
inline double demographic_parity_gap(const std::vector<int>& preds,
                                     const std::vector<int>& s) {
  if (preds.size() != s.size()) {
    throw std::invalid_argument("demographic_parity_gap: length mismatch");
  }
  std::size_t n0 = 0, n1 = 0, pos0 = 0, pos1 = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (s[i] == 0) {
      ++n0;
      pos0 += preds[i] == 1;
    } else {
      ++n1;
      pos1 += preds[i] == 1;
    }
  }
  if (n0 == 0 || n1 == 0) {
    throw std::invalid_argument("demographic_parity_gap: a protected group is empty");
  }
  return std::abs(static_cast<double>(pos0) / static_cast<double>(n0) -
                  static_cast<double>(pos1) / static_cast<double>(n1));
}

/// Difference in equality of opportunity: |TPR(s=0) - TPR(s=1)|.
inline double deo(const std::vector<int>& preds, const std::vector<int>& labels,
                  const std::vector<int>& s) {
  if (preds.size() != labels.size() || preds.size() != s.size()) {
    throw std::invalid_argument("deo: length mismatch");
  }
  std::size_t p0 = 0, p1 = 0, tp0 = 0, tp1 = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] != 1) continue;
    if (s[i] == 0) {
      ++p0;
      tp0 += preds[i] == 1;
    } else {
      ++p1;
      tp1 += preds[i] == 1;
    }
  }
  if (p0 == 0 || p1 == 0) {
    throw std::invalid_argument("deo: a protected group has no positive labels");
  }
  return std::abs(static_cast<double>(tp0) / static_cast<double>(p0) -
                  static_cast<double>(tp1) / static_cast<double>(p1));
}

/// Standard sample correlation; both vectors must be non-constant.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("pearson: need equal lengths >= 2");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw std::invalid_argument("pearson: constant input vector");
  }
  return sxy / std::sqrt(sxx * syy);
}

struct MetricsReport {
  double ap = 0.0;
  double dp = 0.0;
  double deo = 0.0;
  std::size_t n_evaluated = 0;
  double threshold = 0.5;
};

namespace detail {

// Head scores over a whole dataset, batched; transform first when given.
inline std::vector<double> head_scores(const ClassifierParams<float>& cls,
                                       const UNetParams<float>* unet,
                                       const Dataset& ds, std::size_t head) {
  std::vector<double> scores;
  scores.reserve(ds.size());
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t end = std::min(ds.size(), start + chunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    TensorF images = batch_images(ds, idx);
    if (unet != nullptr) images = unet_apply(*unet, images);
    const auto heads = classifier_apply(cls, images);
    const TensorF& h = heads.at(head);
    for (std::size_t i = 0; i < h.size(); ++i) {
      scores.push_back(static_cast<double>(h[i]));
    }
  }
  return scores;
}

inline std::vector<int> threshold_preds(const std::vector<double>& scores,
                                        double threshold) {
  std::vector<int> preds(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    preds[i] = scores[i] >= threshold ? 1 : 0;
  }
  return preds;
}

}  // namespace detail

/// Runs the test set through the frozen classifier, optionally reconstructing
/// with the U-net first. AP uses raw h1 scores against y; DP and DEO use h1
/// thresholded at `threshold`.
inline MetricsReport evaluate(const ClassifierParams<float>& classifier,
                              const UNetParams<float>* unet, const Dataset& test,
                              double threshold = 0.5) {
  if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
  const std::vector<double> scores = detail::head_scores(classifier, unet, test, 0);
  const std::vector<int> preds = detail::threshold_preds(scores, threshold);
  std::vector<int> y(test.size()), s(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    y[i] = test.examples[i].y;
    s[i] = test.examples[i].s;
  }
  MetricsReport rep;
  rep.ap = average_precision(scores, y);
  rep.dp = demographic_parity_gap(preds, s);
  rep.deo = deo(preds, y, s);
  rep.n_evaluated = test.size();
  rep.threshold = threshold;
  return rep;
}

inline MetricsReport evaluate(const ClassifierParams<float>& classifier,
                              const Dataset& test, double threshold = 0.5) {
  return evaluate(classifier, nullptr, test, threshold);
}

struct SpilloverRow {
  std::string attribute;
  double hsic_with_target = 0.0;
  double dp_original = 0.0;
  double dp_reconstructed = 0.0;
  double dp_delta_abs = 0.0;
};

struct SpilloverReport {
  std::vector<SpilloverRow> rows;
  double pearson_r = 0.0;
};

/// Per-attribute spillover: HSIC between each auxiliary attribute and the
/// target label on training data, against the change in that attribute
/// classifier's demographic parity when the test images are reconstructed.
inline SpilloverReport spillover_report(
    const Dataset& train,
    const std::vector<ClassifierParams<float>>& attribute_classifiers,
    const UNetParams<float>& unet, const Dataset& test, double threshold = 0.5) {
  const std::size_t m = train.aux_names.size();
  if (attribute_classifiers.size() != m) {
    throw std::invalid_argument("spillover: need one classifier per attribute");
  }
  std::vector<double> y_labels(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    y_labels[i] = static_cast<double>(train.examples[i].y);
  }
  std::vector<int> s_test(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) s_test[i] = test.examples[i].s;

  SpilloverReport rep;
  std::vector<double> hsics, deltas;
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<double> a_labels(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
      a_labels[i] = static_cast<double>(train.examples[i].aux.at(j));
    }
    SpilloverRow row;
    row.attribute = train.aux_names[j];
    row.hsic_with_target =
        kernel::hsic_biased(a_labels, y_labels, kernel::median_bandwidth(a_labels),
                            kernel::median_bandwidth(y_labels))
            .value;
    const auto orig = detail::threshold_preds(
        detail::head_scores(attribute_classifiers[j], nullptr, test, 0), threshold);
    const auto recon = detail::threshold_preds(
        detail::head_scores(attribute_classifiers[j], &unet, test, 0), threshold);
    row.dp_original = demographic_parity_gap(orig, s_test);
    row.dp_reconstructed = demographic_parity_gap(recon, s_test);
    row.dp_delta_abs = std::abs(row.dp_reconstructed - row.dp_original);
    hsics.push_back(row.hsic_with_target);
    deltas.push_back(row.dp_delta_abs);
    rep.rows.push_back(std::move(row));
  }
  rep.pearson_r = pearson(hsics, deltas);
  return rep;
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

inline std::string metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::string out = "transform,ap,dp,deo,n\n";
  for (const auto& [name, rep] : rows) {
    out += name + "," + format_sig9(rep.ap) + "," + format_sig9(rep.dp) + "," +
           format_sig9(rep.deo) + "," + std::to_string(rep.n_evaluated) + "\n";
  }
  return out;
}

inline void write_metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                              const std::filesystem::path& path) {
  atomic_write_text(path, metrics_csv(rows));
}

inline std::string spillover_csv(const SpilloverReport& rep) {
  std::string out = "attribute,hsic,dp_orig,dp_recon,dp_delta\n";
  for (const auto& r : rep.rows) {
    out += r.attribute + "," + format_sig9(r.hsic_with_target) + "," +
           format_sig9(r.dp_original) + "," + format_sig9(r.dp_reconstructed) + "," +
           format_sig9(r.dp_delta_abs) + "\n";
  }
  return out;
}

inline void write_spillover_csv(const SpilloverReport& rep,
                                const std::filesystem::path& path) {
  atomic_write_text(path, spillover_csv(rep));
}

}  // namespace debias

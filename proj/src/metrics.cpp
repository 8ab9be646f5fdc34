#include "esqa/metrics.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <numeric>
#include <set>

#include "esqa/error.hpp"

namespace esqa {

namespace {

template <typename A, typename B>
void check_pair(const std::vector<A>& a, const std::vector<B>& b, const char* what) {
  if (a.size() != b.size()) throw ShapeError(std::string(what) + ": length mismatch");
  if (a.empty()) throw DataError(std::string(what) + ": empty input");
}

void check_finite(const std::vector<double>& xs, const char* what, const char* side) {
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (std::isnan(xs[i])) throw DataError(std::string(what) + ": NaN in " + side + " at index " + std::to_string(i));
  }
}

}  // namespace

double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& truths) {
  check_pair(preds, truths, "accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == truths[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double f1_binary(const std::vector<int>& preds, const std::vector<int>& truths) {
  check_pair(preds, truths, "f1");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == 1 && truths[i] == 1) ++tp;
    else if (preds[i] == 1) ++fp;
    else if (truths[i] == 1) ++fn;
  }
  const double denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2 * tp / denom;
}

double f1_macro(const std::vector<std::string>& preds, const std::vector<std::string>& truths,
                const std::string& ignore) {
  check_pair(preds, truths, "f1");
  std::set<std::string> labels(truths.begin(), truths.end());
  labels.insert(preds.begin(), preds.end());
  labels.erase(ignore);
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (const auto& c : labels) {
    std::vector<int> p(preds.size()), t(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
      p[i] = preds[i] == c;
      t[i] = truths[i] == c;
    }
    total += f1_binary(p, t);
  }
  return total / static_cast<double>(labels.size());
}

double mae(const std::vector<double>& preds, const std::vector<double>& truths) {
  check_pair(preds, truths, "mae");
  check_finite(preds, "mae", "predictions");
  check_finite(truths, "mae", "truths");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(truths[i] - preds[i]);
  return s / static_cast<double>(preds.size());
}

double mse(const std::vector<double>& preds, const std::vector<double>& truths) {
  check_pair(preds, truths, "mse");
  check_finite(preds, "mse", "predictions");
  check_finite(truths, "mse", "truths");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += (truths[i] - preds[i]) * (truths[i] - preds[i]);
  return s / static_cast<double>(preds.size());
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_pair(scores, labels, "roc_auc");
  check_finite(scores, "roc_auc", "scores");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the Mann-Whitney U, counted in integers so the result is exact.
  std::uint64_t u2 = 0, neg_below = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::uint64_t gp = 0, gn = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? gp : gn)++;
      ++j;
    }
    u2 += gp * (2 * neg_below + gn);
    neg_below += gn;
    pos += gp;
    neg += gn;
    i = j;
  }
  if (pos == 0 || neg == 0) throw DataError("roc_auc: labels contain a single class");
  return static_cast<double>(u2) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) throw DataError("mean: empty input");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double median_of(std::vector<double> xs) {
  if (xs.empty()) throw DataError("median: empty input");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : (xs[n / 2 - 1] + xs[n / 2]) / 2.0;
}

}  // namespace esqa

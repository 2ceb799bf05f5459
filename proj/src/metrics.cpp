#include "dsan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "dsan/error.hpp"

namespace dsan::metrics {

double dual_weight(double ratio) {
  if (!(ratio >= 0.0)) throw ContractError("infection ratio must be >= 0");
  return (ratio < kFuseLowBelow || ratio > kFuseHighAbove) ? kWeightMinority : kWeightRest;
}

double fuse(double p_us, double p_ss, double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw ContractError("ensemble weight must lie in [0, 1]");
  return w * p_us + (1.0 - w) * p_ss;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ContractError("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of positive midranks (1-based); half-integers are exact in double.
  double rank_sum = 0.0;
  std::int64_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum += midrank;
        ++positives;
      }
    }
    i = j;
  }
  const auto negatives = static_cast<std::int64_t>(n) - positives;
  if (positives == 0 || negatives == 0) throw ContractError("auc needs both classes present");
  const double p = static_cast<double>(positives);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(negatives));
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = nlohmann::json{{"n", r.n},
                     {"tp", r.tp},
                     {"fp", r.fp},
                     {"tn", r.tn},
                     {"fn", r.fn},
                     {"auc", opt(r.auc)},
                     {"accuracy", opt(r.accuracy)},
                     {"sensitivity", opt(r.sensitivity)},
                     {"specificity", opt(r.specificity)},
                     {"f1", opt(r.f1)}};
}

MetricReport confusion_metrics(std::span<const double> scores, std::span<const int> labels,
                               double threshold) {
  if (scores.size() != labels.size()) throw ContractError("scores and labels differ in length");
  MetricReport r;
  r.n = scores.size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i] == 1) {
      (predicted ? r.tp : r.fn) += 1;
    } else {
      (predicted ? r.fp : r.tn) += 1;
    }
  }
  auto ratio = [](std::int64_t num, std::int64_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = ratio(r.tp + r.tn, r.tp + r.tn + r.fp + r.fn);
  r.sensitivity = ratio(r.tp, r.tp + r.fn);
  r.specificity = ratio(r.tn, r.tn + r.fp);
  r.f1 = ratio(2 * r.tp, 2 * r.tp + r.fp + r.fn);
  if (r.tp + r.fn > 0 && r.tn + r.fp > 0) r.auc = auc(scores, labels);
  return r;
}

std::array<BandReport, kNumEvalGroups> groupwise_report(std::span<const double> scores,
                                                        std::span<const int> labels,
                                                        std::span<const double> ratios,
                                                        double threshold) {
  if (scores.size() != labels.size() || scores.size() != ratios.size()) {
    throw ContractError("scores, labels and ratios differ in length");
  }
  std::array<std::vector<double>, kNumEvalGroups> band_scores;
  std::array<std::vector<int>, kNumEvalGroups> band_labels;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int b = static_cast<int>(assign_eval_group(ratios[i]));
    band_scores[b].push_back(scores[i]);
    band_labels[b].push_back(labels[i]);
  }
  std::array<BandReport, kNumEvalGroups> out;
  for (int b = 0; b < kNumEvalGroups; ++b) {
    out[b].band = static_cast<EvalGroup>(b);
    out[b].empty = band_scores[b].empty();
    out[b].report = confusion_metrics(band_scores[b], band_labels[b], threshold);
  }
  return out;
}

nlohmann::json to_json(const std::array<BandReport, kNumEvalGroups>& bands) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& b : bands) {
    nlohmann::json entry = b.report;
    entry["empty"] = b.empty;
    j[std::string(to_string(b.band))] = entry;
  }
  return j;
}

double paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("paired t-test needs equal-length sequences");
  if (a.size() < 2) throw ContractError("paired t-test needs at least two pairs");
  const auto n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  if (ss == 0.0) return mean == 0.0 ? 1.0 : 0.0;
  const double t = mean / std::sqrt(ss / (n - 1.0) / n);
  const boost::math::students_t dist(n - 1.0);
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t))));
}

double dice(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ContractError("dice operands differ in size");
  std::int64_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] > 0.5f, pb = b[i] > 0.5f;
    na += pa;
    nb += pb;
    inter += pa && pb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

}  // namespace dsan::metrics

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>

#include <nlohmann/json.hpp>

#include "dsan/data_model.hpp"

namespace dsan::metrics {

inline constexpr double kWeightMinority = 0.35;  // ratio < 0.001 or > 0.030
inline constexpr double kWeightRest = 0.96;
inline constexpr double kFuseLowBelow = 0.001;
inline constexpr double kFuseHighAbove = 0.030;

// Weight of the uniform-sampling model in the ensemble, chosen by ratio.
double dual_weight(double ratio);

// w * p_us + (1 - w) * p_ss. Throws ContractError for w outside [0, 1].
double fuse(double p_us, double p_ss, double w);

// Probability that a random positive outranks a random negative (ties count
// one half), computed from midranks. Throws ContractError unless both classes
// are present.
double auc(std::span<const double> scores, std::span<const int> labels);

struct MetricReport {
  std::size_t n = 0;
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::optional<double> auc;
  std::optional<double> accuracy;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> f1;
};

void to_json(nlohmann::json& j, const MetricReport& r);

// Positive prediction iff score >= threshold. Sub-metrics whose denominator
// is zero are left empty. Also fills auc when both classes are present.
MetricReport confusion_metrics(std::span<const double> scores, std::span<const int> labels,
                               double threshold = 0.5);

struct BandReport {
  EvalGroup band = EvalGroup::kLow;
  bool empty = true;
  MetricReport report;
};

// Partitions by assign_eval_group(ratio) and reports each band.
std::array<BandReport, kNumEvalGroups> groupwise_report(std::span<const double> scores,
                                                        std::span<const int> labels,
                                                        std::span<const double> ratios,
                                                        double threshold = 0.5);

nlohmann::json to_json(const std::array<BandReport, kNumEvalGroups>& bands);

// Two-sided paired t-test on a - b. All-zero differences give 1; constant
// non-zero differences give 0.
double paired_t_test(std::span<const double> a, std::span<const double> b);

// 2|A and B| / (|A| + |B|) over voxels > 0.5; 1 when both are empty.
double dice(std::span<const float> a, std::span<const float> b);

}  // namespace dsan::metrics

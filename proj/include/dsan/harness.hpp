#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsan/attention_net.hpp"
#include "dsan/data_model.hpp"
#include "dsan/metrics.hpp"
#include "dsan/samplers.hpp"
#include "dsan/volume_prep.hpp"

namespace dsan::harness {

struct TrainConfig {
  std::filesystem::path manifest;
  // Optional; when empty, `train` holds out fold 0 of a patient-level 5-fold
  // split of `manifest`.
  std::filesystem::path val_manifest;
  std::filesystem::path cache_dir = "cache";
  std::filesystem::path checkpoint_dir = "checkpoints";

  net::NetworkConfig network;
  prep::PrepConfig preprocessing;

  // Adam; beta1 plays the role of momentum.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double lr = 2e-4;
  int lr_step_epochs = 5;
  double lr_gamma = 0.1;

  int batch_size = 20;
  int epochs = 20;
  double lambda = 0.5;
  sampling::Strategy sampling_strategy = sampling::Strategy::kUniform;
  std::uint64_t seed = 0;

  // Preprocessed samples are kept in memory up to this budget.
  std::int64_t memory_budget_mb = 2048;
  // Recompute BatchNorm running statistics over the training set before
  // each validation pass.
  bool recalibrate_bn = true;
  bool verbose = false;

  void validate() const;
};

// Relative paths inside the JSON are resolved against `base_dir`.
TrainConfig load_train_config(const std::filesystem::path& path);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json to_json(const TrainConfig& c);

// lr * gamma^floor((epoch - 1) / step), epochs counted from 1.
double learning_rate(const TrainConfig& c, int epoch);

struct ScanPrediction {
  std::string scan_id;
  int label = 0;
  double ratio = 0.0;
  double probability = 0.0;
  // Dice of (T > 0.5) against the infection mask; set for scans whose mask
  // is non-empty.
  std::optional<double> attention_dice;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  int steps = 0;
  double mean_l_c = 0.0;
  std::optional<double> mean_l_ex;
  double mean_l_total = 0.0;
  std::array<std::int64_t, kNumSamplingGroups> group_frequencies{};
  metrics::MetricReport validation;
};

nlohmann::json to_json(const EpochLog& e);

struct RunResult {
  std::vector<EpochLog> epochs;
  std::filesystem::path best_checkpoint;
  std::optional<double> best_val_auc;
  int best_epoch = 0;
  std::vector<ScanPrediction> best_val_predictions;
};

// Trains one model on `train_set`, validating on `val_set` after every
// epoch. The best-AUC epoch (earliest on ties) is checkpointed as
// <checkpoint_dir>/<run_name>. Per-epoch logs go to <run_name>.log.jsonl.
RunResult train(const TrainConfig& config, const Manifest& train_set, const Manifest& val_set,
                const std::string& run_name);

// Loads the manifests named by the config and trains.
RunResult train(const TrainConfig& config);

struct EnsemblePrediction {
  std::string scan_id;
  int label = 0;
  double ratio = 0.0;
  double p_us = 0.0;
  double p_ss = 0.0;
  double w = 0.0;
  double p_final = 0.0;
};

nlohmann::json to_json(const EnsemblePrediction& p);

// Fuses two aligned prediction lists with dual_weight(ratio).
std::vector<EnsemblePrediction> fuse_predictions(const std::vector<ScanPrediction>& us,
                                                 const std::vector<ScanPrediction>& ss);

struct StrategyReports {
  metrics::MetricReport overall;
  std::array<metrics::BandReport, kNumEvalGroups> bands;
};

StrategyReports report_for(const std::vector<double>& scores, const std::vector<int>& labels,
                           const std::vector<double>& ratios);

struct FoldResult {
  int fold = 0;
  std::optional<RunResult> us;
  std::optional<RunResult> ss;
  std::vector<EnsemblePrediction> predictions;  // when both strategies ran
};

struct CrossValidationResult {
  std::vector<FoldResult> folds;
  // Combined validation predictions across folds, per strategy present.
  std::optional<StrategyReports> us;
  std::optional<StrategyReports> ss;
  std::optional<StrategyReports> ds;
  nlohmann::json report;
};

// Patient-level k-fold CV over config.manifest; trains one model per
// requested strategy per fold (seeded from config.seed and the fold index;
// both strategies in a fold share the initialisation seed) and writes
// cv_report.json to the checkpoint directory.
CrossValidationResult cross_validate(
    const TrainConfig& config, int k = 5,
    const std::vector<sampling::Strategy>& strategies = {sampling::Strategy::kUniform,
                                                         sampling::Strategy::kSizeBalanced});

struct EvaluationResult {
  StrategyReports ensemble;
  StrategyReports us;
  StrategyReports ss;
  std::vector<EnsemblePrediction> predictions;
  nlohmann::json report;
};

// Scores every record with both checkpoints and fuses them. Throws
// ValidationError when the checkpoints disagree on network or
// preprocessing. Writes the JSON report to `out` when it is non-empty.
EvaluationResult evaluate(const std::filesystem::path& us_checkpoint,
                          const std::filesystem::path& ss_checkpoint, const Manifest& manifest,
                          const std::filesystem::path& cache_dir,
                          const std::filesystem::path& out = {});

// Per scan writes <id>_attention.nii (T at input resolution) and axial and
// coronal mid-slice overlays (PPM). With `with_grad_cam`, also
// <id>_gradcam.nii and its overlays. Returns the written paths.
std::vector<std::filesystem::path> export_attention(const std::filesystem::path& checkpoint,
                                                    const Manifest& manifest,
                                                    const std::filesystem::path& out_dir,
                                                    const std::filesystem::path& cache_dir,
                                                    bool with_grad_cam);

// Preprocesses every record into the cache; returns the number of records.
std::size_t preprocess_all(const Manifest& manifest, const prep::SampleCache& cache);

}  // namespace dsan::harness

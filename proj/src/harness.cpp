#include "dsan/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "dsan/error.hpp"
#include "dsan/nifti.hpp"
#include "dsan/objectives.hpp"
#include "dsan/synth.hpp"

namespace dsan::harness {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

json prep_to_json(const prep::PrepConfig& p) {
  return json{{"target_spacing", {p.target_spacing.z, p.target_spacing.y, p.target_spacing.x}},
              {"input_shape", {p.target_shape.d, p.target_shape.h, p.target_shape.w}}};
}

prep::PrepConfig prep_from_json(const json& j) {
  prep::PrepConfig p;
  if (j.contains("target_spacing")) {
    const auto s = j.at("target_spacing").get<std::array<double, 3>>();
    p.target_spacing = {s[0], s[1], s[2]};
  }
  if (j.contains("input_shape")) {
    const auto s = j.at("input_shape").get<std::array<std::int64_t, 3>>();
    p.target_shape = {s[0], s[1], s[2]};
  }
  return p;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || path.empty() ? path : (base / path).lexically_normal();
}

}  // namespace

void TrainConfig::validate() const {
  network.validate();
  if (!(lr > 0.0) || !(lr_gamma > 0.0) || lr_step_epochs < 1) {
    throw ContractError("learning-rate schedule parameters must be positive");
  }
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0) || weight_decay < 0.0) {
    throw ContractError("optimizer parameters out of range");
  }
  if (batch_size < 1 || epochs < 1) throw ContractError("batch_size and epochs must be >= 1");
  if (lambda < 0.0) throw ContractError("lambda must be >= 0");
  const auto& s = preprocessing.target_shape;
  if (s.d < 1 || s.h < 1 || s.w < 1) throw ContractError("input_shape must be positive");
}

TrainConfig train_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  TrainConfig c;
  try {
    c.manifest = resolve(base_dir, j.at("manifest").get<std::string>());
    c.val_manifest = resolve(base_dir, j.value("val_manifest", std::string()));
    c.cache_dir = resolve(base_dir, j.value("cache_dir", std::string("cache")));
    c.checkpoint_dir = resolve(base_dir, j.value("checkpoint_dir", std::string("checkpoints")));
    if (j.contains("network")) c.network = j.at("network").get<net::NetworkConfig>();
    c.preprocessing = prep_from_json(j);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      c.beta1 = o.value("beta1", c.beta1);
      c.beta2 = o.value("beta2", c.beta2);
      c.weight_decay = o.value("weight_decay", c.weight_decay);
    }
    c.lr = j.value("lr", c.lr);
    c.lr_step_epochs = j.value("lr_step_epochs", c.lr_step_epochs);
    c.lr_gamma = j.value("lr_gamma", c.lr_gamma);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.lambda = j.value("lambda", c.lambda);
    c.sampling_strategy = sampling::parse_strategy(j.value("sampling_strategy", std::string("US")));
    c.seed = j.value("seed", c.seed);
    c.memory_budget_mb = j.value("memory_budget_mb", c.memory_budget_mb);
    c.recalibrate_bn = j.value("recalibrate_bn", c.recalibrate_bn);
    c.verbose = j.value("verbose", c.verbose);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("config " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j, std::filesystem::absolute(path).parent_path());
}

json to_json(const TrainConfig& c) {
  json j = prep_to_json(c.preprocessing);
  j["manifest"] = c.manifest.string();
  j["val_manifest"] = c.val_manifest.string();
  j["cache_dir"] = c.cache_dir.string();
  j["checkpoint_dir"] = c.checkpoint_dir.string();
  j["network"] = c.network;
  j["optimizer"] = {{"beta1", c.beta1}, {"beta2", c.beta2}, {"weight_decay", c.weight_decay}};
  j["lr"] = c.lr;
  j["lr_step_epochs"] = c.lr_step_epochs;
  j["lr_gamma"] = c.lr_gamma;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["lambda"] = c.lambda;
  j["sampling_strategy"] = std::string(sampling::to_string(c.sampling_strategy));
  j["seed"] = c.seed;
  j["memory_budget_mb"] = c.memory_budget_mb;
  j["recalibrate_bn"] = c.recalibrate_bn;
  return j;
}

double learning_rate(const TrainConfig& c, int epoch) {
  const int drops = std::max(0, epoch - 1) / c.lr_step_epochs;
  return c.lr * std::pow(c.lr_gamma, drops);
}

// ---------------------------------------------------------------------------
// Sample storage

namespace {

struct Sample {
  std::string scan_id;
  int label = 0;
  double ratio = 0.0;
  SamplingGroup group = SamplingGroup::kCapSmall;
  torch::Tensor image;  // [1, D, H, W]
  torch::Tensor mask;   // [D, H, W]
  bool has_infection = false;
};

torch::Tensor to_tensor(const Volume& v) {
  const auto& s = v.shape();
  return torch::from_blob(const_cast<float*>(v.voxels().data()), {s.d, s.h, s.w}, torch::kFloat32)
      .clone();
}

// Preprocessed samples for one manifest, in manifest order. Keeps tensors in
// memory when they fit the budget, otherwise reloads from the cache.
class SampleStore {
 public:
  SampleStore(const Manifest& manifest, const prep::SampleCache& cache, std::int64_t budget_mb)
      : manifest_(manifest), cache_(cache) {
    const auto& shape = cache.config().target_shape;
    const std::int64_t bytes_per = shape.voxels() * 8;
    resident_ = bytes_per * static_cast<std::int64_t>(manifest.size()) <= budget_mb * (1 << 20);
    samples_.reserve(manifest.size());
    for (const auto& r : manifest.records) {
      Sample s = load(r);
      if (!resident_) {
        s.image = torch::Tensor();
        s.mask = torch::Tensor();
      }
      samples_.push_back(std::move(s));
    }
  }

  std::size_t size() const { return samples_.size(); }
  const Sample& meta(std::size_t i) const { return samples_[i]; }

  Sample get(std::size_t i) const {
    return resident_ ? samples_[i] : load(manifest_.records[i]);
  }

  std::vector<SamplingGroup> groups() const {
    std::vector<SamplingGroup> g;
    for (const auto& s : samples_) g.push_back(s.group);
    return g;
  }

 private:
  Sample load(const ScanRecord& r) const {
    const prep::PreprocessedSample p = cache_.get(r);
    Sample s;
    s.scan_id = r.scan_id;
    s.label = binary_label(r.class_label);
    s.ratio = r.infection_ratio.value_or(p.ratio);
    s.group = assign_sampling_group(r.class_label, s.ratio);
    s.image = to_tensor(p.image).unsqueeze(0);
    s.mask = to_tensor(p.infection_mask);
    s.has_infection = p.infection_mask.count_positive() > 0;
    return s;
  }

  const Manifest& manifest_;
  const prep::SampleCache& cache_;
  bool resident_ = true;
  std::vector<Sample> samples_;
};

struct Batch {
  torch::Tensor images;  // [B, 1, D, H, W]
  torch::Tensor masks;   // [B, D, H, W]
  torch::Tensor labels;  // [B] float
  std::vector<Sample> samples;
};

Batch make_batch(const SampleStore& store, std::span<const std::size_t> idx) {
  Batch b;
  std::vector<torch::Tensor> images, masks;
  std::vector<float> labels;
  for (const auto i : idx) {
    Sample s = store.get(i);
    images.push_back(s.image);
    masks.push_back(s.mask);
    labels.push_back(static_cast<float>(s.label));
    b.samples.push_back(std::move(s));
  }
  b.images = torch::stack(images);
  b.masks = torch::stack(masks);
  b.labels = torch::tensor(labels);
  return b;
}

std::vector<ScanPrediction> predict(net::AttentionResNet& model, const SampleStore& store,
                                    int batch_size, const Shape3& input_shape) {
  torch::NoGradGuard no_grad;
  model->eval();
  const auto& cfg = model->config();
  std::vector<ScanPrediction> out;
  std::vector<std::size_t> idx(store.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    const Batch b = make_batch(store, std::span(idx).subspan(start, end - start));
    const net::ForwardOutput fo = model->forward(b.images);
    const auto probs = torch::sigmoid(fo.logit).to(torch::kFloat64);
    const auto t = net::soft_mask(fo.raw_attention, input_shape, cfg.alpha, cfg.beta).contiguous();
    for (std::size_t k = 0; k < b.samples.size(); ++k) {
      const Sample& s = b.samples[k];
      ScanPrediction p;
      p.scan_id = s.scan_id;
      p.label = s.label;
      p.ratio = s.ratio;
      p.probability = probs[static_cast<std::int64_t>(k)].item<double>();
      if (s.has_infection) {
        const auto tk = t[static_cast<std::int64_t>(k)].contiguous();
        const auto mk = s.mask.contiguous();
        p.attention_dice = metrics::dice(std::span(tk.data_ptr<float>(), tk.numel()),
                                         std::span(mk.data_ptr<float>(), mk.numel()));
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

// Replaces the BatchNorm running statistics with a cumulative average over
// the training set under the current weights. The exponential averages
// collected during the epoch trail weights that moved under Adam, which makes
// eval-mode outputs collapse on small data.
void recalibrate_batch_norm(net::AttentionResNet& model, const SampleStore& store,
                            int batch_size) {
  std::vector<torch::nn::BatchNorm3dImpl*> norms;
  for (auto& m : model->modules(/*include_self=*/false)) {
    if (auto* bn = m->as<torch::nn::BatchNorm3d>()) norms.push_back(bn);
  }
  std::vector<std::optional<double>> momentum;
  for (auto* bn : norms) {
    momentum.push_back(bn->options.momentum());
    bn->reset_running_stats();
    bn->options.momentum(std::nullopt);
  }
  torch::NoGradGuard no_grad;
  model->train();
  std::vector<std::size_t> idx(store.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    model->forward(make_batch(store, std::span(idx).subspan(start, end - start)).images);
  }
  for (std::size_t i = 0; i < norms.size(); ++i) norms[i]->options.momentum(momentum[i]);
}

metrics::MetricReport report_predictions(const std::vector<ScanPrediction>& preds) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& p : preds) {
    scores.push_back(p.probability);
    labels.push_back(p.label);
  }
  return metrics::confusion_metrics(scores, labels);
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json to_json(const EpochLog& e) {
  json freq = json::object();
  for (int g = 0; g < kNumSamplingGroups; ++g) {
    freq[std::string(to_string(static_cast<SamplingGroup>(g)))] = e.group_frequencies[g];
  }
  return json{{"epoch", e.epoch},
              {"lr", e.lr},
              {"steps", e.steps},
              {"mean_l_c", e.mean_l_c},
              {"mean_l_ex", opt_json(e.mean_l_ex)},
              {"mean_l_total", e.mean_l_total},
              {"val_auc", opt_json(e.validation.auc)},
              {"validation", e.validation},
              {"group_frequencies", freq}};
}

// ---------------------------------------------------------------------------
// Training

RunResult train(const TrainConfig& config, const Manifest& train_set, const Manifest& val_set,
                const std::string& run_name) {
  config.validate();
  validate_manifest(train_set);
  validate_manifest(val_set);
  const prep::SampleCache cache(config.cache_dir, config.preprocessing);
  const SampleStore train_store(train_set, cache, config.memory_budget_mb);
  const SampleStore val_store(val_set, cache, config.memory_budget_mb);
  const Shape3 input_shape = config.preprocessing.target_shape;
  const std::size_t n = train_store.size();

  const auto members = sampling::GroupMembers::from_groups(train_store.groups());
  sampling::SamplerProbabilities probs;
  if (config.sampling_strategy == sampling::Strategy::kSizeBalanced) {
    try {
      probs = sampling::size_balanced_probabilities(members.counts());
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(e.what()) +
                            ": size-balanced sampling needs all four groups; use the US strategy");
    }
  }

  net::AttentionResNet model = net::init_model(config.network, config.seed);
  net::AttentionResNet best_model = net::init_model(config.network, config.seed);
  torch::optim::Adam optimizer(model->parameters(),
                               torch::optim::AdamOptions(config.lr)
                                   .betas({config.beta1, config.beta2})
                                   .weight_decay(config.weight_decay));
  sampling::Rng draw_rng(synth::mix64(config.seed ^ 0x73616d706c65ull));

  std::filesystem::create_directories(config.checkpoint_dir);
  const auto ckpt_stem = config.checkpoint_dir / run_name;
  std::ofstream log(config.checkpoint_dir / (run_name + ".log.jsonl"), std::ios::trunc);

  RunResult result;
  const auto& cfg = config.network;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = learning_rate(config, epoch);
    for (auto& group : optimizer.param_groups()) {
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
    const std::vector<std::size_t> order =
        config.sampling_strategy == sampling::Strategy::kUniform
            ? sampling::uniform_epoch(n, synth::mix64(config.seed + static_cast<std::uint64_t>(epoch)))
            : sampling::size_balanced_epoch(members, probs, n, draw_rng);

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    for (const auto i : order) ++entry.group_frequencies[static_cast<int>(train_store.meta(i).group)];

    model->train();
    double sum_l_c = 0.0, sum_l_ex = 0.0, sum_total = 0.0;
    std::int64_t n_covid = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      const auto end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
      const Batch b = make_batch(train_store, std::span(order).subspan(start, end - start));
      const net::ForwardOutput fo = model->forward(b.images);
      const auto l_c = loss::classification_loss(fo.logit, b.labels);
      torch::Tensor l_ex;
      const auto covid = torch::nonzero(b.labels > 0.5f).view({-1});
      if (covid.numel() > 0 && config.lambda > 0.0) {
        const auto t = net::soft_mask(fo.raw_attention.index_select(0, covid), input_shape,
                                      cfg.alpha, cfg.beta);
        l_ex = loss::attention_loss(t, b.masks.index_select(0, covid));
      }
      const loss::LossBreakdown lb = loss::combine(l_c, l_ex, config.lambda);
      optimizer.zero_grad();
      lb.l_total.backward();
      optimizer.step();

      ++entry.steps;
      sum_l_c += l_c.sum().item<double>();
      sum_total += lb.l_total.item<double>();
      if (l_ex.defined()) {
        sum_l_ex += l_ex.sum().item<double>();
        n_covid += l_ex.numel();
      }
    }
    entry.mean_l_c = sum_l_c / static_cast<double>(n);
    entry.mean_l_total = sum_total / entry.steps;
    if (n_covid > 0) entry.mean_l_ex = sum_l_ex / static_cast<double>(n_covid);

    if (config.recalibrate_bn) recalibrate_batch_norm(model, train_store, config.batch_size);
    auto preds = predict(model, val_store, config.batch_size, input_shape);
    entry.validation = report_predictions(preds);

    const auto& auc = entry.validation.auc;
    const bool improved =
        result.best_epoch == 0 || (auc && (!result.best_val_auc || *auc > *result.best_val_auc));
    if (improved) {
      result.best_epoch = epoch;
      result.best_val_auc = auc;
      result.best_val_predictions = std::move(preds);
      net::copy_state(best_model, model);
      net::CheckpointMeta meta{cfg, epoch, auc, config.seed,
                               std::string(sampling::to_string(config.sampling_strategy)),
                               prep_to_json(config.preprocessing)};
      net::save_checkpoint(ckpt_stem, best_model, meta);
    }
    log << to_json(entry).dump() << '\n';
    log.flush();
    if (config.verbose) {
      std::cerr << run_name << " epoch " << epoch << " lr " << lr << " l_c " << entry.mean_l_c
                << " l_ex " << entry.mean_l_ex.value_or(0.0) << " val_auc "
                << (auc ? std::to_string(*auc) : "n/a") << '\n';
    }
    result.epochs.push_back(std::move(entry));
  }
  result.best_checkpoint = ckpt_stem;
  return result;
}

RunResult train(const TrainConfig& config) {
  const Manifest all = load_manifest(config.manifest);
  if (!config.val_manifest.empty()) {
    return train(config, all, load_manifest(config.val_manifest),
                 std::string(sampling::to_string(config.sampling_strategy)));
  }
  const auto folds = patient_level_folds(all, 5, config.seed);
  return train(config, folds[0].train, folds[0].validation,
               std::string(sampling::to_string(config.sampling_strategy)));
}

// ---------------------------------------------------------------------------
// Ensemble and reporting

json to_json(const EnsemblePrediction& p) {
  return json{{"scan_id", p.scan_id}, {"label", p.label}, {"ratio", p.ratio}, {"p_us", p.p_us},
              {"p_ss", p.p_ss},       {"w", p.w},         {"p_final", p.p_final}};
}

std::vector<EnsemblePrediction> fuse_predictions(const std::vector<ScanPrediction>& us,
                                                 const std::vector<ScanPrediction>& ss) {
  if (us.size() != ss.size()) throw ContractError("prediction lists differ in length");
  std::vector<EnsemblePrediction> out;
  for (std::size_t i = 0; i < us.size(); ++i) {
    if (us[i].scan_id != ss[i].scan_id) throw ContractError("prediction lists are not aligned");
    EnsemblePrediction e;
    e.scan_id = us[i].scan_id;
    e.label = us[i].label;
    e.ratio = us[i].ratio;
    e.p_us = us[i].probability;
    e.p_ss = ss[i].probability;
    e.w = metrics::dual_weight(e.ratio);
    e.p_final = metrics::fuse(e.p_us, e.p_ss, e.w);
    out.push_back(e);
  }
  return out;
}

StrategyReports report_for(const std::vector<double>& scores, const std::vector<int>& labels,
                           const std::vector<double>& ratios) {
  StrategyReports r;
  r.overall = metrics::confusion_metrics(scores, labels);
  r.bands = metrics::groupwise_report(scores, labels, ratios);
  return r;
}

namespace {

json to_json(const StrategyReports& r) {
  return json{{"overall", r.overall}, {"bands", metrics::to_json(r.bands)}};
}

StrategyReports report_scan_predictions(const std::vector<ScanPrediction>& preds) {
  std::vector<double> s, q;
  std::vector<int> l;
  for (const auto& p : preds) {
    s.push_back(p.probability);
    l.push_back(p.label);
    q.push_back(p.ratio);
  }
  return report_for(s, l, q);
}

StrategyReports report_fused(const std::vector<EnsemblePrediction>& preds) {
  std::vector<double> s, q;
  std::vector<int> l;
  for (const auto& p : preds) {
    s.push_back(p.p_final);
    l.push_back(p.label);
    q.push_back(p.ratio);
  }
  return report_for(s, l, q);
}

json run_summary(const RunResult& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) epochs.push_back(to_json(e));
  double dice_sum = 0.0;
  int dice_n = 0;
  for (const auto& p : r.best_val_predictions) {
    if (p.attention_dice && p.label == 1) {
      dice_sum += *p.attention_dice;
      ++dice_n;
    }
  }
  return json{{"best_checkpoint", r.best_checkpoint.string()},
              {"best_epoch", r.best_epoch},
              {"best_val_auc", opt_json(r.best_val_auc)},
              {"validation", report_predictions(r.best_val_predictions)},
              {"mean_covid_attention_dice", dice_n ? json(dice_sum / dice_n) : json(nullptr)},
              {"epochs", epochs}};
}

}  // namespace

CrossValidationResult cross_validate(const TrainConfig& config, int k,
                                     const std::vector<sampling::Strategy>& strategies) {
  config.validate();
  if (strategies.empty()) throw ContractError("cross_validate needs at least one strategy");
  const Manifest all = load_manifest(config.manifest);
  const auto folds = patient_level_folds(all, k, config.seed);

  CrossValidationResult cv;
  std::vector<ScanPrediction> all_us, all_ss;
  std::vector<EnsemblePrediction> all_ds;
  json fold_json = json::array();
  for (int f = 0; f < k; ++f) {
    FoldResult fr;
    fr.fold = f;
    TrainConfig fc = config;
    fc.seed = synth::mix64(config.seed ^ (0x666f6c64ull + static_cast<std::uint64_t>(f)));
    json fj{{"fold", f}, {"seed", fc.seed}};
    json val_ids = json::array();
    for (const auto& r : folds[f].validation.records) val_ids.push_back(r.scan_id);
    fj["validation_scans"] = val_ids;
    for (const auto s : strategies) {
      fc.sampling_strategy = s;
      const std::string name = "fold" + std::to_string(f) + "_" + std::string(sampling::to_string(s));
      RunResult rr = train(fc, folds[f].train, folds[f].validation, name);
      fj[std::string(sampling::to_string(s))] = run_summary(rr);
      auto& dst = s == sampling::Strategy::kUniform ? all_us : all_ss;
      dst.insert(dst.end(), rr.best_val_predictions.begin(), rr.best_val_predictions.end());
      (s == sampling::Strategy::kUniform ? fr.us : fr.ss) = std::move(rr);
    }
    if (fr.us && fr.ss) {
      fr.predictions = fuse_predictions(fr.us->best_val_predictions, fr.ss->best_val_predictions);
      all_ds.insert(all_ds.end(), fr.predictions.begin(), fr.predictions.end());
      std::vector<double> s;
      std::vector<int> l;
      for (const auto& p : fr.predictions) {
        s.push_back(p.p_final);
        l.push_back(p.label);
      }
      fj["DS"] = json{{"validation", metrics::confusion_metrics(s, l)}};
    }
    fold_json.push_back(fj);
    cv.folds.push_back(std::move(fr));
  }

  json report{{"k", k}, {"seed", config.seed}, {"config", to_json(config)}, {"folds", fold_json}};
  json combined = json::object();
  if (!all_us.empty()) {
    cv.us = report_scan_predictions(all_us);
    combined["US"] = to_json(*cv.us);
  }
  if (!all_ss.empty()) {
    cv.ss = report_scan_predictions(all_ss);
    combined["SS"] = to_json(*cv.ss);
  }
  if (!all_ds.empty()) {
    cv.ds = report_fused(all_ds);
    combined["DS"] = to_json(*cv.ds);
    json rows = json::array();
    for (const auto& p : all_ds) rows.push_back(to_json(p));
    report["predictions"] = rows;

    // Paired t-tests on per-fold AUC.
    std::vector<double> auc_us, auc_ss, auc_ds;
    bool complete = true;
    for (const auto& fr : cv.folds) {
      std::vector<double> s;
      std::vector<int> l;
      for (const auto& p : fr.predictions) {
        s.push_back(p.p_final);
        l.push_back(p.label);
      }
      const auto ds = metrics::confusion_metrics(s, l).auc;
      const auto us = report_predictions(fr.us->best_val_predictions).auc;
      const auto ss = report_predictions(fr.ss->best_val_predictions).auc;
      if (!ds || !us || !ss) {
        complete = false;
        break;
      }
      auc_ds.push_back(*ds);
      auc_us.push_back(*us);
      auc_ss.push_back(*ss);
    }
    if (complete && auc_ds.size() >= 2) {
      report["paired_t_tests"] = {
          {"auc_DS_vs_US", metrics::paired_t_test(auc_ds, auc_us)},
          {"auc_DS_vs_SS", metrics::paired_t_test(auc_ds, auc_ss)},
          {"auc_SS_vs_US", metrics::paired_t_test(auc_ss, auc_us)}};
    }
  }
  report["combined"] = combined;
  cv.report = report;

  std::filesystem::create_directories(config.checkpoint_dir);
  std::ofstream out(config.checkpoint_dir / "cv_report.json", std::ios::trunc);
  out << report.dump(2) << '\n';
  return cv;
}

// ---------------------------------------------------------------------------
// Evaluation and export

EvaluationResult evaluate(const std::filesystem::path& us_checkpoint,
                          const std::filesystem::path& ss_checkpoint, const Manifest& manifest,
                          const std::filesystem::path& cache_dir, const std::filesystem::path& out) {
  auto us = net::load_checkpoint(us_checkpoint);
  auto ss = net::load_checkpoint(ss_checkpoint);
  if (!(us.meta.config == ss.meta.config)) {
    throw ValidationError("US and SS checkpoints use different network configurations");
  }
  if (us.meta.preprocessing != ss.meta.preprocessing) {
    throw ValidationError("US and SS checkpoints were trained on different preprocessing");
  }
  const prep::PrepConfig pc = prep_from_json(us.meta.preprocessing);
  const prep::SampleCache cache(cache_dir, pc);
  const SampleStore store(manifest, cache, 2048);
  const auto p_us = predict(us.model, store, 4, pc.target_shape);
  const auto p_ss = predict(ss.model, store, 4, pc.target_shape);

  EvaluationResult r;
  r.predictions = fuse_predictions(p_us, p_ss);
  r.us = report_scan_predictions(p_us);
  r.ss = report_scan_predictions(p_ss);
  r.ensemble = report_fused(r.predictions);

  json rows = json::array();
  for (const auto& p : r.predictions) rows.push_back(to_json(p));
  r.report = json{{"overall", r.ensemble.overall},
                  {"bands", metrics::to_json(r.ensemble.bands)},
                  {"US", to_json(r.us)},
                  {"SS", to_json(r.ss)},
                  {"predictions", rows}};
  if (!out.empty()) {
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw IoError("cannot write " + out.string());
    f << r.report.dump(2) << '\n';
  }
  return r;
}

namespace {

// Grey image with the heat map blended into the red channel.
void write_overlay_ppm(const std::filesystem::path& path, const torch::Tensor& image,
                       const torch::Tensor& heat) {
  const auto img = image.contiguous();
  const auto ht = heat.contiguous();
  const auto rows = img.size(0), cols = img.size(1);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << cols << ' ' << rows << "\n255\n";
  const float* pi = img.data_ptr<float>();
  const float* ph = ht.data_ptr<float>();
  for (std::int64_t i = 0; i < rows * cols; ++i) {
    const float g = std::clamp(pi[i], 0.0f, 1.0f);
    const float a = 0.6f * std::clamp(ph[i], 0.0f, 1.0f);
    const auto px = [](float v) { return static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))); };
    const char rgb[3] = {px((1.0f - a) * g + a), px((1.0f - a) * g), px((1.0f - a) * g)};
    out.write(rgb, 3);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void export_map(const std::filesystem::path& out_dir, const std::string& id, const std::string& kind,
                const torch::Tensor& map, const torch::Tensor& image, const Spacing3& spacing,
                std::vector<std::filesystem::path>& written) {
  const auto m = map.contiguous();
  const Shape3 shape{m.size(0), m.size(1), m.size(2)};
  std::vector<float> voxels(m.data_ptr<float>(), m.data_ptr<float>() + m.numel());
  const auto nii = out_dir / (id + "_" + kind + ".nii");
  nifti::write(nii, Volume(shape, spacing, std::move(voxels)));
  written.push_back(nii);
  const auto axial = out_dir / (id + "_" + kind + "_axial.ppm");
  write_overlay_ppm(axial, image[shape.d / 2], m[shape.d / 2]);
  written.push_back(axial);
  const auto coronal = out_dir / (id + "_" + kind + "_coronal.ppm");
  write_overlay_ppm(coronal, image.select(1, shape.h / 2), m.select(1, shape.h / 2));
  written.push_back(coronal);
}

}  // namespace

std::vector<std::filesystem::path> export_attention(const std::filesystem::path& checkpoint,
                                                    const Manifest& manifest,
                                                    const std::filesystem::path& out_dir,
                                                    const std::filesystem::path& cache_dir,
                                                    bool with_grad_cam) {
  auto ck = net::load_checkpoint(checkpoint);
  const prep::PrepConfig pc = prep_from_json(ck.meta.preprocessing);
  const prep::SampleCache cache(cache_dir, pc);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::filesystem::path> written;
  ck.model->eval();
  for (const auto& r : manifest.records) {
    const prep::PreprocessedSample s = cache.get(r);
    const auto image = to_tensor(s.image);
    torch::Tensor t;
    {
      torch::NoGradGuard no_grad;
      const auto fo = ck.model->forward(image.unsqueeze(0));
      t = net::soft_mask(fo.raw_attention, pc.target_shape, ck.meta.config.alpha,
                         ck.meta.config.beta)[0];
    }
    export_map(out_dir, r.scan_id, "attention", t, image, s.image.spacing(), written);
    if (with_grad_cam) {
      const auto gc = net::grad_cam(ck.model, image.unsqueeze(0));
      export_map(out_dir, r.scan_id, "gradcam", gc.heatmap[0].detach(), image, s.image.spacing(),
                 written);
    }
  }
  return written;
}

std::size_t preprocess_all(const Manifest& manifest, const prep::SampleCache& cache) {
  for (const auto& r : manifest.records) {
    if (!cache.contains(r)) cache.put(prep::preprocess(r, cache.config()), r);
  }
  return manifest.size();
}

}  // namespace dsan::harness

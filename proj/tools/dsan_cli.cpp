// Command-line driver for the dual-sampling attention pipeline.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsan/error.hpp"
#include "dsan/harness.hpp"
#include "dsan/synth.hpp"

namespace fs = std::filesystem;
using namespace dsan;

namespace {

Shape3 shape_from(const std::vector<std::int64_t>& v) { return {v.at(0), v.at(1), v.at(2)}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-sampling attention network for COVID-19 vs CAP classification on 3D CT"};
  app.require_subcommand(1);

  // gen-data
  int n_covid = 60, n_cap = 40;
  std::uint64_t seed = 0;
  fs::path out;
  std::vector<std::int64_t> phantom_shape{40, 72, 72};
  std::vector<double> phantom_spacing{4.3, 2.4, 2.4};
  double lung_noise_hu = 60.0;
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic CT phantoms and a manifest");
  gen->add_option("--n-covid", n_covid, "Number of COVID-like phantoms")->capture_default_str();
  gen->add_option("--n-cap", n_cap, "Number of CAP-like phantoms")->capture_default_str();
  gen->add_option("--seed", seed, "Master seed")->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--shape", phantom_shape, "Phantom grid D H W")->expected(3)->capture_default_str();
  gen->add_option("--spacing", phantom_spacing, "Phantom spacing z y x (mm)")->expected(3)->capture_default_str();
  gen->add_option("--lung-noise", lung_noise_hu, "Half-width of healthy-lung voxel noise (HU)")->capture_default_str();

  // preprocess
  fs::path manifest_path, cache_dir;
  std::vector<std::int64_t> input_shape{138, 256, 256};
  auto* pre = app.add_subcommand("preprocess", "Preprocess every scan of a manifest into the cache");
  pre->add_option("--manifest", manifest_path, "JSON-Lines manifest")->required();
  pre->add_option("--cache-dir", cache_dir, "Cache directory")->required();
  pre->add_option("--shape", input_shape, "Canonical grid D H W")->expected(3)->capture_default_str();

  // train
  fs::path config_path;
  std::string strategy;
  auto* train = app.add_subcommand("train", "Train one model (US or SS)");
  train->add_option("--config", config_path, "Training config (JSON)")->required();
  train->add_option("--strategy", strategy, "Override sampling strategy")->check(CLI::IsMember({"US", "SS"}));

  // cross-validate
  int k = 5;
  auto* cv = app.add_subcommand("cross-validate", "Patient-level k-fold CV with both strategies");
  cv->add_option("--config", config_path, "Training config (JSON)")->required();
  cv->add_option("--k", k, "Number of folds")->capture_default_str();
  std::vector<std::string> strategy_names{"US", "SS"};
  cv->add_option("--strategies", strategy_names, "Strategies to train per fold (US, SS)")
      ->capture_default_str();

  // evaluate
  fs::path us_ckpt, ss_ckpt;
  auto* ev = app.add_subcommand("evaluate", "Fuse US and SS checkpoints and report metrics");
  ev->add_option("--us-ckpt", us_ckpt, "Uniform-sampling checkpoint")->required();
  ev->add_option("--ss-ckpt", ss_ckpt, "Size-balanced checkpoint")->required();
  ev->add_option("--manifest", manifest_path, "Manifest to score")->required();
  ev->add_option("--out", out, "Report path (JSON)")->required();
  ev->add_option("--cache-dir", cache_dir, "Preprocessing cache (default: <out dir>/cache)");

  // export-attention
  fs::path ckpt;
  bool with_grad_cam = false;
  auto* ex = app.add_subcommand("export-attention", "Write attention maps and overlays per scan");
  ex->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ex->add_option("--manifest", manifest_path, "Manifest")->required();
  ex->add_option("--out", out, "Output directory")->required();
  ex->add_option("--cache-dir", cache_dir, "Preprocessing cache (default: <out>/cache)");
  ex->add_flag("--grad-cam", with_grad_cam, "Also export the Grad-CAM baseline");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      synth::DatasetOptions opts;
      opts.shape = shape_from(phantom_shape);
      opts.spacing = {phantom_spacing.at(0), phantom_spacing.at(1), phantom_spacing.at(2)};
      opts.lung_noise_hu = lung_noise_hu;
      const Manifest m = synth::generate_dataset(n_covid, n_cap, seed, out, opts);
      std::cout << "wrote " << m.size() << " phantoms and " << (out / "manifest.jsonl").string() << '\n';
    } else if (*pre) {
      prep::PrepConfig pc;
      pc.target_shape = shape_from(input_shape);
      const prep::SampleCache cache(cache_dir, pc);
      const auto n = harness::preprocess_all(load_manifest(manifest_path), cache);
      std::cout << "preprocessed " << n << " scans into " << cache_dir.string() << '\n';
    } else if (*train) {
      harness::TrainConfig c = harness::load_train_config(config_path);
      if (!strategy.empty()) c.sampling_strategy = sampling::parse_strategy(strategy);
      c.verbose = true;
      const auto r = harness::train(c);
      std::cout << "best epoch " << r.best_epoch << " val AUC "
                << (r.best_val_auc ? std::to_string(*r.best_val_auc) : "n/a") << " checkpoint "
                << r.best_checkpoint.string() << '\n';
    } else if (*cv) {
      harness::TrainConfig c = harness::load_train_config(config_path);
      c.verbose = true;
      std::vector<sampling::Strategy> strategies;
      for (const auto& name : strategy_names) strategies.push_back(sampling::parse_strategy(name));
      const auto r = harness::cross_validate(c, k, strategies);
      if (r.ds && r.ds->overall.auc) std::cout << "combined DS validation AUC " << *r.ds->overall.auc << '\n';
      std::cout << "report: " << (c.checkpoint_dir / "cv_report.json").string() << '\n';
    } else if (*ev) {
      if (cache_dir.empty()) cache_dir = fs::absolute(out).parent_path() / "cache";
      const auto r = harness::evaluate(us_ckpt, ss_ckpt, load_manifest(manifest_path), cache_dir, out);
      if (r.ensemble.overall.auc) std::cout << "DS AUC " << *r.ensemble.overall.auc << '\n';
      std::cout << "report: " << out.string() << '\n';
    } else if (*ex) {
      if (cache_dir.empty()) cache_dir = out / "cache";
      const auto files = harness::export_attention(ckpt, load_manifest(manifest_path), out, cache_dir, with_grad_cam);
      std::cout << "wrote " << files.size() << " files to " << out.string() << '\n';
    }
  } catch (const dsan::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

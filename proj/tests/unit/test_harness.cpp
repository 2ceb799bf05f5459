#include "support/doctest_torch.hpp"

#include <fstream>
#include <map>
#include <set>

#include "dsan/error.hpp"
#include "dsan/harness.hpp"
#include "dsan/nifti.hpp"
#include "dsan/synth.hpp"
#include "support/oracles.hpp"

using namespace dsan;
using namespace dsan::harness;
using nlohmann::json;

namespace {

// Five scans per sampling group on a small grid.
synth::DatasetOptions small_options() {
  synth::DatasetOptions o;
  o.shape = {24, 48, 48};
  o.spacing = {5.0, 3.0, 3.0};
  o.ratio_law.covid = {{0.5, 0.004, 0.02}, {0.5, 0.05, 0.12}};
  o.ratio_law.cap = {{0.5, 0.0007, 0.0009}, {0.5, 0.004, 0.02}};
  return o;
}

TrainConfig small_config(const oracle::TempDir& dir) {
  TrainConfig c;
  c.manifest = dir / "data" / "manifest.jsonl";
  c.cache_dir = dir / "cache";
  c.checkpoint_dir = dir / "ck";
  c.network = net::NetworkConfig::tiny();
  c.preprocessing.target_spacing = {5.0, 3.0, 3.0};
  c.preprocessing.target_shape = {16, 32, 32};
  c.batch_size = 3;
  c.epochs = 1;
  c.seed = 5;
  return c;
}

Manifest subset(const Manifest& m, std::initializer_list<int> idx) {
  Manifest out;
  for (int i : idx) out.records.push_back(m.records[i]);
  return out;
}

struct Fixture {
  oracle::TempDir dir{"dsan_harness"};
  Manifest data;
  TrainConfig config;
  Fixture() {
    data = synth::generate_dataset(10, 10, 77, dir / "data", small_options());
    config = small_config(dir);
  }
};

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  for (int e = 1; e <= 5; ++e) CHECK(learning_rate(c, e) == doctest::Approx(2e-4));
  CHECK(learning_rate(c, 6) == doctest::Approx(2e-5));
  CHECK(learning_rate(c, 10) == doctest::Approx(2e-5));
  CHECK(learning_rate(c, 11) == doctest::Approx(2e-6));
  CHECK(learning_rate(c, 16) == doctest::Approx(2e-7));
}

TEST_CASE("training config JSON") {
  oracle::TempDir dir;
  const json j = {{"manifest", "data/m.jsonl"},
                  {"network", {{"block_counts", {2, 2, 2, 2}}, {"base_channels", 8}}},
                  {"input_shape", {32, 64, 64}},
                  {"optimizer", {{"beta1", 0.8}}},
                  {"batch_size", 4},
                  {"sampling_strategy", "SS"},
                  {"seed", 12}};
  std::ofstream(dir / "cfg.json") << j.dump();
  const TrainConfig c = load_train_config(dir / "cfg.json");
  CHECK(c.manifest == (dir.path() / "data" / "m.jsonl").lexically_normal());
  CHECK(c.network.base_channels == 8);
  CHECK(c.preprocessing.target_shape == (Shape3{32, 64, 64}));
  CHECK(c.beta1 == 0.8);
  CHECK(c.beta2 == 0.999);
  CHECK(c.weight_decay == 1e-4);
  CHECK(c.lr == 2e-4);
  CHECK(c.lambda == 0.5);
  CHECK(c.batch_size == 4);
  CHECK(c.sampling_strategy == sampling::Strategy::kSizeBalanced);
  CHECK(c.seed == 12);

  const TrainConfig back = train_config_from_json(to_json(c), "/");
  CHECK(back.manifest == c.manifest);
  CHECK(back.network == c.network);
  CHECK(back.preprocessing.target_shape == c.preprocessing.target_shape);

  std::ofstream(dir / "bad.json") << "{\"manifest\": 3}";
  CHECK_THROWS_AS(load_train_config(dir / "bad.json"), ParseError);
  std::ofstream(dir / "bad2.json") << "{";
  CHECK_THROWS_AS(load_train_config(dir / "bad2.json"), ParseError);
  CHECK_THROWS_AS(load_train_config(dir / "none.json"), IoError);
  json stride = j;
  stride["network"]["stride_plan"] = {1, 2, 1, 2};
  CHECK_THROWS_AS(train_config_from_json(stride, dir.path()), ContractError);
}

TEST_CASE("fusing prediction lists") {
  std::vector<ScanPrediction> us = {{"a", 1, 0.0005, 0.9, {}}, {"b", 0, 0.01, 0.2, {}}};
  std::vector<ScanPrediction> ss = {{"a", 1, 0.0005, 0.5, {}}, {"b", 0, 0.01, 0.6, {}}};
  const auto f = fuse_predictions(us, ss);
  CHECK(f[0].w == 0.35);
  CHECK(f[0].p_final == doctest::Approx(0.35 * 0.9 + 0.65 * 0.5));
  CHECK(f[1].w == 0.96);
  CHECK(f[1].p_final == doctest::Approx(0.96 * 0.2 + 0.04 * 0.6));
  std::swap(ss[0], ss[1]);
  CHECK_THROWS_AS(fuse_predictions(us, ss), ContractError);
}

TEST_CASE_FIXTURE(Fixture, "one-epoch smoke run") {
  const Manifest train_set = subset(data, {0, 1, 10, 11});
  const Manifest val_set = subset(data, {2, 3, 12, 13});
  const RunResult r = train(config, train_set, val_set, "smoke");
  REQUIRE(r.epochs.size() == 1);
  CHECK(r.epochs[0].steps == 2);  // ceil(4 / 3)
  CHECK(r.epochs[0].validation.n == 4);
  CHECK(r.best_epoch == 1);
  CHECK(r.best_val_predictions.size() == 4);
  CHECK(std::filesystem::exists(config.checkpoint_dir / "smoke.pt"));
  CHECK(std::filesystem::exists(config.checkpoint_dir / "smoke.json"));
  std::ifstream log(config.checkpoint_dir / "smoke.log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 1);
  std::int64_t freq = 0;
  for (auto n : r.epochs[0].group_frequencies) freq += n;
  CHECK(freq == 4);
}

TEST_CASE_FIXTURE(Fixture, "best checkpoint holds the highest logged AUC") {
  config.epochs = 3;
  config.lr = 1e-3;
  const Manifest train_set = subset(data, {0, 1, 5, 6, 10, 11, 15, 16});
  const Manifest val_set = subset(data, {2, 7, 12, 17});
  const RunResult r = train(config, train_set, val_set, "best");
  double max_auc = -1.0;
  int first_best = 0;
  for (const auto& e : r.epochs) {
    REQUIRE(e.validation.auc.has_value());
    if (*e.validation.auc > max_auc) {
      max_auc = *e.validation.auc;
      first_best = e.epoch;
    }
  }
  REQUIRE(r.best_val_auc.has_value());
  CHECK(*r.best_val_auc == max_auc);
  CHECK(r.best_epoch == first_best);
  const auto ck = net::load_checkpoint(r.best_checkpoint);
  CHECK(ck.meta.val_auc == max_auc);
  CHECK(ck.meta.epoch == first_best);
  CHECK(r.epochs[0].steps == 3);

  SUBCASE("size-balanced sampling over the same data") {
    config.sampling_strategy = sampling::Strategy::kSizeBalanced;
    const RunResult s = train(config, train_set, val_set, "best_ss");
    for (const auto& e : s.epochs) {
      CHECK(e.steps == 3);
      std::int64_t total = 0;
      for (auto n : e.group_frequencies) total += n;
      CHECK(total == 8);
    }
  }
}

TEST_CASE_FIXTURE(Fixture, "size-balanced sampling with an empty group points to US") {
  config.sampling_strategy = sampling::Strategy::kSizeBalanced;
  // No small CAP scans in the training set.
  Manifest train_set, val_set;
  for (const auto& r : data.records) {
    const auto g = assign_sampling_group(r.class_label, *r.infection_ratio);
    (g == SamplingGroup::kCapSmall ? val_set : train_set).records.push_back(r);
  }
  REQUIRE_FALSE(val_set.records.empty());
  try {
    train(config, train_set, val_set, "empty");
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("empty sampling group") != std::string::npos);
    CHECK(msg.find("US") != std::string::npos);
  }
}

TEST_CASE_FIXTURE(Fixture, "evaluate with one checkpoint in both slots") {
  const RunResult r = train(config, subset(data, {0, 10, 15}), subset(data, {1, 11}), "eval");
  const auto out = dir / "report" / "eval.json";
  const EvaluationResult e = evaluate(r.best_checkpoint, r.best_checkpoint, data, config.cache_dir, out);
  REQUIRE(e.predictions.size() == data.records.size());
  for (const auto& p : e.predictions) CHECK(p.p_final == doctest::Approx(p.p_us).epsilon(1e-12));
  std::ifstream in(out);
  const json j = json::parse(in);
  CHECK(j.at("predictions").size() == data.records.size());
  CHECK(j.at("bands").size() == 3);
  for (const auto& b : j.at("bands")) CHECK_FALSE(b.at("empty").get<bool>());

  SUBCASE("mismatched checkpoints are rejected") {
    TrainConfig other = config;
    other.network.base_channels = 4;
    const RunResult o = train(other, subset(data, {0, 10}), subset(data, {1, 11}), "other");
    CHECK_THROWS_AS(evaluate(r.best_checkpoint, o.best_checkpoint, data, config.cache_dir), ValidationError);
  }
}

TEST_CASE("attention export on the canonical grid") {
  oracle::TempDir dir;
  synth::DatasetOptions o;
  o.ratio_law.covid = {{1.0, 0.05, 0.06}};
  const Manifest m = synth::generate_dataset(1, 0, 3, dir / "data", o);
  auto model = net::init_model(net::NetworkConfig::tiny(), 3);
  net::CheckpointMeta meta;
  meta.config = net::NetworkConfig::tiny();
  meta.sampling_strategy = "US";
  meta.preprocessing = {{"target_spacing", {1.25, 0.7168, 0.7168}}, {"input_shape", {138, 256, 256}}};
  net::save_checkpoint(dir / "m", model, meta);

  SUBCASE("attention only") {
    const auto written = export_attention(dir / "m", m, dir / "out", dir / "cache", false);
    CHECK(written.size() == 3);
    const Volume t = nifti::read(dir / "out" / "S0000_attention.nii");
    CHECK(t.shape() == (Shape3{138, 256, 256}));
    for (float v : t.voxels()) REQUIRE((v >= 0.0f && v <= 1.0f));
    CHECK(std::filesystem::exists(dir / "out" / "S0000_attention_axial.ppm"));
    CHECK(std::filesystem::exists(dir / "out" / "S0000_attention_coronal.ppm"));
  }
  SUBCASE("with the baseline heat map") {
    const auto written = export_attention(dir / "m", m, dir / "out", dir / "cache", true);
    CHECK(written.size() == 6);
    const Volume g = nifti::read(dir / "out" / "S0000_gradcam.nii");
    CHECK(g.shape() == (Shape3{138, 256, 256}));
    for (float v : g.voxels()) REQUIRE(v >= 0.0f);
  }
}

TEST_CASE("small cross-validation") {
  oracle::TempDir dir("dsan_cv");
  synth::generate_dataset(10, 10, 77, dir / "data", small_options());
  TrainConfig config = small_config(dir);
  config.batch_size = 4;
  const CrossValidationResult cv = cross_validate(config, 5);
  REQUIRE(cv.folds.size() == 5);
  int checkpoints = 0;
  for (const auto& e : std::filesystem::directory_iterator(config.checkpoint_dir)) {
    if (e.path().extension() == ".pt") ++checkpoints;
  }
  CHECK(checkpoints == 10);
  CHECK(std::filesystem::exists(config.checkpoint_dir / "cv_report.json"));

  std::map<std::string, int> seen;
  for (const auto& f : cv.folds) {
    REQUIRE(f.us.has_value());
    REQUIRE(f.ss.has_value());
    CHECK(f.predictions.size() == f.us->best_val_predictions.size());
    for (const auto& p : f.predictions) ++seen[p.scan_id];
    // ceil(16 / 4) steps for either strategy.
    CHECK(f.us->epochs[0].steps == 4);
    CHECK(f.ss->epochs[0].steps == 4);
  }
  CHECK(seen.size() == 20);
  for (const auto& [id, n] : seen) CHECK(n == 1);
  REQUIRE(cv.ds.has_value());
  CHECK(cv.ds->overall.n == 20);

  SUBCASE("rerun reproduces splits and sampling tables") {
    TrainConfig again = config;
    again.checkpoint_dir = dir / "ck2";
    const CrossValidationResult cv2 = cross_validate(again, 5);
    for (std::size_t f = 0; f < 5; ++f) {
      CHECK(cv.report["folds"][f]["validation_scans"] == cv2.report["folds"][f]["validation_scans"]);
      CHECK(cv.folds[f].ss->epochs[0].group_frequencies == cv2.folds[f].ss->epochs[0].group_frequencies);
      CHECK(cv.folds[f].us->best_epoch == cv2.folds[f].us->best_epoch);
    }
  }
}

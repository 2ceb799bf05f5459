#include <doctest.h>

#include <algorithm>
#include <random>

#include "dsan/error.hpp"
#include "dsan/nifti.hpp"
#include "dsan/synth.hpp"
#include "dsan/volume_prep.hpp"
#include "support/oracles.hpp"

using namespace dsan;
using namespace dsan::prep;

namespace {

Volume ramp(Shape3 s, Spacing3 sp) {
  Volume v(s, sp);
  for (std::size_t i = 0; i < v.size(); ++i) v.storage()[i] = static_cast<float>(i % 97);
  return v;
}

}  // namespace

TEST_CASE("nifti round trip keeps geometry and voxels") {
  oracle::TempDir dir;
  const Volume v = ramp({5, 6, 7}, {1.25, 0.75, 0.5});
  nifti::write(dir / "v.nii", v);
  const Volume back = nifti::read(dir / "v.nii");
  CHECK(back.shape() == v.shape());
  CHECK(back.spacing().z == doctest::Approx(1.25));
  CHECK(back.spacing().x == doctest::Approx(0.5));
  CHECK(std::equal(back.voxels().begin(), back.voxels().end(), v.voxels().begin()));

  Volume mask({3, 3, 3}, {1, 1, 1});
  mask.at(1, 1, 1) = 1.0f;
  nifti::write(dir / "m.nii", mask, nifti::StorageType::kUInt8);
  CHECK(nifti::read(dir / "m.nii") == mask);
  CHECK_THROWS_AS(nifti::write(dir / "bad.nii", Volume({1, 1, 1}, {1, 1, 1}, 0.5f), nifti::StorageType::kUInt8),
                  ContractError);
  CHECK_THROWS_AS(nifti::read(dir / "missing.nii"), IoError);
}

TEST_CASE("resample") {
  const Volume v = ramp({10, 12, 14}, {2.0, 1.0, 1.0});
  SUBCASE("identity spacing leaves the grid unchanged") {
    const Volume r = resample(v, {2.0, 1.0, 1.0}, Interp::kTrilinear);
    CHECK(r == v);
  }
  SUBCASE("halving one axis doubles it") {
    const Volume r = resample(v, {1.0, 1.0, 1.0}, Interp::kTrilinear);
    CHECK(r.shape() == (Shape3{20, 12, 14}));
    CHECK(r.spacing() == Spacing3{1.0, 1.0, 1.0});
  }
  SUBCASE("extent rounds dim * spacing / target") {
    const Volume r = resample(v, {3.0, 0.7, 1.3}, Interp::kNearest);
    CHECK(r.shape() == (Shape3{7, 17, 11}));
  }
  SUBCASE("constant stays constant under trilinear") {
    const Volume c({9, 8, 7}, {1.3, 0.9, 0.8}, -321.5f);
    const Volume r = resample(c, {0.7168, 0.7168, 1.25}, Interp::kTrilinear);
    for (float x : r.voxels()) REQUIRE(x == -321.5f);
  }
  SUBCASE("nearest keeps masks binary") {
    std::mt19937 rng(3);
    Volume m({11, 13, 9}, {1.1, 0.9, 1.7});
    for (float& x : m.voxels()) x = static_cast<float>(rng() % 2);
    const Volume r = resample(m, {0.7168, 0.7168, 1.25}, Interp::kNearest);
    CHECK(r.is_binary());
  }
  CHECK_THROWS_AS(resample(v, {0.0, 1.0, 1.0}, Interp::kTrilinear), ContractError);
  CHECK_THROWS_AS(resample(v, {1.0, -1.0, 1.0}, Interp::kNearest), ContractError);
}

TEST_CASE("window normalisation") {
  CHECK(window_normalize_value(500.0f) == 1.0f);
  CHECK(window_normalize_value(-2000.0f) == 0.0f);
  CHECK(window_normalize_value(-600.0f) == doctest::Approx(0.5).epsilon(1e-7));
  CHECK(window_normalize_value(150.0f) == 1.0f);
  CHECK(window_normalize_value(-1350.0f) == 0.0f);

  // Monotone and the inverse affine maps back.
  float prev = -1.0f;
  for (int hu = -2500; hu <= 1000; hu += 7) {
    const float x = window_normalize_value(static_cast<float>(hu));
    CHECK(x >= prev);
    CHECK((x >= 0.0f && x <= 1.0f));
    prev = x;
  }
  for (int i = 0; i <= 100; ++i) {
    const double x = i / 100.0;
    const auto hu = static_cast<float>(x * 1500.0 - 1350.0);
    CHECK(window_normalize_value(hu) == doctest::Approx(x).epsilon(1e-6));
  }
}

TEST_CASE("lung masking") {
  const Volume v = window_normalize(ramp({4, 5, 6}, {1, 1, 1}));
  CHECK(apply_lung_mask(v, Volume(v.shape(), v.spacing(), 1.0f)) == v);
  const Volume zero = apply_lung_mask(v, Volume(v.shape(), v.spacing(), 0.0f));
  for (float x : zero.voxels()) CHECK(x == 0.0f);
  Volume single(v.shape(), v.spacing(), 0.0f);
  single.at(2, 3, 4) = 1.0f;
  const Volume one = apply_lung_mask(v, single);
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one.voxels()[i] == (i == v.index(2, 3, 4) ? v.voxels()[i] : 0.0f));
  }
  CHECK_THROWS_AS(apply_lung_mask(v, Volume({4, 5, 7}, {1, 1, 1})), ContractError);
}

TEST_CASE("downscale_pad") {
  const Shape3 target{138, 256, 256};
  SUBCASE("canonical input is untouched") {
    const Volume v = ramp(target, {1, 1, 1});
    CHECK(downscale_factor(target, target) == 1.0);
    const Volume out = downscale_pad(v, target, Interp::kTrilinear);
    CHECK(std::equal(out.voxels().begin(), out.voxels().end(), v.voxels().begin()));
  }
  SUBCASE("exact halving") {
    CHECK(downscale_factor({276, 512, 512}, target) == 0.5);
    CHECK(downscaled_shape({276, 512, 512}, target) == target);
  }
  SUBCASE("200x512x512 pads depth 19/19") {
    CHECK(downscale_factor({200, 512, 512}, target) == 0.5);
    CHECK(downscaled_shape({200, 512, 512}, target) == (Shape3{100, 256, 256}));
    const Volume ones({200, 512, 512}, {1, 1, 1}, 1.0f);
    const Volume out = downscale_pad(ones, target, Interp::kTrilinear);
    REQUIRE(out.shape() == target);
    for (std::int64_t z = 0; z < 138; ++z) {
      const float expect = (z >= 19 && z < 119) ? 1.0f : 0.0f;
      CHECK(out.at(z, 0, 0) == expect);
      CHECK(out.at(z, 255, 255) == expect);
      CHECK(out.at(z, 128, 7) == expect);
    }
  }
  SUBCASE("small input is padded, never upscaled") {
    const Volume v({10, 20, 31}, {1, 1, 1}, 2.0f);
    const Volume out = downscale_pad(v, {16, 32, 32}, Interp::kNearest);
    CHECK(out.count_positive() == 10 * 20 * 31);
    CHECK(out.at(3, 6, 0) == 2.0f);   // pads: depth 3/3, height 6/6, width 0/1
    CHECK(out.at(2, 6, 0) == 0.0f);
    CHECK(out.at(3, 6, 31) == 0.0f);
  }
}

TEST_CASE("downscale keeps one scale factor for all axes") {
  std::mt19937 rng(11);
  for (int i = 0; i < 200; ++i) {
    const Shape3 in{16 + static_cast<std::int64_t>(rng() % 400), 16 + static_cast<std::int64_t>(rng() % 700),
                    16 + static_cast<std::int64_t>(rng() % 700)};
    const Shape3 target{138, 256, 256};
    const double s = downscale_factor(in, target);
    const Shape3 c = downscaled_shape(in, target);
    CHECK(s <= 1.0);
    CHECK(c.d == std::llround(s * in.d));
    CHECK(c.h == std::llround(s * in.h));
    CHECK(c.w == std::llround(s * in.w));
    CHECK((c.d <= 138 && c.h <= 256 && c.w <= 256));
  }
}

namespace {

ScanRecord write_phantom(const oracle::TempDir& dir, const std::string& id, ClassLabel label,
                         double ratio) {
  synth::PhantomSpec spec;
  spec.shape = {48, 80, 80};
  spec.spacing = {3.6, 2.3, 2.3};
  spec.class_label = label;
  spec.target_ratio = ratio;
  spec.texture_seed = 99;
  const synth::Phantom p = synth::generate_phantom(spec);
  ScanRecord r;
  r.scan_id = id;
  r.patient_id = id;
  r.class_label = label;
  r.volume_path = dir / (id + "_image.nii");
  r.lung_mask_path = dir / (id + "_lung.nii");
  r.infection_mask_path = dir / (id + "_infection.nii");
  nifti::write(r.volume_path, p.volume);
  nifti::write(r.lung_mask_path, p.lung_mask, nifti::StorageType::kUInt8);
  nifti::write(r.infection_mask_path, p.infection_mask, nifti::StorageType::kUInt8);
  return r;
}

}  // namespace

TEST_CASE("preprocess produces the canonical sample") {
  oracle::TempDir dir;
  const ScanRecord r = write_phantom(dir, "scan", ClassLabel::kCovid, 0.05);
  const PreprocessedSample s = preprocess(r);
  REQUIRE(s.image.shape() == (Shape3{138, 256, 256}));
  REQUIRE(s.infection_mask.shape() == (Shape3{138, 256, 256}));
  CHECK(s.infection_mask.is_binary());
  CHECK(s.ratio == doctest::Approx(0.05).epsilon(0.1));
  for (float x : s.image.voxels()) REQUIRE((x >= 0.0f && x <= 1.0f));

  // Outside the transformed lung mask every voxel is exactly 0.
  const Volume lung_r = resample(nifti::read(r.lung_mask_path), PrepConfig{}.target_spacing, Interp::kNearest);
  const Volume lung = downscale_pad(lung_r, {138, 256, 256}, Interp::kNearest);
  std::mt19937_64 rng(5);
  int checked = 0;
  while (checked < 5000) {
    const std::size_t i = rng() % lung.size();
    if (lung.voxels()[i] != 0.0f) continue;
    REQUIRE(s.image.voxels()[i] == 0.0f);
    ++checked;
  }

  SUBCASE("deterministic") {
    const PreprocessedSample again = preprocess(r);
    CHECK(again.image == s.image);
    CHECK(again.infection_mask == s.infection_mask);
    CHECK(again.ratio == s.ratio);
  }
  SUBCASE("cache round trip") {
    const SampleCache cache(dir / "cache", PrepConfig{});
    CHECK_FALSE(cache.contains(r));
    const PreprocessedSample first = cache.get(r);
    CHECK(cache.contains(r));
    const PreprocessedSample cached = cache.get(r);
    // NIfTI stores spacing in single precision; voxels round-trip exactly.
    CHECK(std::ranges::equal(cached.image.voxels(), first.image.voxels()));
    CHECK(std::ranges::equal(cached.infection_mask.voxels(), first.infection_mask.voxels()));
    CHECK(cached.image.shape() == first.image.shape());
    CHECK(cached.image.spacing().x == doctest::Approx(first.image.spacing().x).epsilon(1e-6));
    CHECK(cached.ratio == first.ratio);
    CHECK(cached.label == ClassLabel::kCovid);

    // Regenerating the source under the same scan id invalidates the entry.
    const ScanRecord regenerated = write_phantom(dir, "scan", ClassLabel::kCovid, 0.02);
    CHECK_FALSE(cache.contains(regenerated));
    const PreprocessedSample fresh = cache.get(regenerated);
    CHECK(fresh.ratio < first.ratio);
    CHECK(cache.contains(regenerated));
  }
}

TEST_CASE("preprocess edge cases") {
  oracle::TempDir dir;
  PrepConfig small;
  small.target_shape = {32, 48, 48};
  SUBCASE("empty infection") {
    const ScanRecord r = write_phantom(dir, "clean", ClassLabel::kCap, 0.0);
    const PreprocessedSample s = preprocess(r, small);
    CHECK(s.ratio == 0.0);
    CHECK(s.infection_mask.count_positive() == 0);
    CHECK(s.image.shape() == small.target_shape);
  }
  SUBCASE("unreadable file names the path") {
    ScanRecord r = write_phantom(dir, "x", ClassLabel::kCap, 0.0);
    r.lung_mask_path = dir / "does_not_exist.nii";
    try {
      preprocess(r, small);
      FAIL("expected an I/O error");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("does_not_exist.nii") != std::string::npos);
    }
  }
  SUBCASE("empty lung") {
    ScanRecord r = write_phantom(dir, "y", ClassLabel::kCap, 0.0);
    nifti::write(r.lung_mask_path, Volume(nifti::read(r.lung_mask_path).shape(), {3.6, 2.3, 2.3}, 0.0f),
                 nifti::StorageType::kUInt8);
    CHECK_THROWS_AS(preprocess(r, small), ValidationError);
  }
  SUBCASE("digest depends on the grid") {
    CHECK(small.digest() != PrepConfig{}.digest());
    CHECK(small.digest() == PrepConfig{{1.25, 0.7168, 0.7168}, {32, 48, 48}}.digest());
  }
}

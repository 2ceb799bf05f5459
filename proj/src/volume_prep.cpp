#include "dsan/volume_prep.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dsan/error.hpp"
#include "dsan/nifti.hpp"

namespace dsan::prep {

namespace {

// Per-axis lookup: source index pair and blend weight for each output index.
struct AxisMap {
  std::vector<std::int64_t> lo;
  std::vector<std::int64_t> hi;
  std::vector<float> frac;
};

AxisMap make_axis_map(std::int64_t in, std::int64_t out, Interp mode) {
  AxisMap m;
  m.lo.resize(out);
  m.hi.resize(out);
  m.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    if (mode == Interp::kNearest) {
      const auto n = static_cast<std::int64_t>(std::floor(src + 0.5));
      m.lo[i] = m.hi[i] = std::min(n, in - 1);
      m.frac[i] = 0.0f;
    } else {
      const auto f = static_cast<std::int64_t>(std::floor(src));
      m.lo[i] = f;
      m.hi[i] = std::min(f + 1, in - 1);
      m.frac[i] = static_cast<float>(src - static_cast<double>(f));
    }
  }
  return m;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::string PrepConfig::digest() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "sp=%.6f,%.6f,%.6f;grid=%lldx%lldx%lld;win=%.1f,%.1f",
                target_spacing.z, target_spacing.y, target_spacing.x,
                static_cast<long long>(target_shape.d), static_cast<long long>(target_shape.h),
                static_cast<long long>(target_shape.w), kWindowLow, kWindowHigh);
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a(buf)));
  return std::string(hex, 12);
}

Volume resize(const Volume& v, Shape3 out_shape, Interp mode) {
  const Shape3 in = v.shape();
  if (out_shape.d < 1 || out_shape.h < 1 || out_shape.w < 1) {
    throw ContractError("resize target must be >= 1 per axis");
  }
  const Spacing3 sp{v.spacing().z * static_cast<double>(in.d) / static_cast<double>(out_shape.d),
                    v.spacing().y * static_cast<double>(in.h) / static_cast<double>(out_shape.h),
                    v.spacing().x * static_cast<double>(in.w) / static_cast<double>(out_shape.w)};
  if (out_shape == in) {
    Volume copy = v;
    copy.set_spacing(sp);
    return copy;
  }
  const AxisMap mz = make_axis_map(in.d, out_shape.d, mode);
  const AxisMap my = make_axis_map(in.h, out_shape.h, mode);
  const AxisMap mx = make_axis_map(in.w, out_shape.w, mode);

  Volume out(out_shape, sp);
  for (std::int64_t z = 0; z < out_shape.d; ++z) {
    const float fz = mz.frac[z];
    for (std::int64_t y = 0; y < out_shape.h; ++y) {
      const float fy = my.frac[y];
      for (std::int64_t x = 0; x < out_shape.w; ++x) {
        if (mode == Interp::kNearest) {
          out.at(z, y, x) = v.at(mz.lo[z], my.lo[y], mx.lo[x]);
          continue;
        }
        const float fx = mx.frac[x];
        auto lerp = [](float a, float b, float t) { return a + (b - a) * t; };
        const float c00 = lerp(v.at(mz.lo[z], my.lo[y], mx.lo[x]), v.at(mz.lo[z], my.lo[y], mx.hi[x]), fx);
        const float c01 = lerp(v.at(mz.lo[z], my.hi[y], mx.lo[x]), v.at(mz.lo[z], my.hi[y], mx.hi[x]), fx);
        const float c10 = lerp(v.at(mz.hi[z], my.lo[y], mx.lo[x]), v.at(mz.hi[z], my.lo[y], mx.hi[x]), fx);
        const float c11 = lerp(v.at(mz.hi[z], my.hi[y], mx.lo[x]), v.at(mz.hi[z], my.hi[y], mx.hi[x]), fx);
        out.at(z, y, x) = lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz);
      }
    }
  }
  return out;
}

Volume resample(const Volume& v, Spacing3 target_spacing, Interp mode) {
  if (!(target_spacing.z > 0.0 && target_spacing.y > 0.0 && target_spacing.x > 0.0)) {
    throw ContractError("target spacing must be positive");
  }
  auto extent = [](std::int64_t dim, double sp, double target) {
    return std::max<std::int64_t>(
        1, std::llround(static_cast<double>(dim) * sp / target));
  };
  const Shape3 in = v.shape();
  const Shape3 out{extent(in.d, v.spacing().z, target_spacing.z),
                   extent(in.h, v.spacing().y, target_spacing.y),
                   extent(in.w, v.spacing().x, target_spacing.x)};
  Volume r = resize(v, out, mode);
  r.set_spacing(target_spacing);
  return r;
}

float window_normalize_value(float hu) {
  const double c = std::clamp(static_cast<double>(hu), kWindowLow, kWindowHigh);
  return static_cast<float>((c - kWindowLow) / (kWindowHigh - kWindowLow));
}

Volume window_normalize(const Volume& v) {
  Volume out = v;
  for (float& x : out.voxels()) x = window_normalize_value(x);
  return out;
}

Volume apply_lung_mask(const Volume& v, const Volume& lung_mask) {
  if (v.shape() != lung_mask.shape()) {
    throw ContractError("image " + to_string(v.shape()) + " and lung mask " +
                        to_string(lung_mask.shape()) + " differ in shape");
  }
  Volume out = v;
  auto dst = out.voxels();
  const auto m = lung_mask.voxels();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = m[i] > 0.5f ? dst[i] : 0.0f;
  return out;
}

double downscale_factor(Shape3 in, Shape3 target) {
  const double s = std::min({static_cast<double>(target.d) / static_cast<double>(in.d),
                             static_cast<double>(target.h) / static_cast<double>(in.h),
                             static_cast<double>(target.w) / static_cast<double>(in.w), 1.0});
  return s;
}

Shape3 downscaled_shape(Shape3 in, Shape3 target) {
  const double s = downscale_factor(in, target);
  auto scaled = [s](std::int64_t dim, std::int64_t cap) {
    return std::clamp<std::int64_t>(std::llround(s * static_cast<double>(dim)), 1, cap);
  };
  return {scaled(in.d, target.d), scaled(in.h, target.h), scaled(in.w, target.w)};
}

Volume downscale_pad(const Volume& v, Shape3 target, Interp mode) {
  const Shape3 content = downscaled_shape(v.shape(), target);
  const Volume scaled = resize(v, content, mode);
  const std::int64_t pd = (target.d - content.d) / 2;
  const std::int64_t ph = (target.h - content.h) / 2;
  const std::int64_t pw = (target.w - content.w) / 2;
  Volume out(target, scaled.spacing(), 0.0f);
  for (std::int64_t z = 0; z < content.d; ++z) {
    for (std::int64_t y = 0; y < content.h; ++y) {
      const float* src = &scaled.voxels()[scaled.index(z, y, 0)];
      std::copy(src, src + content.w, &out.at(z + pd, y + ph, pw));
    }
  }
  return out;
}

PreprocessedSample preprocess(const ScanRecord& record, const PrepConfig& config) {
  const Volume image = nifti::read(record.volume_path);
  const Volume lung = nifti::read(record.lung_mask_path);
  const Volume infection = nifti::read(record.infection_mask_path);
  if (image.shape() != lung.shape() || image.shape() != infection.shape()) {
    throw ContractError("scan " + record.scan_id + ": image and masks differ in shape");
  }

  const Volume image_r = resample(image, config.target_spacing, Interp::kTrilinear);
  const Volume lung_r = resample(lung, config.target_spacing, Interp::kNearest);
  const Volume infection_r = resample(infection, config.target_spacing, Interp::kNearest);
  if (lung_r.count_positive() == 0) {
    throw ValidationError("scan " + record.scan_id + ": empty lung after resampling");
  }

  PreprocessedSample out;
  out.scan_id = record.scan_id;
  out.label = record.class_label;
  out.ratio = infection_ratio(infection_r, lung_r);

  const Volume masked = apply_lung_mask(window_normalize(image_r), lung_r);
  // Trilinear downscaling bleeds lung values across the mask border; the
  // nearest-neighbour lung mask on the final grid clears them again.
  out.image = apply_lung_mask(downscale_pad(masked, config.target_shape, Interp::kTrilinear),
                              downscale_pad(lung_r, config.target_shape, Interp::kNearest));
  out.infection_mask = downscale_pad(infection_r, config.target_shape, Interp::kNearest);
  return out;
}

SampleCache::SampleCache(std::filesystem::path dir, PrepConfig config)
    : dir_(std::move(dir)), config_(config), digest_(config_.digest()) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create cache directory " + dir_.string() + ": " + ec.message());
}

std::filesystem::path SampleCache::image_path(const std::string& scan_id) const {
  return dir_ / (scan_id + "_" + digest_ + "_image.nii");
}

std::filesystem::path SampleCache::mask_path(const std::string& scan_id) const {
  return dir_ / (scan_id + "_" + digest_ + "_infection.nii");
}

std::filesystem::path SampleCache::sidecar_path(const std::string& scan_id) const {
  return dir_ / (scan_id + "_" + digest_ + ".json");
}

namespace {

std::string source_stamp(const ScanRecord& record) {
  std::string stamp;
  for (const auto* path : {&record.volume_path, &record.lung_mask_path, &record.infection_mask_path}) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(*path, ec);
    const auto time = std::filesystem::last_write_time(*path, ec);
    if (ec) return {};
    stamp += std::to_string(size) + ":" + std::to_string(time.time_since_epoch().count()) + ";";
  }
  return stamp;
}

}  // namespace

bool SampleCache::contains(const ScanRecord& record) const {
  const auto sidecar = sidecar_path(record.scan_id);
  if (!std::filesystem::exists(sidecar) || !std::filesystem::exists(image_path(record.scan_id)) ||
      !std::filesystem::exists(mask_path(record.scan_id))) {
    return false;
  }
  std::ifstream in(sidecar);
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("stamp")) return false;
  const auto stamp = source_stamp(record);
  return !stamp.empty() && j.at("stamp") == stamp;
}

void SampleCache::put(const PreprocessedSample& sample, const ScanRecord& source) const {
  nifti::write(image_path(sample.scan_id), sample.image, nifti::StorageType::kFloat32);
  nifti::write(mask_path(sample.scan_id), sample.infection_mask, nifti::StorageType::kUInt8);
  const nlohmann::json j = {{"label", std::string(to_string(sample.label))},
                            {"ratio", sample.ratio},
                            {"source", sample.scan_id},
                            {"stamp", source_stamp(source)}};
  const auto path = sidecar_path(sample.scan_id);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  // The sidecar lands last, so contains() never sees a half-written entry.
  std::filesystem::rename(tmp, path);
}

PreprocessedSample SampleCache::get(const ScanRecord& record) const {
  if (!contains(record)) {
    PreprocessedSample sample = preprocess(record, config_);
    put(sample, record);
    return sample;
  }
  std::ifstream in(sidecar_path(record.scan_id));
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("corrupt cache sidecar " + sidecar_path(record.scan_id).string() + ": " +
                     e.what());
  }
  PreprocessedSample sample;
  sample.scan_id = j.at("source").get<std::string>();
  sample.label = parse_class_label(j.at("label").get<std::string>());
  sample.ratio = j.at("ratio").get<double>();
  sample.image = nifti::read(image_path(record.scan_id));
  sample.infection_mask = nifti::read(mask_path(record.scan_id));
  if (sample.image.shape() != config_.target_shape ||
      sample.infection_mask.shape() != config_.target_shape) {
    throw ValidationError("cached sample " + record.scan_id + " has the wrong grid");
  }
  return sample;
}

}  // namespace dsan::prep

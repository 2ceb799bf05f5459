#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dsan/data_model.hpp"
#include "dsan/volume.hpp"

namespace dsan::prep {

enum class Interp { kTrilinear, kNearest };

// Lung window: level -600 HU, width 1500 HU.
inline constexpr double kWindowLow = -1350.0;
inline constexpr double kWindowHigh = 150.0;

struct PrepConfig {
  Spacing3 target_spacing{1.25, 0.7168, 0.7168};
  Shape3 target_shape{138, 256, 256};

  // Stable digest of the parameters, used to key the on-disk cache.
  std::string digest() const;
};

struct PreprocessedSample {
  std::string scan_id;
  Volume image;            // values in [0,1], zero outside the lung
  Volume infection_mask;   // binary, same grid as image
  ClassLabel label = ClassLabel::kCap;
  double ratio = 0.0;      // measured on the resampled (pre-downscale) masks
};

// Resamples onto `target_spacing`. Output extent per axis is
// round(dim * spacing / target). Voxel centres are mapped so that the field
// of view is preserved.
Volume resample(const Volume& v, Spacing3 target_spacing, Interp mode);

// Resizes to an explicit grid with the same centre mapping as resample();
// the physical spacing is scaled so that the field of view is preserved.
Volume resize(const Volume& v, Shape3 out_shape, Interp mode);

// Clamps to the lung window and maps linearly onto [0,1].
Volume window_normalize(const Volume& v);
float window_normalize_value(float hu);

// Voxelwise product with a binary mask.
Volume apply_lung_mask(const Volume& v, const Volume& lung_mask);

// Scale factor applied uniformly to all axes: min(target/dim..., 1).
double downscale_factor(Shape3 in, Shape3 target);
// Content extent after scaling (before padding).
Shape3 downscaled_shape(Shape3 in, Shape3 target);
// Scales by downscale_factor() then zero-pads, centred (floor before, ceil
// after), to exactly `target`.
Volume downscale_pad(const Volume& v, Shape3 target, Interp mode);

// Full pipeline for one scan: resample image and masks, window-normalise,
// mask the lungs, measure the infection ratio, then downscale and pad.
PreprocessedSample preprocess(const ScanRecord& record, const PrepConfig& config = {});

// Cache of preprocessed samples: <scan_id>_<digest>_image.nii,
// <scan_id>_<digest>_infection.nii and a JSON sidecar
// {label, ratio, source scan_id, source stamp}. An entry whose stamp (size and
// modification time of the record's three files) no longer matches is stale.
class SampleCache {
 public:
  SampleCache(std::filesystem::path dir, PrepConfig config);

  const PrepConfig& config() const { return config_; }
  const std::filesystem::path& dir() const { return dir_; }

  // True when a complete, non-stale entry exists for the record.
  bool contains(const ScanRecord& record) const;
  // Loads from the cache, preprocessing and storing first if absent or stale.
  PreprocessedSample get(const ScanRecord& record) const;
  void put(const PreprocessedSample& sample, const ScanRecord& source) const;

  std::filesystem::path image_path(const std::string& scan_id) const;
  std::filesystem::path mask_path(const std::string& scan_id) const;
  std::filesystem::path sidecar_path(const std::string& scan_id) const;

 private:
  std::filesystem::path dir_;
  PrepConfig config_;
  std::string digest_;
};

}  // namespace dsan::prep

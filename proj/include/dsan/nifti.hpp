#pragma once

#include <filesystem>

#include "dsan/volume.hpp"

namespace dsan::nifti {

enum class StorageType { kFloat32, kUInt8 };

// Reads an uncompressed single-file NIfTI-1 image (.nii). Spacing comes from
// pixdim; scl_slope/scl_inter are applied when the slope is non-zero.
Volume read(const std::filesystem::path& path);

// Writes `v` as a single-file NIfTI-1 image. kUInt8 requires every voxel to
// be an integer in [0, 255]. The write goes to a temporary sibling and is
// renamed into place.
void write(const std::filesystem::path& path, const Volume& v,
           StorageType storage = StorageType::kFloat32);

}  // namespace dsan::nifti

#include "dsan/volume.hpp"

#include <algorithm>

#include "dsan/error.hpp"

namespace dsan {

std::string to_string(const Shape3& s) {
  return std::to_string(s.d) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

namespace {

void check_geometry(const Shape3& shape, const Spacing3& spacing) {
  if (shape.d < 1 || shape.h < 1 || shape.w < 1) {
    throw ContractError("volume dimensions must be >= 1, got " + to_string(shape));
  }
  if (!(spacing.z > 0.0 && spacing.y > 0.0 && spacing.x > 0.0)) {
    throw ContractError("volume spacing must be positive");
  }
}

}  // namespace

Volume::Volume(Shape3 shape, Spacing3 spacing, float fill)
    : shape_(shape), spacing_(spacing) {
  check_geometry(shape_, spacing_);
  voxels_.assign(static_cast<std::size_t>(shape_.voxels()), fill);
}

Volume::Volume(Shape3 shape, Spacing3 spacing, std::vector<float> voxels)
    : shape_(shape), spacing_(spacing), voxels_(std::move(voxels)) {
  check_geometry(shape_, spacing_);
  if (voxels_.size() != static_cast<std::size_t>(shape_.voxels())) {
    throw ContractError("voxel buffer size does not match shape " + to_string(shape_));
  }
}

void Volume::set_spacing(Spacing3 spacing) {
  check_geometry(shape_, spacing);
  spacing_ = spacing;
}

bool Volume::is_binary() const {
  return std::all_of(voxels_.begin(), voxels_.end(),
                     [](float v) { return v == 0.0f || v == 1.0f; });
}

std::int64_t Volume::count_positive() const {
  return std::count_if(voxels_.begin(), voxels_.end(), [](float v) { return v > 0.5f; });
}

}  // namespace dsan

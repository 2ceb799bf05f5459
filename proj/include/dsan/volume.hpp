#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dsan {

// Grid extent in (depth, height, width) order; width is the fastest axis.
struct Shape3 {
  std::int64_t d = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t voxels() const { return d * h * w; }
  bool operator==(const Shape3&) const = default;
};

std::string to_string(const Shape3& s);

// Physical voxel size in millimetres, (z, y, x) order to match Shape3.
struct Spacing3 {
  double z = 1.0;
  double y = 1.0;
  double x = 1.0;

  bool operator==(const Spacing3&) const = default;
};

// A dense 3D scalar grid with physical spacing. Masks are volumes whose
// voxels are exactly 0 or 1.
class Volume {
 public:
  Volume() = default;
  Volume(Shape3 shape, Spacing3 spacing, float fill = 0.0f);
  Volume(Shape3 shape, Spacing3 spacing, std::vector<float> voxels);

  const Shape3& shape() const { return shape_; }
  const Spacing3& spacing() const { return spacing_; }
  void set_spacing(Spacing3 spacing);

  std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return static_cast<std::size_t>((z * shape_.h + y) * shape_.w + x);
  }
  float& at(std::int64_t z, std::int64_t y, std::int64_t x) { return voxels_[index(z, y, x)]; }
  float at(std::int64_t z, std::int64_t y, std::int64_t x) const { return voxels_[index(z, y, x)]; }

  std::span<float> voxels() { return voxels_; }
  std::span<const float> voxels() const { return voxels_; }
  std::vector<float>& storage() { return voxels_; }

  std::size_t size() const { return voxels_.size(); }

  // True when every voxel is 0 or 1.
  bool is_binary() const;
  // Number of voxels with a value > 0.5.
  std::int64_t count_positive() const;

  bool operator==(const Volume&) const = default;

 private:
  Shape3 shape_;
  Spacing3 spacing_;
  std::vector<float> voxels_;
};

}  // namespace dsan

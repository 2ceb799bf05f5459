#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dsan/data_model.hpp"
#include "dsan/volume.hpp"

namespace dsan::synth {

struct PhantomSpec {
  Shape3 shape{40, 72, 72};
  Spacing3 spacing{4.3, 2.4, 2.4};
  ClassLabel class_label = ClassLabel::kCovid;
  double target_ratio = 0.0;  // infection voxels / lung voxels
  std::uint64_t texture_seed = 0;
  // Half-width of the uniform voxel noise on healthy lung, in HU.
  double lung_noise_hu = 60.0;
};

struct Phantom {
  Volume volume;          // Hounsfield units
  Volume lung_mask;
  Volume infection_mask;  // subset of lung_mask
};

// HU levels of the phantom anatomy.
inline constexpr float kAirHu = -1000.0f;
inline constexpr float kBodyHu = 40.0f;
inline constexpr float kLungHu = -850.0f;

// Two ellipsoidal lungs inside an elliptic body. COVID phantoms get several
// peripheral blobs (-700..-500 HU, voxel-level texture); CAP phantoms get one
// central blob (-300..-100 HU, smooth texture). Blobs grow voxel by voxel
// outward from their seeds until the infection count equals
// round(target_ratio * lung voxels).
// Throws ContractError for shape < 16 or target_ratio outside [0, 0.9), and
// ValidationError when the target cannot be met within 20% on this grid.
Phantom generate_phantom(const PhantomSpec& spec);

// Normalised ellipsoid radius of the nearest lung at voxel (z, y, x): 0 at a
// lung centre, 1 on its surface. Exposed so tests can measure peripherality.
double lung_radius(Shape3 shape, std::int64_t z, std::int64_t y, std::int64_t x);

// Log-uniform mixture over target ratios.
struct RatioBand {
  double weight;
  double lo;
  double hi;
};

struct RatioLaw {
  std::vector<RatioBand> covid;
  std::vector<RatioBand> cap;

  // COVID skewed towards large infections (a quarter below 0.03), CAP towards
  // tiny ones (half at or below 0.001, the rest mostly 0.005-0.04).
  static RatioLaw imbalanced_default();

  // One independent draw: band by weight, then log-uniform inside it.
  double draw(ClassLabel label, std::uint64_t seed) const;

  // `n` draws whose band counts follow the weights exactly (largest
  // remainder), in seeded random order.
  std::vector<double> allocate(ClassLabel label, int n, std::uint64_t seed) const;
};

struct DatasetOptions {
  Shape3 shape{40, 72, 72};
  Spacing3 spacing{4.3, 2.4, 2.4};
  double lung_noise_hu = 60.0;
  RatioLaw ratio_law = RatioLaw::imbalanced_default();
};

// Writes <id>_image.nii, <id>_lung.nii, <id>_infection.nii per phantom plus
// manifest.jsonl into out_dir and returns the manifest. Each phantom is its
// own patient. Per-phantom seeds mix `seed` with the phantom index.
Manifest generate_dataset(int n_covid, int n_cap, std::uint64_t seed,
                          const std::filesystem::path& out_dir,
                          const DatasetOptions& options = {});

// SplitMix64 finaliser, used for seed mixing and voxel noise.
std::uint64_t mix64(std::uint64_t x);

}  // namespace dsan::synth

#include "dsan/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "dsan/error.hpp"
#include "dsan/nifti.hpp"

namespace dsan::synth {

namespace {

struct Ellipsoid {
  std::array<double, 3> centre;  // normalised (z, y, x) in [-1, 1]
  std::array<double, 3> radii;
};

constexpr std::array<Ellipsoid, 2> kLungs{{
    {{0.0, -0.05, -0.42}, {0.80, 0.62, 0.30}},
    {{0.0, -0.05, 0.42}, {0.80, 0.62, 0.30}},
}};

double norm_coord(std::int64_t i, std::int64_t n) {
  return (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
}

double ellipsoid_radius(const Ellipsoid& e, double z, double y, double x) {
  const double dz = (z - e.centre[0]) / e.radii[0];
  const double dy = (y - e.centre[1]) / e.radii[1];
  const double dx = (x - e.centre[2]) / e.radii[2];
  return std::sqrt(dz * dz + dy * dy + dx * dx);
}

double unit_noise(std::uint64_t seed, std::uint64_t i) {
  return static_cast<double>(mix64(seed ^ mix64(i)) >> 11) * 0x1.0p-53;
}

}  // namespace

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double lung_radius(Shape3 shape, std::int64_t z, std::int64_t y, std::int64_t x) {
  const double nz = norm_coord(z, shape.d), ny = norm_coord(y, shape.h), nx = norm_coord(x, shape.w);
  return std::min(ellipsoid_radius(kLungs[0], nz, ny, nx), ellipsoid_radius(kLungs[1], nz, ny, nx));
}

Phantom generate_phantom(const PhantomSpec& spec) {
  const Shape3 s = spec.shape;
  if (s.d < 16 || s.h < 16 || s.w < 16) {
    throw ContractError("phantom shape must be >= 16 per axis, got " + to_string(s));
  }
  if (!(spec.target_ratio >= 0.0 && spec.target_ratio < 0.9)) {
    throw ContractError("phantom target_ratio must lie in [0, 0.9)");
  }
  if (!(spec.lung_noise_hu >= 0.0 && spec.lung_noise_hu <= 300.0)) {
    throw ContractError("lung_noise_hu must lie in [0, 300]");
  }
  Phantom p{Volume(s, spec.spacing, kAirHu), Volume(s, spec.spacing, 0.0f),
            Volume(s, spec.spacing, 0.0f)};

  const std::uint64_t noise_seed = mix64(spec.texture_seed ^ 0x6c756e67ull);
  std::vector<std::int64_t> lung_voxels;
  for (std::int64_t z = 0; z < s.d; ++z) {
    for (std::int64_t y = 0; y < s.h; ++y) {
      const double ny = norm_coord(y, s.h);
      for (std::int64_t x = 0; x < s.w; ++x) {
        const double nx = norm_coord(x, s.w);
        const auto idx = static_cast<std::int64_t>(p.volume.index(z, y, x));
        if ((ny / 0.85) * (ny / 0.85) + (nx / 0.92) * (nx / 0.92) <= 1.0) {
          p.volume.at(z, y, x) = kBodyHu;
        }
        if (lung_radius(s, z, y, x) <= 1.0) {
          p.lung_mask.at(z, y, x) = 1.0f;
          p.volume.at(z, y, x) =
              kLungHu + static_cast<float>(2.0 * spec.lung_noise_hu * (unit_noise(noise_seed, idx) - 0.5));
          lung_voxels.push_back(idx);
        }
      }
    }
  }

  const auto lung_count = static_cast<double>(lung_voxels.size());
  if (spec.target_ratio == 0.0) return p;
  const auto target = static_cast<std::int64_t>(std::llround(spec.target_ratio * lung_count));
  // Rounding to a whole voxel count must stay within 20% of the target.
  if (spec.target_ratio * lung_count < 2.5 || target > static_cast<std::int64_t>(lung_voxels.size())) {
    throw ValidationError("target_ratio " + std::to_string(spec.target_ratio) +
                          " infeasible for a lung of " + std::to_string(lung_voxels.size()) +
                          " voxels");
  }

  const bool covid = spec.class_label == ClassLabel::kCovid;
  std::mt19937_64 rng(mix64(spec.texture_seed));

  // Seeds: peripheral shell for COVID, lung core for CAP.
  std::vector<std::int64_t> shell;
  for (const auto idx : lung_voxels) {
    const std::int64_t x = idx % s.w, y = (idx / s.w) % s.h, z = idx / (s.w * s.h);
    const double r = lung_radius(s, z, y, x);
    if (covid ? (r >= 0.75 && r <= 0.95) : (r <= 0.3)) shell.push_back(idx);
  }
  if (shell.empty()) throw ValidationError("phantom too small to place infection seeds");
  const int n_seeds = covid ? 3 + static_cast<int>(rng() % 4) : 1;
  std::vector<std::array<double, 3>> seeds;  // millimetres
  for (int i = 0; i < n_seeds; ++i) {
    const std::int64_t idx = shell[rng() % shell.size()];
    seeds.push_back({static_cast<double>(idx / (s.w * s.h)) * spec.spacing.z,
                     static_cast<double>((idx / s.w) % s.h) * spec.spacing.y,
                     static_cast<double>(idx % s.w) * spec.spacing.x});
  }

  // Grow: the `target` lung voxels closest to any seed.
  std::vector<std::pair<double, std::int64_t>> dist;
  dist.reserve(lung_voxels.size());
  for (const auto idx : lung_voxels) {
    const double z = static_cast<double>(idx / (s.w * s.h)) * spec.spacing.z;
    const double y = static_cast<double>((idx / s.w) % s.h) * spec.spacing.y;
    const double x = static_cast<double>(idx % s.w) * spec.spacing.x;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : seeds) {
      best = std::min(best, (z - c[0]) * (z - c[0]) + (y - c[1]) * (y - c[1]) + (x - c[2]) * (x - c[2]));
    }
    dist.emplace_back(best, idx);
  }
  std::nth_element(dist.begin(), dist.begin() + (target - 1), dist.end());

  // Smooth CAP texture: a few random low-frequency plane waves.
  std::array<std::array<double, 4>, 3> waves{};
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (auto& wv : waves) {
    wv = {unif(rng) * 2.0 - 1.0, unif(rng) * 2.0 - 1.0, unif(rng) * 2.0 - 1.0,
          unif(rng) * 2.0 * std::numbers::pi};
  }
  const std::uint64_t blob_seed = mix64(spec.texture_seed ^ 0x626c6f62ull);
  for (std::int64_t i = 0; i < target; ++i) {
    const std::int64_t idx = dist[i].second;
    p.infection_mask.storage()[idx] = 1.0f;
    float hu;
    if (covid) {
      hu = static_cast<float>(-700.0 + 200.0 * unit_noise(blob_seed, idx));
    } else {
      const double z = norm_coord(idx / (s.w * s.h), s.d);
      const double y = norm_coord((idx / s.w) % s.h, s.h);
      const double x = norm_coord(idx % s.w, s.w);
      double t = 0.0;
      for (const auto& wv : waves) t += std::sin(2.0 * (wv[0] * z + wv[1] * y + wv[2] * x) + wv[3]);
      hu = static_cast<float>(-200.0 + 100.0 * t / 3.0);
    }
    p.volume.storage()[idx] = hu;
  }
  return p;
}

RatioLaw RatioLaw::imbalanced_default() {
  RatioLaw law;
  law.covid = {{0.20, 0.0015, 0.005}, {0.05, 0.005, 0.030}, {0.75, 0.030, 0.25}};
  law.cap = {{0.50, 0.0003, 0.001}, {0.10, 0.001, 0.005}, {0.40, 0.005, 0.040}};
  return law;
}

namespace {

double log_uniform(const RatioBand& band, double u) {
  return std::exp(std::log(band.lo) + u * (std::log(band.hi) - std::log(band.lo)));
}

}  // namespace

double RatioLaw::draw(ClassLabel label, std::uint64_t seed) const {
  const auto& bands = label == ClassLabel::kCovid ? covid : cap;
  if (bands.empty()) throw ContractError("ratio law has no bands for this class");
  double total = 0.0;
  for (const auto& b : bands) total += b.weight;
  double u = unit_noise(seed, 1) * total;
  const RatioBand* chosen = &bands.back();
  for (const auto& b : bands) {
    if (u < b.weight) {
      chosen = &b;
      break;
    }
    u -= b.weight;
  }
  return log_uniform(*chosen, unit_noise(seed, 2));
}

std::vector<double> RatioLaw::allocate(ClassLabel label, int n, std::uint64_t seed) const {
  const auto& bands = label == ClassLabel::kCovid ? covid : cap;
  if (bands.empty()) throw ContractError("ratio law has no bands for this class");
  if (n < 0) throw ContractError("allocation size must be >= 0");
  double total = 0.0;
  for (const auto& b : bands) total += b.weight;

  std::vector<int> quota(bands.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t k = 0; k < bands.size(); ++k) {
    const double exact = n * bands[k].weight / total;
    quota[k] = static_cast<int>(std::floor(exact));
    assigned += quota[k];
    remainders.emplace_back(exact - quota[k], k);
  }
  // Larger remainder first; earlier band on ties.
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int k = 0; assigned < n; ++k, ++assigned) ++quota[remainders[k].second];

  std::vector<std::size_t> band_of;
  for (std::size_t k = 0; k < bands.size(); ++k) band_of.insert(band_of.end(), quota[k], k);
  std::mt19937_64 rng(mix64(seed ^ (label == ClassLabel::kCovid ? 0x636f76ull : 0x636170ull)));
  std::shuffle(band_of.begin(), band_of.end(), rng);

  std::vector<double> ratios;
  ratios.reserve(band_of.size());
  for (std::size_t i = 0; i < band_of.size(); ++i) {
    ratios.push_back(log_uniform(bands[band_of[i]], unit_noise(mix64(seed ^ mix64(i + 1)), 2)));
  }
  return ratios;
}

Manifest generate_dataset(int n_covid, int n_cap, std::uint64_t seed,
                          const std::filesystem::path& out_dir, const DatasetOptions& options) {
  if (n_covid < 0 || n_cap < 0) throw ContractError("phantom counts must be >= 0");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  Manifest manifest;
  manifest.split_tag = "synthetic";
  const int n = n_covid + n_cap;
  const auto covid_ratios = options.ratio_law.allocate(ClassLabel::kCovid, n_covid, seed);
  const auto cap_ratios = options.ratio_law.allocate(ClassLabel::kCap, n_cap, seed);
  for (int i = 0; i < n; ++i) {
    const ClassLabel label = i < n_covid ? ClassLabel::kCovid : ClassLabel::kCap;
    const std::uint64_t phantom_seed = mix64(seed ^ mix64(static_cast<std::uint64_t>(i) + 1));
    char id[32];
    std::snprintf(id, sizeof(id), "S%04d", i);
    char patient[32];
    std::snprintf(patient, sizeof(patient), "P%04d", i);

    PhantomSpec spec;
    spec.shape = options.shape;
    spec.spacing = options.spacing;
    spec.class_label = label;
    spec.target_ratio = i < n_covid ? covid_ratios[i] : cap_ratios[i - n_covid];
    spec.texture_seed = phantom_seed;
    spec.lung_noise_hu = options.lung_noise_hu;
    const Phantom ph = generate_phantom(spec);

    ScanRecord r;
    r.scan_id = id;
    r.patient_id = patient;
    r.class_label = label;
    r.volume_path = out_dir / (r.scan_id + "_image.nii");
    r.lung_mask_path = out_dir / (r.scan_id + "_lung.nii");
    r.infection_mask_path = out_dir / (r.scan_id + "_infection.nii");
    nifti::write(r.volume_path, ph.volume, nifti::StorageType::kFloat32);
    nifti::write(r.lung_mask_path, ph.lung_mask, nifti::StorageType::kUInt8);
    nifti::write(r.infection_mask_path, ph.infection_mask, nifti::StorageType::kUInt8);
    r.infection_ratio = infection_ratio(ph.infection_mask, ph.lung_mask);
    manifest.records.push_back(std::move(r));
  }
  validate_manifest(manifest);
  save_manifest(out_dir / "manifest.jsonl", manifest);
  return manifest;
}

}  // namespace dsan::synth

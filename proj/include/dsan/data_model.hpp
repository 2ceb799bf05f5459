#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dsan/volume.hpp"

namespace dsan {

enum class ClassLabel { kCovid, kCap };

std::string_view to_string(ClassLabel label);
ClassLabel parse_class_label(std::string_view text);
// 1 for COVID (the positive class), 0 for CAP.
inline int binary_label(ClassLabel label) { return label == ClassLabel::kCovid ? 1 : 0; }

struct ScanRecord {
  std::string scan_id;
  std::string patient_id;
  ClassLabel class_label = ClassLabel::kCap;
  // Absolute (or caller-relative) paths; the manifest file stores them
  // relative to its own directory.
  std::filesystem::path volume_path;
  std::filesystem::path lung_mask_path;
  std::filesystem::path infection_mask_path;
  std::optional<double> infection_ratio;
};

struct Manifest {
  std::vector<ScanRecord> records;
  std::string split_tag;

  std::size_t size() const { return records.size(); }
};

// Sampling groups used by the size-balanced sampler.
enum class SamplingGroup { kCovidSmall = 0, kCovidLarge = 1, kCapSmall = 2, kCapLarge = 3 };
inline constexpr int kNumSamplingGroups = 4;
std::string_view to_string(SamplingGroup g);

// Infection-size bands used for group-wise evaluation.
enum class EvalGroup { kLow = 0, kMid = 1, kHigh = 2 };
inline constexpr int kNumEvalGroups = 3;
std::string_view to_string(EvalGroup g);

// Thresholds on the infection/lung volume ratio.
inline constexpr double kCovidSmallBelow = 0.030;
inline constexpr double kCapLargeAbove = 0.001;
inline constexpr double kEvalLowBelow = 0.005;
inline constexpr double kEvalHighAbove = 0.030;

// Parses a JSON-Lines manifest. Paths are resolved against the manifest's
// directory. Throws ParseError (with the 1-based line number) on malformed
// lines and ValidationError on duplicate scan ids or an empty manifest.
Manifest load_manifest(const std::filesystem::path& path);

// Writes a JSON-Lines manifest; paths are stored relative to the file's
// directory when possible.
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Non-empty and unique scan ids.
void validate_manifest(const Manifest& manifest);

// Positive infection voxels over positive lung voxels.
double infection_ratio(const Volume& infection_mask, const Volume& lung_mask);

// Recomputes the ratio from the record's mask files.
double recompute_infection_ratio(const ScanRecord& record);

SamplingGroup assign_sampling_group(ClassLabel label, double ratio);
EvalGroup assign_eval_group(double ratio);

struct FoldSplit {
  Manifest train;
  Manifest validation;
};

// Patient-level k-fold split: patient ids are shuffled with `seed` and dealt
// round-robin into k validation folds.
std::vector<FoldSplit> patient_level_folds(const Manifest& manifest, int k, std::uint64_t seed);

}  // namespace dsan

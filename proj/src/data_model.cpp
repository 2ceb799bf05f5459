#include "dsan/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "dsan/error.hpp"
#include "dsan/nifti.hpp"

namespace dsan {

using nlohmann::json;

std::string_view to_string(ClassLabel label) {
  return label == ClassLabel::kCovid ? "COVID" : "CAP";
}

ClassLabel parse_class_label(std::string_view text) {
  if (text == "COVID") return ClassLabel::kCovid;
  if (text == "CAP") return ClassLabel::kCap;
  throw ParseError("unknown class label '" + std::string(text) + "'");
}

std::string_view to_string(SamplingGroup g) {
  switch (g) {
    case SamplingGroup::kCovidSmall: return "COVID_SMALL";
    case SamplingGroup::kCovidLarge: return "COVID_LARGE";
    case SamplingGroup::kCapSmall: return "CAP_SMALL";
    case SamplingGroup::kCapLarge: return "CAP_LARGE";
  }
  return "?";
}

std::string_view to_string(EvalGroup g) {
  switch (g) {
    case EvalGroup::kLow: return "LOW";
    case EvalGroup::kMid: return "MID";
    case EvalGroup::kHigh: return "HIGH";
  }
  return "?";
}

namespace {

std::string required_string(const json& j, const char* key, std::size_t line_no) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    throw ParseError("manifest line " + std::to_string(line_no) + ": missing or non-string '" +
                     key + "'");
  }
  return it->get<std::string>();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

std::string relativize(const std::filesystem::path& base, const std::filesystem::path& p) {
  const auto abs = std::filesystem::absolute(p).lexically_normal();
  const auto rel = abs.lexically_relative(base);
  return rel.empty() ? abs.generic_string() : rel.generic_string();
}

}  // namespace

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const auto base = std::filesystem::absolute(path).parent_path();

  Manifest manifest;
  manifest.split_tag = path.stem().string();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object()) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": expected a JSON object");
    }
    ScanRecord r;
    r.scan_id = required_string(j, "scan_id", line_no);
    r.patient_id = required_string(j, "patient_id", line_no);
    try {
      r.class_label = parse_class_label(required_string(j, "class_label", line_no));
    } catch (const ParseError& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    r.volume_path = resolve(base, required_string(j, "volume_path", line_no));
    r.lung_mask_path = resolve(base, required_string(j, "lung_mask_path", line_no));
    r.infection_mask_path = resolve(base, required_string(j, "infection_mask_path", line_no));
    if (auto it = j.find("infection_ratio"); it != j.end() && !it->is_null()) {
      if (!it->is_number()) {
        throw ParseError("manifest line " + std::to_string(line_no) +
                         ": infection_ratio must be a number or null");
      }
      const double ratio = it->get<double>();
      if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw ParseError("manifest line " + std::to_string(line_no) +
                         ": infection_ratio outside [0,1]");
      }
      r.infection_ratio = ratio;
    }
    manifest.records.push_back(std::move(r));
  }
  validate_manifest(manifest);
  return manifest;
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  const auto base = std::filesystem::absolute(path).parent_path().lexically_normal();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + tmp.string());
    for (const auto& r : manifest.records) {
      json j = {
          {"scan_id", r.scan_id},
          {"patient_id", r.patient_id},
          {"class_label", std::string(to_string(r.class_label))},
          {"volume_path", relativize(base, r.volume_path)},
          {"lung_mask_path", relativize(base, r.lung_mask_path)},
          {"infection_mask_path", relativize(base, r.infection_mask_path)},
          {"infection_ratio", r.infection_ratio ? json(*r.infection_ratio) : json(nullptr)},
      };
      out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing manifest " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void validate_manifest(const Manifest& manifest) {
  if (manifest.records.empty()) throw ValidationError("empty manifest");
  std::unordered_set<std::string> seen;
  for (const auto& r : manifest.records) {
    if (!seen.insert(r.scan_id).second) {
      throw ValidationError("duplicate scan_id '" + r.scan_id + "'");
    }
  }
}

double infection_ratio(const Volume& infection_mask, const Volume& lung_mask) {
  if (infection_mask.shape() != lung_mask.shape()) {
    throw ContractError("infection mask " + to_string(infection_mask.shape()) +
                        " and lung mask " + to_string(lung_mask.shape()) + " differ in shape");
  }
  const auto lung = lung_mask.count_positive();
  if (lung == 0) throw ValidationError("empty lung");
  return static_cast<double>(infection_mask.count_positive()) / static_cast<double>(lung);
}

double recompute_infection_ratio(const ScanRecord& record) {
  return infection_ratio(nifti::read(record.infection_mask_path), nifti::read(record.lung_mask_path));
}

SamplingGroup assign_sampling_group(ClassLabel label, double ratio) {
  if (label == ClassLabel::kCovid) {
    return ratio < kCovidSmallBelow ? SamplingGroup::kCovidSmall : SamplingGroup::kCovidLarge;
  }
  return ratio > kCapLargeAbove ? SamplingGroup::kCapLarge : SamplingGroup::kCapSmall;
}

EvalGroup assign_eval_group(double ratio) {
  if (!(ratio >= 0.0)) throw ContractError("infection ratio must be >= 0");
  if (ratio < kEvalLowBelow) return EvalGroup::kLow;
  if (ratio <= kEvalHighAbove) return EvalGroup::kMid;
  return EvalGroup::kHigh;
}

std::vector<FoldSplit> patient_level_folds(const Manifest& manifest, int k, std::uint64_t seed) {
  if (k < 2) throw ContractError("fold count must be >= 2");
  std::vector<std::string> patients;
  std::unordered_set<std::string> seen;
  for (const auto& r : manifest.records) {
    if (seen.insert(r.patient_id).second) patients.push_back(r.patient_id);
  }
  if (static_cast<std::size_t>(k) > patients.size()) {
    throw ContractError("fold count " + std::to_string(k) + " exceeds patient count " +
                        std::to_string(patients.size()));
  }
  // Sort first so the assignment depends only on the id set and the seed.
  std::sort(patients.begin(), patients.end());
  std::mt19937_64 rng(seed);
  std::shuffle(patients.begin(), patients.end(), rng);

  std::unordered_map<std::string, int> fold_of;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    fold_of[patients[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  }

  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  for (int f = 0; f < k; ++f) {
    const std::string tag = manifest.split_tag + "/fold" + std::to_string(f);
    folds[f].train.split_tag = tag + "/train";
    folds[f].validation.split_tag = tag + "/validation";
  }
  for (const auto& r : manifest.records) {
    const int f = fold_of.at(r.patient_id);
    for (int g = 0; g < k; ++g) {
      (g == f ? folds[g].validation : folds[g].train).records.push_back(r);
    }
  }
  return folds;
}

}  // namespace dsan

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "dsan/data_model.hpp"

namespace dsan::sampling {

enum class Strategy { kUniform, kSizeBalanced };

std::string_view to_string(Strategy s);  // "US" / "SS"
Strategy parse_strategy(std::string_view text);

// The single random engine type used for every draw.
using Rng = std::mt19937_64;

// Seeded uniform random permutation of 0..n-1.
std::vector<std::size_t> uniform_epoch(std::size_t n, std::uint64_t seed);

// Sample counts indexed by SamplingGroup.
struct GroupCounts {
  std::array<std::int64_t, kNumSamplingGroups> n{};

  std::int64_t& operator[](SamplingGroup g) { return n[static_cast<int>(g)]; }
  std::int64_t operator[](SamplingGroup g) const { return n[static_cast<int>(g)]; }
  std::int64_t total() const { return n[0] + n[1] + n[2] + n[3]; }
};

// Indices of the training samples belonging to each group.
struct GroupMembers {
  std::array<std::vector<std::size_t>, kNumSamplingGroups> members;

  static GroupMembers from_groups(std::span<const SamplingGroup> groups);
  GroupCounts counts() const;
};

// weights = [N_cl/N_cs, 1, 1, N_ps/N_pl] in group order
// (COVID small, COVID large, CAP small, CAP large); probabilities =
// weights / w_sum.
struct SamplerProbabilities {
  std::array<double, kNumSamplingGroups> weights{};
  double w_sum = 0.0;
  std::array<double, kNumSamplingGroups> probabilities{};
};

// Throws ValidationError("empty sampling group") if any count is zero.
SamplerProbabilities size_balanced_probabilities(const GroupCounts& counts);

// Two-stage draw: a group by its probability, then a member uniformly.
// Throws ValidationError when the chosen group is empty.
std::size_t draw_size_balanced(const GroupMembers& groups, const SamplerProbabilities& probs,
                               Rng& rng);

// `n` independent draws (with replacement).
std::vector<std::size_t> size_balanced_epoch(const GroupMembers& groups,
                                             const SamplerProbabilities& probs, std::size_t n,
                                             Rng& rng);

}  // namespace dsan::sampling

#include "dsan/samplers.hpp"

#include <numeric>

#include "dsan/error.hpp"

namespace dsan::sampling {

std::string_view to_string(Strategy s) { return s == Strategy::kUniform ? "US" : "SS"; }

Strategy parse_strategy(std::string_view text) {
  if (text == "US") return Strategy::kUniform;
  if (text == "SS") return Strategy::kSizeBalanced;
  throw ParseError("unknown sampling strategy '" + std::string(text) + "' (expected US or SS)");
}

std::vector<std::size_t> uniform_epoch(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ContractError("cannot sample an epoch of zero samples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  // Fisher-Yates with an explicit bounded draw, so the permutation depends
  // only on the engine and not on the standard library's shuffle.
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  return order;
}

GroupMembers GroupMembers::from_groups(std::span<const SamplingGroup> groups) {
  GroupMembers g;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    g.members[static_cast<int>(groups[i])].push_back(i);
  }
  return g;
}

GroupCounts GroupMembers::counts() const {
  GroupCounts c;
  for (int i = 0; i < kNumSamplingGroups; ++i) c.n[i] = static_cast<std::int64_t>(members[i].size());
  return c;
}

SamplerProbabilities size_balanced_probabilities(const GroupCounts& counts) {
  for (int i = 0; i < kNumSamplingGroups; ++i) {
    if (counts.n[i] < 1) {
      throw ValidationError("empty sampling group " +
                            std::string(to_string(static_cast<SamplingGroup>(i))));
    }
  }
  SamplerProbabilities p;
  p.weights = {static_cast<double>(counts[SamplingGroup::kCovidLarge]) /
                   static_cast<double>(counts[SamplingGroup::kCovidSmall]),
               1.0, 1.0,
               static_cast<double>(counts[SamplingGroup::kCapSmall]) /
                   static_cast<double>(counts[SamplingGroup::kCapLarge])};
  p.w_sum = std::accumulate(p.weights.begin(), p.weights.end(), 0.0);
  for (int i = 0; i < kNumSamplingGroups; ++i) p.probabilities[i] = p.weights[i] / p.w_sum;
  return p;
}

std::size_t draw_size_balanced(const GroupMembers& groups, const SamplerProbabilities& probs,
                               Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  int chosen = -1;
  double cumulative = 0.0;
  for (int i = 0; i < kNumSamplingGroups; ++i) {
    if (probs.probabilities[i] <= 0.0) continue;
    cumulative += probs.probabilities[i];
    chosen = i;
    if (u < cumulative) break;
  }
  if (chosen < 0) throw ContractError("sampler probabilities are all zero");
  const auto& members = groups.members[chosen];
  if (members.empty()) {
    throw ValidationError("sampling group " +
                          std::string(to_string(static_cast<SamplingGroup>(chosen))) +
                          " has positive probability but no samples");
  }
  std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
  return members[pick(rng)];
}

std::vector<std::size_t> size_balanced_epoch(const GroupMembers& groups,
                                             const SamplerProbabilities& probs, std::size_t n,
                                             Rng& rng) {
  std::vector<std::size_t> draws;
  draws.reserve(n);
  for (std::size_t i = 0; i < n; ++i) draws.push_back(draw_size_balanced(groups, probs, rng));
  return draws;
}

}  // namespace dsan::sampling

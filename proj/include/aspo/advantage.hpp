// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "aspo/error.hpp"
#include "aspo/policy.hpp"
#include "aspo/tasks.hpp"

namespace aspo {

struct RolloutGroup {
  Prompt prompt;
  std::vector<SampledResponse> responses;
  std::vector<RewardOutcome> outcomes;
  std::vector<double> rewards;
  std::vector<double> advantages;  // one per response, shared by all its tokens

  std::size_t size() const { return responses.size(); }
};

inline bool is_degenerate(std::span<const double> rewards) {
  for (double r : rewards) {
    if (r != rewards.front()) return false;
  }
  return true;
}

/// (R_i - mean) / population std.
inline std::vector<double> group_advantage(std::span<const double> rewards) {
  if (rewards.size() < 2) throw Error(ErrorCode::invalid_argument, "group size must be >= 2");
  if (is_degenerate(rewards)) throw Error(ErrorCode::degenerate_group, "all rewards equal; filter the group first");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv;
  adv.reserve(rewards.size());
  for (double r : rewards) adv.push_back((r - mean) / sd);
  return adv;
}

struct FilterResult {
  std::vector<RolloutGroup> kept;
  std::size_t dropped = 0;
};

/// Drops zero-variance groups; they carry no preference signal.
inline FilterResult filter_degenerate(std::vector<RolloutGroup> groups) {
  FilterResult out;
  for (auto& g : groups) {
    if (is_degenerate(g.rewards)) ++out.dropped;
    else out.kept.push_back(std::move(g));
  }
  return out;
}

}  // namespace aspo

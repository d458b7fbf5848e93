// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic verifiable-reward tasks.
//
// digit-sum: prompt carries operands a, b; the rewarded response is the
//            canonical decimal form of a + b followed by EOS.
// parity:    prompt carries a length L and a parity bit; the rewarded
//            response is any L digits whose sum has that parity, then EOS.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aspo/error.hpp"
#include "aspo/policy.hpp"
#include "aspo/rng.hpp"

namespace aspo {

enum class TaskKind { digit_sum, parity };

inline std::string_view to_string(TaskKind k) { return k == TaskKind::digit_sum ? "digit_sum" : "parity"; }

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "digit_sum" || s == "digit-sum") return TaskKind::digit_sum;
  if (s == "parity") return TaskKind::parity;
  throw Error(ErrorCode::unknown_task, "unknown task kind '" + std::string(s) + "'");
}

/// Difficulty bounds. Operands are drawn from [operand_min, operand_max],
/// a subrange of [0, 99].
struct TaskBounds {
  int operand_min = 0;
  int operand_max = 9;  // up to 99; wider ranges give no initial reward at this scale
  int parity_min_length = 1;
  int parity_max_length = 6;
  std::size_t max_len = 8;  // response budget, including EOS
};

struct Prompt {
  std::uint64_t id = 0;
  TaskKind kind = TaskKind::digit_sum;
  int a = 0;  // digit-sum operands
  int b = 0;
  int length = 0;  // parity target
  int parity = 0;

  /// One-hot encoding consumed by the policy (width 40).
  std::vector<double> features() const {
    std::vector<double> f(40, 0.0);
    if (kind == TaskKind::digit_sum) {
      f[static_cast<std::size_t>(a / 10)] = 1.0;
      f[10 + static_cast<std::size_t>(a % 10)] = 1.0;
      f[20 + static_cast<std::size_t>(b / 10)] = 1.0;
      f[30 + static_cast<std::size_t>(b % 10)] = 1.0;
    } else {
      f[static_cast<std::size_t>(length)] = 1.0;
      f[10 + static_cast<std::size_t>(parity)] = 1.0;
    }
    return f;
  }

  friend bool operator==(const Prompt&, const Prompt&) = default;
};

inline constexpr std::size_t prompt_feature_width = 40;

enum class FailureReason { wrong_answer, malformed, truncated };

inline std::string_view to_string(FailureReason r) {
  switch (r) {
    case FailureReason::wrong_answer: return "wrong_answer";
    case FailureReason::malformed: return "malformed";
    case FailureReason::truncated: return "truncated";
  }
  return "unknown";
}

struct RewardOutcome {
  double reward = 0.0;
  std::optional<FailureReason> failure;

  static RewardOutcome success() { return {1.0, std::nullopt}; }
  static RewardOutcome fail(FailureReason r) { return {0.0, r}; }
};

/// Digits of `value` in canonical decimal form (no leading zeros).
inline std::vector<int> decimal_digits(int value) {
  if (value == 0) return {0};
  std::vector<int> d;
  for (; value > 0; value /= 10) d.insert(d.begin(), value % 10);
  return d;
}

/// One rewarded response for `p`, used to certify prompts are solvable.
inline std::vector<int> reference_answer(const Prompt& p) {
  std::vector<int> tokens;
  if (p.kind == TaskKind::digit_sum) {
    tokens = decimal_digits(p.a + p.b);
  } else {
    tokens.assign(static_cast<std::size_t>(p.length), 0);
    if (p.parity == 1) tokens.back() = 1;
  }
  tokens.push_back(Vocabulary::eos);
  return tokens;
}

inline void validate(const TaskBounds& b) {
  if (b.operand_min < 0 || b.operand_max > 99 || b.operand_min > b.operand_max) {
    throw ConfigError("task.operand_min/operand_max", "operands must satisfy 0 <= min <= max <= 99");
  }
  if (b.parity_min_length < 1 || b.parity_min_length > b.parity_max_length || b.parity_max_length > 9) {
    throw ConfigError("task.parity_min_length/parity_max_length", "lengths must satisfy 1 <= min <= max <= 9");
  }
  if (b.max_len < 1) throw ConfigError("train.max_len", "must be >= 1");
}

/// Deterministic in (kind, seed, index, bounds).
inline Prompt generate_prompt(TaskKind kind, std::uint64_t seed, std::uint64_t index, const TaskBounds& bounds = {}) {
  validate(bounds);
  Rng rng(derive_seed({seed, index, static_cast<std::uint64_t>(kind)}));
  Prompt p;
  p.id = index;
  p.kind = kind;
  switch (kind) {
    case TaskKind::digit_sum:
      p.a = static_cast<int>(rng.integer(bounds.operand_min, bounds.operand_max));
      p.b = static_cast<int>(rng.integer(bounds.operand_min, bounds.operand_max));
      break;
    case TaskKind::parity:
      p.length = static_cast<int>(rng.integer(bounds.parity_min_length, bounds.parity_max_length));
      p.parity = static_cast<int>(rng.integer(0, 1));
      break;
    default:
      throw Error(ErrorCode::unknown_task, "unknown task kind");
  }
  if (reference_answer(p).size() > bounds.max_len) {
    throw ConfigError("train.max_len", "too short for the longest rewarded answer of " + std::string(to_string(kind)));
  }
  return p;
}

/// Binary outcome reward. A response without EOS is truncated and earns 0.
inline RewardOutcome verify(const Prompt& p, std::span<const int> tokens) {
  std::size_t eos = tokens.size();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == Vocabulary::eos) {
      eos = i;
      break;
    }
  }
  if (eos == tokens.size()) return RewardOutcome::fail(FailureReason::truncated);
  if (eos + 1 != tokens.size() || eos == 0) return RewardOutcome::fail(FailureReason::malformed);
  const auto body = tokens.first(eos);
  for (int t : body) {
    if (!Vocabulary::is_digit(t)) return RewardOutcome::fail(FailureReason::malformed);
  }

  if (p.kind == TaskKind::digit_sum) {
    if (body.size() > 1 && body[0] == 0) return RewardOutcome::fail(FailureReason::malformed);
    const auto want = decimal_digits(p.a + p.b);
    if (!std::equal(body.begin(), body.end(), want.begin(), want.end())) {
      return RewardOutcome::fail(FailureReason::wrong_answer);
    }
    return RewardOutcome::success();
  }
  int digit_sum = 0;
  for (int t : body) digit_sum += t;
  if (static_cast<int>(body.size()) != p.length || digit_sum % 2 != p.parity) {
    return RewardOutcome::fail(FailureReason::wrong_answer);
  }
  return RewardOutcome::success();
}

}  // namespace aspo

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-step training telemetry.
//
// Clip flags and IS ratios come from the final epoch of a step, where each
// kept token is evaluated exactly once by its minibatch. Entropy and KL to
// the reference are evaluated on every response sampled in the step, under
// the parameters left by the step's last update.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "aspo/advantage.hpp"
#include "aspo/error.hpp"
#include "aspo/policy.hpp"

namespace aspo {

struct MetricRecord {
  std::uint64_t step = 0;
  double entropy = 0.0;
  double hard_clip_fraction = 0.0;
  double soft_clip_fraction = 0.0;
  double repetition_rate = 0.0;
  double truncation_rate = 0.0;
  double kl_ref = 0.0;  // exact, mean over positions
  double kl_old = 0.0;  // k3 on sampled tokens, kept groups only
  double is_ratio_mean = 1.0;
  double is_ratio_geo = 1.0;
  double is_ratio_pos_mean = 1.0;
  double is_ratio_pos_geo = 1.0;
  double is_ratio_neg_mean = 1.0;
  double is_ratio_neg_geo = 1.0;
  std::uint64_t pos_responses = 0;
  std::uint64_t neg_responses = 0;
  double reward_mean = 0.0;
  std::uint64_t dropped_groups = 0;
  std::uint64_t kept_groups = 0;
  std::uint64_t updates = 0;
  double eval_avg_at_k = 0.0;
  double eval_pass_at_k = 0.0;
  double learning_rate = 0.0;
  bool aborted = false;
};

/// Column names, in file order.
inline constexpr const char* metric_columns =
    "step,entropy,hard_clip_fraction,soft_clip_fraction,repetition_rate,truncation_rate,kl_ref,kl_old,"
    "is_ratio_mean,is_ratio_geo,is_ratio_pos_mean,is_ratio_pos_geo,is_ratio_neg_mean,is_ratio_neg_geo,"
    "pos_responses,neg_responses,reward_mean,dropped_groups,kept_groups,updates,eval_avg_at_k,eval_pass_at_k,"
    "learning_rate,aborted";

/// Token-level results of the last epoch of a step, indexed by token; the
/// response index runs over the kept groups' responses in group order.
struct StepObservation {
  std::vector<double> ratio;
  std::vector<std::uint8_t> hard;
  std::vector<std::uint8_t> soft;
  std::vector<double> lp_new;
  std::vector<double> lp_old;
  std::vector<std::uint32_t> response;
  std::vector<double> response_advantage;
};

/// 1 - unique 3-grams / total 3-grams over content tokens (EOS excluded);
/// 0 for responses with fewer than three content tokens.
inline double repetition_rate(std::span<const int> tokens) {
  std::size_t n = tokens.size();
  while (n > 0 && tokens[n - 1] == Vocabulary::eos) --n;
  if (n < 3) return 0.0;
  std::set<std::tuple<int, int, int>> unique;
  for (std::size_t i = 0; i + 2 < n; ++i) unique.emplace(tokens[i], tokens[i + 1], tokens[i + 2]);
  const double total = static_cast<double>(n - 2);
  return 1.0 - static_cast<double>(unique.size()) / total;
}

struct ResponseRatioStats {
  double arithmetic = 1.0;
  double geometric = 1.0;
};

inline ResponseRatioStats response_ratio(std::span<const double> ratios) {
  if (ratios.empty()) return {};
  double s = 0.0, ls = 0.0;
  for (double r : ratios) {
    s += r;
    ls += std::log(r);
  }
  const double n = static_cast<double>(ratios.size());
  return {s / n, std::exp(ls / n)};
}

/// Distribution-dependent signals on every sampled response.
struct PolicySignals {
  double entropy = 0.0;
  double kl_ref = 0.0;
};

inline PolicySignals policy_signals(const PolicyParams& params, const PolicyParams& reference,
                                    std::span<const RolloutGroup> groups) {
  const auto vocab = params.shape().vocab;
  std::vector<double> lp(vocab), lr(vocab);
  double h = 0.0, kl = 0.0, n = 0.0;
  for (const auto& g : groups) {
    const auto f = g.prompt.features();
    PolicyEvaluator cur(params, f), ref(reference, f);
    for (const auto& r : g.responses) {
      for (std::size_t t = 0; t < r.tokens.size(); ++t) {
        cur.next_log_probs(r.tokens, t, 1.0, lp);
        ref.next_log_probs(r.tokens, t, 1.0, lr);
        h += entropy_of(lp);
        double k = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) k += std::exp(lp[v]) * (lp[v] - lr[v]);
        kl += k;
        n += 1.0;
      }
    }
  }
  if (n == 0.0) return {};
  return {h / n, std::max(0.0, kl / n)};
}

/// Fills every field except step bookkeeping owned by the trainer
/// (updates, eval, learning rate, aborted).
inline MetricRecord compute_metrics(const StepObservation& obs, std::span<const RolloutGroup> sampled,
                                    std::size_t kept_groups, std::size_t dropped_groups, const PolicySignals& signals,
                                    std::uint64_t step) {
  MetricRecord m;
  m.step = step;
  m.entropy = signals.entropy;
  m.kl_ref = signals.kl_ref;
  m.kept_groups = kept_groups;
  m.dropped_groups = dropped_groups;

  double responses = 0.0, truncated = 0.0, repetition = 0.0, reward = 0.0;
  for (const auto& g : sampled) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      responses += 1.0;
      truncated += g.responses[i].truncated ? 1.0 : 0.0;
      repetition += repetition_rate(g.responses[i].tokens);
      reward += g.rewards[i];
    }
  }
  if (responses > 0) {
    m.truncation_rate = truncated / responses;
    m.repetition_rate = repetition / responses;
    m.reward_mean = reward / responses;
  }

  const std::size_t n_tok = obs.ratio.size();
  if (n_tok > 0) {
    double hard = 0.0, soft = 0.0, kl = 0.0;
    for (std::size_t t = 0; t < n_tok; ++t) {
      hard += obs.hard[t];
      soft += obs.soft[t];
      const double d = obs.lp_old[t] - obs.lp_new[t];
      kl += std::exp(d) - d - 1.0;
    }
    m.hard_clip_fraction = hard / static_cast<double>(n_tok);
    m.soft_clip_fraction = soft / static_cast<double>(n_tok);
    m.kl_old = kl / static_cast<double>(n_tok);
  }

  const std::size_t n_resp = obs.response_advantage.size();
  std::vector<std::vector<double>> per(n_resp);
  for (std::size_t t = 0; t < n_tok; ++t) per[obs.response[t]].push_back(obs.ratio[t]);
  double all_a = 0, all_g = 0, pos_a = 0, pos_g = 0, neg_a = 0, neg_g = 0, n_all = 0, n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < n_resp; ++i) {
    if (per[i].empty()) continue;
    const auto s = response_ratio(per[i]);
    all_a += s.arithmetic;
    all_g += s.geometric;
    n_all += 1;
    if (obs.response_advantage[i] > 0) {
      pos_a += s.arithmetic;
      pos_g += s.geometric;
      n_pos += 1;
    } else if (obs.response_advantage[i] < 0) {
      neg_a += s.arithmetic;
      neg_g += s.geometric;
      n_neg += 1;
    }
  }
  if (n_all > 0) {
    m.is_ratio_mean = all_a / n_all;
    m.is_ratio_geo = all_g / n_all;
  }
  if (n_pos > 0) {
    m.is_ratio_pos_mean = pos_a / n_pos;
    m.is_ratio_pos_geo = pos_g / n_pos;
  }
  if (n_neg > 0) {
    m.is_ratio_neg_mean = neg_a / n_neg;
    m.is_ratio_neg_geo = neg_g / n_neg;
  }
  m.pos_responses = static_cast<std::uint64_t>(n_pos);
  m.neg_responses = static_cast<std::uint64_t>(n_neg);
  return m;
}

inline std::string format_record(const MetricRecord& m) {
  char buf[1024];
  std::snprintf(buf, sizeof(buf),
                "%llu,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%llu,%llu,%.8f,%llu,%llu,%llu,"
                "%.8f,%.8f,%.8e,%d",
                static_cast<unsigned long long>(m.step), m.entropy, m.hard_clip_fraction, m.soft_clip_fraction,
                m.repetition_rate, m.truncation_rate, m.kl_ref, m.kl_old, m.is_ratio_mean, m.is_ratio_geo,
                m.is_ratio_pos_mean, m.is_ratio_pos_geo, m.is_ratio_neg_mean, m.is_ratio_neg_geo,
                static_cast<unsigned long long>(m.pos_responses), static_cast<unsigned long long>(m.neg_responses),
                m.reward_mean, static_cast<unsigned long long>(m.dropped_groups),
                static_cast<unsigned long long>(m.kept_groups), static_cast<unsigned long long>(m.updates),
                m.eval_avg_at_k, m.eval_pass_at_k, m.learning_rate, m.aborted ? 1 : 0);
  return buf;
}

/// Header plus one fixed-format row per record.
inline void write_records(std::span<const MetricRecord> records, const std::string& path) {
  if (records.empty()) throw Error(ErrorCode::invalid_argument, "no metric records to write");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
  os << metric_columns << '\n';
  for (const auto& r : records) os << format_record(r) << '\n';
  if (!os) throw Error(ErrorCode::io_error, "failed writing " + path);
}

}  // namespace aspo

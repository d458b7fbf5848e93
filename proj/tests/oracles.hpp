// SPDX-License-Identifier: Apache-2.0
#pragma once

// Literal ratio-form objectives, written token by token from the textbook
// definitions (PPO min/clip with dual clip, CISPO's frozen clipped ratio, the
// pi_old * pi / sg(pi^2) flipped ratio, sequence-level geometric ratio).
// They share nothing with the frozen-weight implementation except the tape,
// so agreement of gradients is an independent check.

#include <cmath>
#include <random>
#include <vector>

#include "aspo/diffcore.hpp"
#include "aspo/objectives.hpp"

namespace oracle {

using aspo::ObjectiveConfig;
using aspo::Variant;
using aspo::diff::Var;

struct Tokens {
  std::vector<double> lp_old;
  std::vector<double> advantage;
  std::vector<std::uint32_t> response;
};

inline std::size_t responses(const Tokens& b) {
  std::uint32_t m = 0;
  for (auto r : b.response) m = std::max(m, r + 1);
  return m;
}

// PPO-clip term on ratio x, with the negative-side dual clip.
inline Var ppo_term(const Var& x, double a, const ObjectiveConfig& cfg, bool dual) {
  using namespace aspo::diff;
  Var t = minimum(x * a, clip(x, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * a);
  if (dual && a < 0) t = maximum(t, x.tape()->constant(cfg.dual_clip_c * a));
  return t;
}

/// Objective to maximize, from per-token log-probs `lp` (a vector Var).
inline Var literal_objective(const Var& lp, const Tokens& b, const ObjectiveConfig& cfg) {
  using namespace aspo::diff;
  Tape& tape = *lp.tape();
  const std::size_t n = b.lp_old.size();
  const std::size_t R = responses(b);
  std::vector<double> len(R, 0.0);
  for (auto r : b.response) len[r] += 1.0;

  auto weight_of = [&](std::size_t t) {
    return cfg.aggregation == aspo::Aggregation::token_mean ? 1.0 / static_cast<double>(n)
                                                           : 1.0 / (static_cast<double>(R) * len[b.response[t]]);
  };

  if (cfg.variant == Variant::gspo) {
    std::vector<Var> log_ratio(R);
    std::vector<bool> seen(R, false);
    for (std::size_t t = 0; t < n; ++t) {
      const Var d = pick(lp, t) - b.lp_old[t];
      const auto r = b.response[t];
      log_ratio[r] = seen[r] ? log_ratio[r] + d : d;
      seen[r] = true;
    }
    Var total = tape.constant(0.0);
    for (std::size_t i = 0; i < R; ++i) {
      const Var s = exp(log_ratio[i] / len[i]);
      double a = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        if (b.response[t] == i) a = b.advantage[t];
      }
      const double scale = cfg.aggregation == aspo::Aggregation::token_mean ? len[i] / static_cast<double>(n)
                                                                           : 1.0 / static_cast<double>(R);
      total = total + ppo_term(s, a, cfg, false) * scale;
    }
    return total;
  }

  std::vector<Var> mean_ratio(R);
  if (cfg.variant == Variant::pos_resp_mean) {
    std::vector<Var> sum(R);
    std::vector<bool> seen(R, false);
    for (std::size_t t = 0; t < n; ++t) {
      const Var r = exp(pick(lp, t) - b.lp_old[t]);
      const auto i = b.response[t];
      sum[i] = seen[i] ? sum[i] + r : r;
      seen[i] = true;
    }
    for (std::size_t i = 0; i < R; ++i) mean_ratio[i] = stop_gradient(sum[i] / len[i]);
  }

  Var total = tape.constant(0.0);
  for (std::size_t t = 0; t < n; ++t) {
    const double a = b.advantage[t];
    const Var l = pick(lp, t);
    const Var ratio = exp(l - b.lp_old[t]);
    Var term;
    switch (cfg.variant) {
      case Variant::grpo:
        term = ppo_term(ratio, a, cfg, cfg.negative_dual_clip);
        break;
      case Variant::no_is:
        term = ppo_term(ratio, a, cfg, cfg.negative_dual_clip) / stop_gradient(ratio);
        break;
      case Variant::pos_resp_mean:
        term = ppo_term(ratio, a, cfg, cfg.negative_dual_clip);
        if (a > 0) term = term * mean_ratio[b.response[t]] / stop_gradient(ratio);
        break;
      case Variant::cispo:
        term = stop_gradient(clip(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high)) * a * l;
        break;
      case Variant::aspo:
        if (a < 0) {
          term = ppo_term(ratio, a, cfg, cfg.negative_dual_clip);
        } else if (ratio.scalar() > 1.0 + cfg.eps_high) {
          term = stop_gradient(ratio) * a;  // masked on the original ratio
        } else {
          // pi_old * pi / sg(pi^2)
          const Var pi = exp(l);
          const Var flipped = tape.constant(std::exp(b.lp_old[t])) * pi / stop_gradient(pi * pi);
          term = flipped * a;
          if (flipped.scalar() > cfg.dual_clip_c) term = term * cfg.dual_clip_c / stop_gradient(flipped);
        }
        break;
      default:
        break;
    }
    total = total + term * weight_of(t);
  }
  return total;
}

/// Frozen-weight batch over the same tokens, lp_new bound to `lp`.
inline aspo::TokenBatch to_batch(const Var& lp, const Tokens& b) {
  aspo::TokenBatch out;
  out.lp_new = lp;
  out.lp_old = b.lp_old;
  out.advantage = b.advantage;
  out.response_id = b.response;
  out.generation_mask.assign(b.lp_old.size(), 1);
  return out;
}

/// Random token batch with ratios kept away from every clip boundary by
/// `margin` in log space, so central differences never straddle a kink.
struct RandomBatch {
  Tokens tokens;
  std::vector<double> lp_new;
};

inline bool near_boundary(double r, const ObjectiveConfig& cfg, double margin) {
  for (double b : {1.0 - cfg.eps_low, 1.0 + cfg.eps_high, cfg.dual_clip_c, 1.0 / cfg.dual_clip_c}) {
    if (std::abs(std::log(r) - std::log(b)) < margin) return true;
  }
  return false;
}

inline RandomBatch random_batch(std::mt19937_64& gen, const ObjectiveConfig& cfg, std::size_t n_tokens,
                                double margin = 1e-3) {
  std::uniform_real_distribution<double> lp_old(-3.0, -0.05), log_r(-1.6, 1.6), u(0.0, 1.0);
  RandomBatch out;
  auto& b = out.tokens;
  std::uint32_t response = 0;
  double adv = 0.0;
  for (std::size_t t = 0; t < n_tokens; ++t) {
    if (t == 0 || u(gen) < 0.3) {
      response = t == 0 ? 0 : response + 1;
      adv = (response % 2 == 0 ? 1.0 : -1.0) * (0.2 + 1.8 * u(gen));
    }
    double r;
    double old;
    do {
      old = lp_old(gen);
      r = std::exp(log_r(gen));
    } while (near_boundary(r, cfg, margin) || old + std::log(r) >= -1e-3);
    b.lp_old.push_back(old);
    b.advantage.push_back(adv);
    b.response.push_back(response);
    out.lp_new.push_back(old + std::log(r));
  }
  return out;
}

/// True when some response's sequence ratio sits within `margin` of a bound.
inline bool sequence_near_boundary(const RandomBatch& rb, const ObjectiveConfig& cfg, double margin = 1e-3) {
  const std::size_t R = responses(rb.tokens);
  std::vector<double> sum(R, 0.0), len(R, 0.0);
  for (std::size_t t = 0; t < rb.lp_new.size(); ++t) {
    sum[rb.tokens.response[t]] += rb.lp_new[t] - rb.tokens.lp_old[t];
    len[rb.tokens.response[t]] += 1.0;
  }
  for (std::size_t i = 0; i < R; ++i) {
    if (near_boundary(std::exp(sum[i] / len[i]), cfg, margin)) return true;
  }
  return false;
}

}  // namespace oracle

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-checks of the objectives: finite differences on random batches whose
// log-probabilities come from softmax logits, the reciprocal-weight identity
// between aspo and grpo, and zero sensitivity of hard-masked tokens.

#include <cmath>
#include <string>
#include <vector>

#include "aspo/diffcore.hpp"
#include "aspo/objectives.hpp"
#include "aspo/rng.hpp"

namespace aspo {

/// Tokens drawn from per-position logits; lp_old is set so the ratio lands
/// on a chosen value.
struct LogitBatch {
  std::size_t vocab = 5;
  std::vector<double> logits;  // tokens x vocab
  std::vector<std::size_t> token;
  std::vector<double> lp_old;
  std::vector<double> advantage;
  std::vector<std::uint32_t> response;

  std::size_t size() const { return token.size(); }

  diff::Var log_probs(const diff::Var& flat_logits) const {
    std::vector<diff::Var> lp;
    lp.reserve(size());
    for (std::size_t t = 0; t < size(); ++t) {
      std::vector<diff::Var> row;
      for (std::size_t v = 0; v < vocab; ++v) row.push_back(diff::pick(flat_logits, t * vocab + v));
      lp.push_back(diff::pick(diff::log_softmax(diff::concat(row)), token[t]));
    }
    return diff::concat(lp);
  }

  TokenBatch bind(const diff::Var& lp) const {
    TokenBatch b;
    b.lp_new = lp;
    b.lp_old = lp_old;
    b.advantage = advantage;
    b.response_id = response;
    b.generation_mask.assign(size(), 1);
    return b;
  }
};

namespace detail {

inline double log_softmax_at(std::span<const double> z, std::size_t k) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return z[k] - m - std::log(s);
}

inline bool near_clip_boundary(double r, const ObjectiveConfig& cfg, double margin) {
  for (double b : {1.0 - cfg.eps_low, 1.0 + cfg.eps_high, cfg.dual_clip_c, 1.0 / cfg.dual_clip_c}) {
    if (std::abs(std::log(r) - std::log(b)) < margin) return true;
  }
  return false;
}

}  // namespace detail

/// Random batch of `n` tokens in responses of 1..6 tokens with alternating
/// advantage signs. Ratios span [e^-1.6, e^1.6], so clipped and unclipped
/// tokens both occur, and stay at least `margin` (log space) away from every
/// clip boundary, including sequence-level ratios.
inline LogitBatch random_logit_batch(std::uint64_t seed, std::size_t n, const ObjectiveConfig& cfg,
                                     double margin = 1e-3) {
  Rng rng(seed);
  for (;;) {
    LogitBatch b;
    std::uint32_t response = 0;
    std::size_t left = 0;
    double adv = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      if (left == 0) {
        if (t > 0) ++response;
        left = static_cast<std::size_t>(rng.integer(1, 6));
        adv = (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(0.2, 2.0);
      }
      --left;
      std::vector<double> z(b.vocab);
      for (auto& v : z) v = rng.uniform(-2.0, 2.0);
      const auto k = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(b.vocab) - 1));
      double r;
      do r = std::exp(rng.uniform(-1.6, 1.6));
      while (detail::near_clip_boundary(r, cfg, margin));
      b.logits.insert(b.logits.end(), z.begin(), z.end());
      b.token.push_back(k);
      b.lp_old.push_back(detail::log_softmax_at(z, k) - std::log(r));
      b.advantage.push_back(adv);
      b.response.push_back(response);
    }
    // Sequence-level ratios must also keep their distance.
    std::vector<double> sum(response + 1, 0.0), len(response + 1, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      const std::span<const double> z(b.logits.data() + t * b.vocab, b.vocab);
      sum[b.response[t]] += detail::log_softmax_at(z, b.token[t]) - b.lp_old[t];
      len[b.response[t]] += 1.0;
    }
    bool ok = true;
    for (std::size_t i = 0; i <= response; ++i) ok = ok && !detail::near_clip_boundary(std::exp(sum[i] / len[i]), cfg, margin);
    if (ok) return b;
  }
}

struct VariantCheck {
  Variant variant;
  Aggregation aggregation;
  double max_rel_error = 0.0;
  std::size_t tokens = 0;   // largest batch
  std::size_t hard = 0;     // hard-masked tokens seen
  std::size_t soft = 0;     // soft-clipped tokens seen
  std::uint64_t worst_seed = 0;
};

/// check_gradient over `trials` random batches of 4..32 tokens.
inline VariantCheck check_variant(Variant v, Aggregation agg, std::uint64_t seed, std::size_t trials = 10) {
  ObjectiveConfig cfg;
  cfg.variant = v;
  cfg.aggregation = agg;
  VariantCheck out{v, agg};
  Rng sizes(derive_seed({seed, static_cast<std::uint64_t>(v)}));
  for (std::size_t i = 0; i < trials; ++i) {
    const std::uint64_t s = derive_seed({seed, static_cast<std::uint64_t>(v), static_cast<std::uint64_t>(agg), i});
    const auto b = random_logit_batch(s, static_cast<std::size_t>(sizes.integer(4, 32)), cfg);
    const auto f = [&](diff::Tape&, const diff::Var& x) {
      return evaluate_objective(b.bind(b.log_probs(x)), cfg).objective;
    };
    const double err = diff::check_gradient(f, b.logits, 1e-6);
    if (err >= out.max_rel_error) {
      out.max_rel_error = err;
      out.worst_seed = s;
    }
    diff::Tape tape;
    const auto res = evaluate_objective(b.bind(b.log_probs(tape.variable(b.logits))), cfg);
    for (const auto& w : res.weights) {
      out.hard += w.hard_masked;
      out.soft += w.soft_clipped;
    }
    out.tokens = std::max(out.tokens, b.size());
  }
  return out;
}

/// Largest deviation of grad(aspo) / grad(grpo) from (pi_old / pi_theta)^2
/// on single unclipped positive tokens, over logits.
inline double reciprocal_identity_error(std::uint64_t seed, std::size_t trials = 50) {
  Rng rng(seed);
  double worst = 0.0;
  const ObjectiveConfig base;
  for (std::size_t i = 0; i < trials; ++i) {
    LogitBatch b;
    std::vector<double> z(b.vocab);
    for (auto& v : z) v = rng.uniform(-2.0, 2.0);
    const auto k = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(b.vocab) - 1));
    // Unclipped for both: r in (1/c, 1 + eps_high).
    const double r = rng.uniform(1.0 / base.dual_clip_c + 0.01, 1.0 + base.eps_high - 0.01);
    b.logits = z;
    b.token = {k};
    b.lp_old = {detail::log_softmax_at(z, k) - std::log(r)};
    b.advantage = {rng.uniform(0.2, 2.0)};
    b.response = {0};
    auto grad = [&](Variant v) {
      ObjectiveConfig cfg = base;
      cfg.variant = v;
      diff::Tape tape;
      const diff::Var x = tape.variable(b.logits);
      tape.backward(evaluate_objective(b.bind(b.log_probs(x)), cfg).objective);
      return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    const auto g = grad(Variant::grpo), a = grad(Variant::aspo);
    const double pi_theta = std::exp(detail::log_softmax_at(z, k));
    const double pi_old = std::exp(b.lp_old[0]);
    const double want = (pi_old / pi_theta) * (pi_old / pi_theta);
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (std::abs(g[j]) < 1e-12) continue;
      worst = std::max(worst, std::abs(a[j] / g[j] - want) / std::max(1.0, want));
    }
  }
  return worst;
}

/// Largest objective change when perturbing the logits of hard-masked
/// tokens, with frozen weights held at their base values.
inline double masked_perturbation_change(std::uint64_t seed, std::size_t trials = 20) {
  double worst = 0.0;
  for (auto v : all_variants) {
    ObjectiveConfig cfg;
    cfg.variant = v;
    for (std::size_t i = 0; i < trials; ++i) {
      const auto b = random_logit_batch(derive_seed({seed, static_cast<std::uint64_t>(v), i}), 16, cfg);
      diff::Tape tape;
      const auto res = evaluate_objective(b.bind(b.log_probs(tape.variable(b.logits))), cfg);
      // A gspo response is masked as a whole; token-level variants per token.
      std::vector<bool> masked(b.size());
      for (std::size_t t = 0; t < b.size(); ++t) masked[t] = res.weights[t].hard_masked;
      for (std::size_t t = 0; t < b.size(); ++t) {
        if (!masked[t]) continue;
        auto logits = b.logits;
        for (std::size_t u = 0; u < b.vocab; ++u) logits[t * b.vocab + u] += 1e-7 * static_cast<double>(u + 1);
        // Frozen weights stay at their base values, as in a finite difference.
        diff::Tape t2;
        t2.pin_frozen(tape.frozen_values());
        const auto moved = evaluate_objective(b.bind(b.log_probs(t2.variable(logits))), cfg);
        bool same_mask = true;
        for (std::size_t u = 0; u < b.size(); ++u) same_mask = same_mask && moved.weights[u].hard_masked == masked[u];
        if (same_mask) worst = std::max(worst, std::abs(moved.objective.scalar() - res.objective.scalar()));
      }
    }
  }
  return worst;
}

}  // namespace aspo

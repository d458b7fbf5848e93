// SPDX-License-Identifier: Apache-2.0
#pragma once

// Token-weighted surrogate objectives.
//
// Every token-level variant is written in one frozen-weight form
//
//     J = sum_t  kappa_t * sg(w_t) * A_t * log pi_theta(o_t)      (unmasked t)
//
// whose gradient is sum_t kappa_t * w_t * A_t * grad log pi_theta(o_t). For
// the PPO-clip objective this equals the gradient of min(r A, clip(r) A),
// since grad r = r grad log pi. The variants differ only in w_t and in which
// tokens are masked; kappa_t is the aggregation coefficient. The sequence-level
// variant (gspo) uses one weight s_i per response in the same form.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aspo/diffcore.hpp"
#include "aspo/error.hpp"

namespace aspo {

enum class Variant { grpo, no_is, pos_resp_mean, cispo, gspo, aspo };

inline constexpr std::array<Variant, 6> all_variants = {Variant::grpo,  Variant::no_is, Variant::pos_resp_mean,
                                                        Variant::cispo, Variant::gspo,  Variant::aspo};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::grpo: return "grpo";
    case Variant::no_is: return "no_is";
    case Variant::pos_resp_mean: return "pos_resp_mean";
    case Variant::cispo: return "cispo";
    case Variant::gspo: return "gspo";
    case Variant::aspo: return "aspo";
  }
  return "unknown";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : all_variants) {
    if (s == to_string(v)) return v;
  }
  throw Error(ErrorCode::unknown_variant, "unknown objective variant '" + std::string(s) + "'");
}

enum class Aggregation { token_mean, response_mean };

inline std::string_view to_string(Aggregation a) { return a == Aggregation::token_mean ? "token_mean" : "response_mean"; }
inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "token_mean") return Aggregation::token_mean;
  if (s == "response_mean") return Aggregation::response_mean;
  throw Error(ErrorCode::invalid_argument, "unknown aggregation '" + std::string(s) + "'");
}

enum class KlMode { exact, k3 };

inline std::string_view to_string(KlMode m) { return m == KlMode::exact ? "exact" : "k3"; }
inline KlMode parse_kl_mode(std::string_view s) {
  if (s == "exact") return KlMode::exact;
  if (s == "k3") return KlMode::k3;
  throw Error(ErrorCode::invalid_argument, "unknown kl mode '" + std::string(s) + "'");
}

struct ObjectiveConfig {
  Variant variant = Variant::grpo;
  double eps_low = 0.2;
  double eps_high = 0.28;
  double dual_clip_c = 3.0;
  double kl_beta = 0.0;
  KlMode kl_mode = KlMode::k3;
  Aggregation aggregation = Aggregation::token_mean;
  /// Dual clip on negative-advantage tokens (all PPO-clip style variants).
  bool negative_dual_clip = true;

  void validate() const {
    if (!(eps_low > 0.0 && eps_low < 1.0)) throw ConfigError("objective.eps_low", "must lie in (0, 1)");
    if (!(eps_high > 0.0)) throw ConfigError("objective.eps_high", "must be positive");
    if (!(dual_clip_c > 1.0 + eps_high)) throw ConfigError("objective.dual_clip_c", "must exceed 1 + eps_high");
    if (!(kl_beta >= 0.0)) throw ConfigError("objective.kl_beta", "must be non-negative");
  }
};

struct TokenWeightResult {
  double weight = 1.0;
  bool hard_masked = false;   // no gradient
  bool soft_clipped = false;  // weight is a clip bound, gradient still flows
};

namespace detail {

// PPO-clip rule for A < 0: mask below 1 - eps_low, dual clip (hard) above c.
inline TokenWeightResult negative_rule(double r, double w, const ObjectiveConfig& cfg) {
  if (r < 1.0 - cfg.eps_low) return {w, true, false};
  if (cfg.negative_dual_clip && r > cfg.dual_clip_c) return {cfg.dual_clip_c, true, false};
  return {w, false, false};
}

}  // namespace detail

/// Weight and clip outcome of one token. `response_mean_ratio` is only read
/// by pos_resp_mean; for gspo `ratio` is the sequence-level ratio.
inline TokenWeightResult token_weight(Variant variant, double ratio, double advantage, double response_mean_ratio,
                                      const ObjectiveConfig& cfg) {
  if (!(ratio > 0.0)) throw Error(ErrorCode::domain_error, "ratio must be positive");
  const bool positive = advantage > 0.0;
  const double upper = 1.0 + cfg.eps_high;
  const double lower = 1.0 - cfg.eps_low;
  switch (variant) {
    case Variant::grpo:
      if (positive) return {ratio, ratio > upper, false};
      return detail::negative_rule(ratio, ratio, cfg);
    case Variant::no_is:
      if (positive) return {1.0, ratio > upper, false};
      return detail::negative_rule(ratio, 1.0, cfg);
    case Variant::pos_resp_mean:
      if (positive) return {response_mean_ratio, ratio > upper, false};
      return detail::negative_rule(ratio, ratio, cfg);
    case Variant::cispo: {
      const double w = std::clamp(ratio, lower, upper);
      return {w, false, w != ratio};
    }
    case Variant::gspo:
      if (positive) return {ratio, ratio > upper, false};
      return {ratio, ratio < lower, false};
    case Variant::aspo: {
      if (!positive) return detail::negative_rule(ratio, ratio, cfg);
      // Mask on the original ratio, then flip.
      if (ratio > upper) return {1.0 / ratio, true, false};
      const double flipped = 1.0 / ratio;
      if (flipped > cfg.dual_clip_c) return {cfg.dual_clip_c, false, true};
      return {flipped, false, false};
    }
  }
  throw Error(ErrorCode::unknown_variant, "unknown objective variant");
}

/// Flattened per-token records of one or more responses.
struct TokenBatch {
  diff::Var lp_new;  // vector over tokens, differentiable
  std::vector<double> lp_old;
  std::vector<double> lp_ref;  // empty when no reference policy is attached
  std::vector<double> advantage;
  std::vector<std::uint32_t> response_id;  // dense ids 0 .. responses-1
  std::vector<std::uint32_t> position;
  std::vector<std::uint8_t> generation_mask;
  // Full next-token log-distributions, only needed for exact KL.
  std::vector<diff::Var> dist_new;
  std::vector<std::vector<double>> dist_ref;

  std::size_t size() const { return lp_old.size(); }

  std::size_t response_count() const {
    std::uint32_t m = 0;
    for (auto id : response_id) m = std::max(m, id + 1);
    return response_id.empty() ? 0 : m;
  }

  void validate() const {
    const auto n = size();
    if (n == 0) throw Error(ErrorCode::invalid_argument, "empty token batch");
    if (!lp_new.valid() || lp_new.shape() != diff::Shape::vector(n)) {
      throw Error(ErrorCode::shape_mismatch, "lp_new must be a vector of " + std::to_string(n));
    }
    if (advantage.size() != n || response_id.size() != n || generation_mask.size() != n ||
        (!position.empty() && position.size() != n) || (!lp_ref.empty() && lp_ref.size() != n)) {
      throw Error(ErrorCode::shape_mismatch, "per-token fields disagree in length");
    }
    std::vector<double> seen(response_count(), std::nan(""));
    for (std::size_t t = 0; t < n; ++t) {
      auto& s = seen[response_id[t]];
      if (std::isnan(s)) s = advantage[t];
      else if (s != advantage[t]) throw Error(ErrorCode::invalid_argument, "advantage varies within a response");
    }
  }
};

/// r_t = exp(lp_new - lp_old).
inline std::vector<double> token_ratios(const TokenBatch& batch) {
  const auto lp = batch.lp_new.value();
  std::vector<double> r(batch.size());
  for (std::size_t t = 0; t < r.size(); ++t) r[t] = std::exp(lp[t] - batch.lp_old[t]);
  return r;
}

/// Per-response arithmetic mean of r over generated tokens.
inline std::vector<double> response_mean_ratios(const TokenBatch& batch, std::span<const double> ratios) {
  const auto n_resp = batch.response_count();
  std::vector<double> sum(n_resp, 0.0), count(n_resp, 0.0);
  for (std::size_t t = 0; t < batch.size(); ++t) {
    if (!batch.generation_mask[t]) continue;
    sum[batch.response_id[t]] += ratios[t];
    count[batch.response_id[t]] += 1.0;
  }
  for (std::size_t i = 0; i < n_resp; ++i) sum[i] = count[i] > 0 ? sum[i] / count[i] : 1.0;
  return sum;
}

/// Per-response s_i = exp(mean over generated tokens of (lp_new - lp_old)).
inline std::vector<double> sequence_ratios(const TokenBatch& batch) {
  const auto lp = batch.lp_new.value();
  const auto n_resp = batch.response_count();
  // Running mean, so a constant log-ratio d gives exactly exp(d).
  std::vector<double> mean(n_resp, 0.0), count(n_resp, 0.0);
  for (std::size_t t = 0; t < batch.size(); ++t) {
    if (!batch.generation_mask[t]) continue;
    const auto i = batch.response_id[t];
    count[i] += 1.0;
    mean[i] += ((lp[t] - batch.lp_old[t]) - mean[i]) / count[i];
  }
  std::vector<double> s(n_resp);
  for (std::size_t i = 0; i < n_resp; ++i) {
    if (count[i] == 0.0) throw Error(ErrorCode::empty_response, "response " + std::to_string(i) + " has no tokens");
    s[i] = std::exp(mean[i]);
  }
  return s;
}

/// kappa_t: 1 / (generated tokens) for token_mean, 1 / (responses * |o_i|)
/// for response_mean. Zero for tokens outside the generation mask.
inline std::vector<double> aggregation_coefficients(const TokenBatch& batch, Aggregation agg) {
  const auto n_resp = batch.response_count();
  std::vector<double> len(n_resp, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < batch.size(); ++t) {
    if (!batch.generation_mask[t]) continue;
    len[batch.response_id[t]] += 1.0;
    total += 1.0;
  }
  double live = 0.0;
  for (double l : len) live += l > 0 ? 1.0 : 0.0;
  std::vector<double> k(batch.size(), 0.0);
  for (std::size_t t = 0; t < batch.size(); ++t) {
    if (!batch.generation_mask[t]) continue;
    k[t] = agg == Aggregation::token_mean ? 1.0 / total : 1.0 / (live * len[batch.response_id[t]]);
  }
  return k;
}

struct ObjectiveResult {
  diff::Var objective;  // scalar to maximize
  double surrogate = 0.0;  // sum_t kappa_t * w_t * A_t over unmasked tokens
  std::vector<TokenWeightResult> weights;
  std::vector<double> ratios;  // token r_t (gspo: the response's s_i)
  bool empty = false;          // every generated token was hard-masked

  double hard_fraction(std::span<const std::uint8_t> mask) const { return fraction(mask, true); }
  double soft_fraction(std::span<const std::uint8_t> mask) const { return fraction(mask, false); }

 private:
  double fraction(std::span<const std::uint8_t> mask, bool hard) const {
    double n = 0.0, k = 0.0;
    for (std::size_t t = 0; t < weights.size(); ++t) {
      if (!mask[t]) continue;
      n += 1.0;
      k += (hard ? weights[t].hard_masked : weights[t].soft_clipped) ? 1.0 : 0.0;
    }
    return n > 0 ? k / n : 0.0;
  }
};

namespace detail {

inline ObjectiveResult assemble(const TokenBatch& batch, const ObjectiveConfig& cfg, std::vector<TokenWeightResult> w,
                                std::vector<double> ratios) {
  const auto kappa = aggregation_coefficients(batch, cfg.aggregation);
  std::vector<double> coef(batch.size(), 0.0);
  ObjectiveResult out;
  bool any = false;
  for (std::size_t t = 0; t < batch.size(); ++t) {
    if (!batch.generation_mask[t] || w[t].hard_masked) continue;
    coef[t] = kappa[t] * w[t].weight * batch.advantage[t];
    out.surrogate += coef[t];
    any = true;
  }
  diff::Tape& tape = *batch.lp_new.tape();
  const diff::Var frozen = tape.stop_gradient(batch.lp_new, std::move(coef), batch.lp_new.shape());
  out.objective = diff::sum(frozen * batch.lp_new);
  out.weights = std::move(w);
  out.ratios = std::move(ratios);
  out.empty = !any;
  return out;
}

}  // namespace detail

/// Token-level variants (all but gspo).
inline ObjectiveResult surrogate_objective(const TokenBatch& batch, const ObjectiveConfig& cfg) {
  if (cfg.variant == Variant::gspo) {
    throw Error(ErrorCode::invalid_argument, "gspo is sequence-level; use gspo_objective");
  }
  batch.validate();
  auto ratios = token_ratios(batch);
  const auto resp_mean = response_mean_ratios(batch, ratios);
  std::vector<TokenWeightResult> w(batch.size());
  for (std::size_t t = 0; t < batch.size(); ++t) {
    w[t] = token_weight(cfg.variant, ratios[t], batch.advantage[t], resp_mean[batch.response_id[t]], cfg);
  }
  return detail::assemble(batch, cfg, std::move(w), std::move(ratios));
}

/// Sequence-level ratio s_i with PPO-style clipping per response. Unclipped
/// responses contribute s_i * A_i * mean_t grad log pi, scaled by the
/// aggregation (1/responses for response_mean, |o_i|/tokens for token_mean).
inline ObjectiveResult gspo_objective(const TokenBatch& batch, const ObjectiveConfig& cfg) {
  batch.validate();
  const auto s = sequence_ratios(batch);
  std::vector<TokenWeightResult> w(batch.size());
  std::vector<double> ratios(batch.size());
  for (std::size_t t = 0; t < batch.size(); ++t) {
    const double si = s[batch.response_id[t]];
    w[t] = token_weight(Variant::gspo, si, batch.advantage[t], si, cfg);
    ratios[t] = si;
  }
  return detail::assemble(batch, cfg, std::move(w), std::move(ratios));
}

inline ObjectiveResult evaluate_objective(const TokenBatch& batch, const ObjectiveConfig& cfg) {
  return cfg.variant == Variant::gspo ? gspo_objective(batch, cfg) : surrogate_objective(batch, cfg);
}

/// beta * mean over generated tokens of the KL estimate to the reference.
/// exact: sum_v pi(v) (log pi(v) - log pi_ref(v)) at each position.
/// k3:    exp(d) - d - 1 with d = lp_ref - lp_new on the sampled token.
inline diff::Var kl_penalty(const TokenBatch& batch, double beta, KlMode mode) {
  diff::Tape& tape = *batch.lp_new.tape();
  std::vector<double> mask(batch.size());
  double count = 0.0;
  for (std::size_t t = 0; t < batch.size(); ++t) {
    mask[t] = batch.generation_mask[t] ? 1.0 : 0.0;
    count += mask[t];
  }
  if (count == 0.0) throw Error(ErrorCode::invalid_argument, "no generated tokens");
  for (auto& m : mask) m = m * beta / count;
  const diff::Var weights = tape.constant(std::move(mask));

  if (mode == KlMode::k3) {
    if (batch.lp_ref.size() != batch.size()) throw Error(ErrorCode::missing_reference, "lp_ref is absent");
    const diff::Var ref = tape.constant(batch.lp_ref);
    const diff::Var d = ref - batch.lp_new;
    const diff::Var per_token = diff::exp(d) - d - 1.0;
    return diff::sum(weights * per_token);
  }
  if (batch.dist_new.size() != batch.size() || batch.dist_ref.size() != batch.size()) {
    throw Error(ErrorCode::missing_reference, "exact KL needs full distributions for policy and reference");
  }
  std::vector<diff::Var> per_token;
  per_token.reserve(batch.size());
  for (std::size_t t = 0; t < batch.size(); ++t) {
    const diff::Var& lp = batch.dist_new[t];
    const diff::Var ref = tape.constant(batch.dist_ref[t]);
    per_token.push_back(diff::sum(diff::exp(lp) * (lp - ref)));
  }
  return diff::sum(weights * diff::concat(per_token));
}

// ---------------------------------------------------------------------------
// Weight surface

struct SurfacePoint {
  double pi_old = 0.0;
  double pi_theta = 0.0;
  TokenWeightResult result;
};

/// Axis values (i + 1) / resolution, i = 0 .. resolution - 1.
inline std::vector<double> surface_axis(std::size_t resolution) {
  if (resolution < 2) throw Error(ErrorCode::invalid_argument, "resolution must be >= 2");
  std::vector<double> a(resolution);
  for (std::size_t i = 0; i < resolution; ++i) a[i] = static_cast<double>(i + 1) / static_cast<double>(resolution);
  return a;
}

/// token_weight over (pi_old, pi_theta) pairs for a single-token response,
/// so response-level ratios coincide with the token ratio.
inline std::vector<SurfacePoint> weight_surface(Variant variant, std::span<const std::pair<double, double>> grid,
                                                double advantage_sign, const ObjectiveConfig& cfg) {
  std::vector<SurfacePoint> out;
  out.reserve(grid.size());
  for (const auto& [pi_old, pi_theta] : grid) {
    if (!(pi_old > 0.0 && pi_old <= 1.0 && pi_theta > 0.0 && pi_theta <= 1.0)) {
      throw Error(ErrorCode::domain_error, "probabilities must lie in (0, 1]");
    }
    const double r = pi_theta / pi_old;
    out.push_back({pi_old, pi_theta, token_weight(variant, r, advantage_sign, r, cfg)});
  }
  return out;
}

/// Full resolution x resolution grid, pi_old major.
inline std::vector<std::pair<double, double>> surface_grid(std::size_t resolution) {
  const auto axis = surface_axis(resolution);
  std::vector<std::pair<double, double>> g;
  g.reserve(axis.size() * axis.size());
  for (double po : axis) {
    for (double pt : axis) g.emplace_back(po, pt);
  }
  return g;
}

/// Columns: pi_old,pi_theta,weight,hard_masked,soft_clipped.
inline void write_surface_csv(const std::string& path, std::span<const SurfacePoint> points) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
  os << "pi_old,pi_theta,weight,hard_masked,soft_clipped\n";
  char buf[128];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.10f,%d,%d\n", p.pi_old, p.pi_theta, p.result.weight,
                  p.result.hard_masked ? 1 : 0, p.result.soft_clipped ? 1 : 0);
    os << buf;
  }
  if (!os) throw Error(ErrorCode::io_error, "failed writing " + path);
}

}  // namespace aspo

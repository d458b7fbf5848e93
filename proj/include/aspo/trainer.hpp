// SPDX-License-Identifier: Apache-2.0
#pragma once

// Outer RL loop: sample G responses per prompt under a frozen old policy,
// drop zero-variance groups, then run ppo_epochs passes over the batch in
// prompt-partitioned minibatches, maximizing the configured objective with
// Adam.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "aspo/advantage.hpp"
#include "aspo/diffcore.hpp"
#include "aspo/error.hpp"
#include "aspo/objectives.hpp"
#include "aspo/policy.hpp"
#include "aspo/rng.hpp"
#include "aspo/tasks.hpp"
#include "aspo/telemetry.hpp"

namespace aspo {

struct TrainConfig {
  TaskKind task = TaskKind::digit_sum;
  TaskBounds task_bounds;
  std::size_t group_size = 8;
  std::size_t prompts_per_batch = 32;
  std::size_t minibatch_prompts = 8;
  std::size_t ppo_epochs = 3;
  double learning_rate = 1e-3;
  std::size_t max_len = 8;
  double temperature = 1.0;
  std::size_t total_steps = 400;
  std::size_t eval_interval = 10;
  std::size_t eval_prompts = 64;
  std::size_t eval_samples = 8;  // k of avg@k / pass@k
  double eval_temperature = 0.8;
  std::size_t max_resample = 3;
  std::size_t checkpoint_interval = 0;  // 0 disables
  std::uint64_t seed = 1;
  ObjectiveConfig objective;
  PolicyShape policy;

  TaskBounds bounds() const {
    TaskBounds b = task_bounds;
    b.max_len = max_len;
    return b;
  }

  std::size_t minibatches() const { return prompts_per_batch / minibatch_prompts; }
  std::size_t updates_per_batch() const { return ppo_epochs * minibatches(); }

  void validate() const {
    if (group_size < 2) throw ConfigError("train.group_size", "must be >= 2");
    if (prompts_per_batch < 1) throw ConfigError("train.prompts_per_batch", "must be >= 1");
    if (minibatch_prompts < 1 || prompts_per_batch % minibatch_prompts != 0) {
      throw ConfigError("train.minibatch_prompts", "must divide train.prompts_per_batch");
    }
    if (ppo_epochs < 1) throw ConfigError("train.ppo_epochs", "must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("train.learning_rate", "must be finite and non-negative");
    }
    if (max_len < 1) throw ConfigError("train.max_len", "must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("train.temperature", "must be positive");
    if (!(eval_temperature > 0.0)) throw ConfigError("train.eval_temperature", "must be positive");
    if (total_steps < 1) throw ConfigError("train.total_steps", "must be >= 1");
    if (eval_interval < 1) throw ConfigError("train.eval_interval", "must be >= 1");
    if (eval_samples < 1) throw ConfigError("train.eval_samples", "must be >= 1");
    if (policy.features != prompt_feature_width) throw ConfigError("policy.features", "must be 40");
    if (policy.vocab != static_cast<std::size_t>(Vocabulary::size)) throw ConfigError("policy.vocab", "must be 16");
    if (policy.embed_dim < 1 || policy.context < 1 || policy.hidden < 1) {
      throw ConfigError("policy", "dimensions must be positive");
    }
    validate_task();
    objective.validate();
  }

  void validate_task() const {
    aspo::validate(bounds());
    Prompt longest;
    longest.kind = task;
    if (task == TaskKind::digit_sum) {
      longest.a = longest.b = task_bounds.operand_max;
    } else {
      longest.length = task_bounds.parity_max_length;
    }
    if (reference_answer(longest).size() > max_len) {
      throw ConfigError("train.max_len", "shorter than the longest rewarded answer");
    }
  }
};

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction, used for ascent.
struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double epsilon = 1e-8;

  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}

  void ascend(std::span<double> params, std::span<const double> grad, double lr) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      params[i] += lr * mh / (std::sqrt(vh) + epsilon);
    }
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// ---------------------------------------------------------------------------
// Rollouts

struct Rollouts {
  std::vector<RolloutGroup> sampled;  // every group drawn this step, all attempts
  std::vector<RolloutGroup> kept;     // non-degenerate, advantages filled
  std::size_t dropped = 0;
  std::size_t attempts = 0;

  std::size_t response_count() const {
    std::size_t n = 0;
    for (const auto& g : kept) n += g.size();
    return n;
  }
};

inline std::uint64_t train_prompt_lane(std::uint64_t seed) { return derive_seed({seed, 0x747261696eULL}); }
inline std::uint64_t eval_prompt_lane(std::uint64_t seed) { return derive_seed({seed, 0x6576616cULL}); }

/// Samples and scores one group.
inline RolloutGroup sample_group(const PolicyParams& old, const Prompt& prompt, const TrainConfig& cfg,
                                 std::uint64_t group_seed) {
  RolloutGroup g;
  g.prompt = prompt;
  const auto features = prompt.features();
  for (std::size_t j = 0; j < cfg.group_size; ++j) {
    auto r = sample(old, features, cfg.max_len, cfg.temperature, derive_seed({group_seed, j}), prompt.id);
    auto outcome = verify(prompt, r.tokens);
    g.rewards.push_back(outcome.reward);
    g.outcomes.push_back(outcome);
    g.responses.push_back(std::move(r));
  }
  return g;
}

/// One batch under `old`. Groups whose rewards are all equal are dropped;
/// when every group is degenerate, fresh prompts are drawn up to
/// cfg.max_resample more times.
inline Rollouts collect_rollouts(const PolicyParams& old, const TrainConfig& cfg, std::uint64_t step) {
  const auto lane = train_prompt_lane(cfg.seed);
  const auto bounds = cfg.bounds();
  Rollouts out;
  for (std::size_t attempt = 0; attempt <= cfg.max_resample; ++attempt) {
    ++out.attempts;
    std::vector<RolloutGroup> groups;
    for (std::size_t i = 0; i < cfg.prompts_per_batch; ++i) {
      const std::uint64_t index = (step * (cfg.max_resample + 1) + attempt) * cfg.prompts_per_batch + i;
      const Prompt p = generate_prompt(cfg.task, lane, index, bounds);
      groups.push_back(sample_group(old, p, cfg, derive_seed({cfg.seed, step, attempt, i, 0x726f6c6cULL})));
    }
    out.sampled.insert(out.sampled.end(), groups.begin(), groups.end());
    auto filtered = filter_degenerate(std::move(groups));
    out.dropped += filtered.dropped;
    if (!filtered.kept.empty()) {
      out.kept = std::move(filtered.kept);
      break;
    }
  }
  for (auto& g : out.kept) g.advantages = group_advantage(g.rewards);
  return out;
}

// ---------------------------------------------------------------------------
// Minibatch graph

struct MinibatchGraph {
  TokenBatch batch;
  PolicyVars vars;
};

/// Builds the differentiable token batch for `groups` on `tape`.
inline MinibatchGraph build_minibatch(diff::Tape& tape, const PolicyParams& live, const PolicyParams* reference,
                                      std::span<const RolloutGroup* const> groups, const TrainConfig& cfg) {
  MinibatchGraph mg;
  mg.vars = bind(tape, live);
  auto& b = mg.batch;
  std::vector<diff::Var> lp_parts;
  const bool want_ref = reference != nullptr && cfg.objective.kl_beta > 0.0;
  const bool exact = want_ref && cfg.objective.kl_mode == KlMode::exact;
  std::uint32_t rid = 0;
  for (const RolloutGroup* g : groups) {
    const auto features = g->prompt.features();
    for (std::size_t i = 0; i < g->size(); ++i, ++rid) {
      const auto& r = g->responses[i];
      auto lp = log_probs(tape, mg.vars, live.shape(), features, r.tokens, cfg.temperature);
      std::vector<double> ref_dist(live.shape().vocab);
      std::unique_ptr<PolicyEvaluator> ref_eval;
      if (want_ref) ref_eval = std::make_unique<PolicyEvaluator>(*reference, features);
      for (std::size_t t = 0; t < r.tokens.size(); ++t) {
        lp_parts.push_back(lp.token[t]);
        b.lp_old.push_back(r.log_probs[t]);
        b.advantage.push_back(g->advantages[i]);
        b.response_id.push_back(rid);
        b.position.push_back(static_cast<std::uint32_t>(t));
        b.generation_mask.push_back(1);
        if (want_ref) {
          ref_eval->next_log_probs(r.tokens, t, cfg.temperature, ref_dist);
          b.lp_ref.push_back(ref_dist[static_cast<std::size_t>(r.tokens[t])]);
          if (exact) {
            b.dist_new.push_back(lp.distribution[t]);
            b.dist_ref.push_back(ref_dist);
          }
        }
      }
    }
  }
  b.lp_new = diff::concat(lp_parts);
  return mg;
}

/// Flattened parameter gradient, in PolicyParams::flat order.
inline std::vector<double> gather_gradient(const PolicyVars& vars, const PolicyParams& like) {
  std::vector<double> g(like.size());
  for (std::size_t t = 0; t < PolicyParams::count; ++t) {
    const auto grad = vars.tensors[t].grad();
    std::copy(grad.begin(), grad.end(), g.begin() + static_cast<std::ptrdiff_t>(like.offset(static_cast<PolicyParams::Tensor>(t))));
  }
  return g;
}

struct StepOutcome {
  std::size_t updates = 0;
  bool aborted = false;
  StepObservation observation;
};

/// Deterministic per-epoch ordering of kept groups.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t step, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed({seed, step, epoch, 0x7065726dULL}));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i - 1)));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

/// ppo_epochs x (prompts_per_batch / minibatch_prompts) update slots over the
/// same batch. Minibatches are contiguous slices of a shuffled group order,
/// so whole groups travel together; a slot whose slice is empty (fewer kept
/// groups than slots) leaves the parameters untouched. On a non-finite
/// gradient the step is rolled back and `aborted` is set.
inline StepOutcome run_step(PolicyParams& live, AdamState& adam, const Rollouts& rollouts, const TrainConfig& cfg,
                            double learning_rate, std::uint64_t step, const PolicyParams* reference = nullptr) {
  StepOutcome out;
  const auto n_groups = rollouts.kept.size();
  const auto slots = cfg.minibatches();
  const PolicyParams live_before = live;
  const AdamState adam_before = adam;

  // Global response index of each kept group's first response.
  std::vector<std::uint32_t> first_response(n_groups, 0);
  for (std::size_t g = 1; g < n_groups; ++g) {
    first_response[g] = first_response[g - 1] + static_cast<std::uint32_t>(rollouts.kept[g - 1].size());
  }
  auto& obs = out.observation;
  for (const auto& g : rollouts.kept) obs.response_advantage.insert(obs.response_advantage.end(), g.advantages.begin(), g.advantages.end());

  for (std::size_t epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    const auto order = epoch_order(n_groups, cfg.seed, step, epoch);
    const bool last_epoch = epoch + 1 == cfg.ppo_epochs;
    for (std::size_t k = 0; k < slots; ++k) {
      const std::size_t lo = k * n_groups / slots, hi = (k + 1) * n_groups / slots;
      ++out.updates;
      if (lo == hi) continue;
      std::vector<const RolloutGroup*> mb;
      std::vector<std::size_t> mb_index;
      for (std::size_t i = lo; i < hi; ++i) {
        mb.push_back(&rollouts.kept[order[i]]);
        mb_index.push_back(order[i]);
      }

      auto abort = [&] {
        live = live_before;
        adam = adam_before;
        out.aborted = true;
        return out;
      };
      const auto is_finite = [](double v) { return std::isfinite(v); };

      diff::Tape tape;
      auto graph = build_minibatch(tape, live, reference, mb, cfg);
      const auto lp_values = graph.batch.lp_new.value();
      if (!std::all_of(lp_values.begin(), lp_values.end(), is_finite)) return abort();
      const auto result = evaluate_objective(graph.batch, cfg.objective);
      diff::Var total = result.objective;
      if (cfg.objective.kl_beta > 0.0) total = total - kl_penalty(graph.batch, cfg.objective.kl_beta, cfg.objective.kl_mode);
      tape.backward(total);
      const auto grad = gather_gradient(graph.vars, live);
      if (!std::all_of(grad.begin(), grad.end(), is_finite)) return abort();
      if (last_epoch) {
        // Map minibatch-local response ids back to kept-batch order.
        std::vector<std::uint32_t> local_to_global;
        for (std::size_t gi : mb_index) {
          for (std::size_t i = 0; i < rollouts.kept[gi].size(); ++i) {
            local_to_global.push_back(first_response[gi] + static_cast<std::uint32_t>(i));
          }
        }
        const auto lp = graph.batch.lp_new.value();
        for (std::size_t t = 0; t < graph.batch.size(); ++t) {
          obs.ratio.push_back(result.ratios[t]);
          obs.hard.push_back(result.weights[t].hard_masked ? 1 : 0);
          obs.soft.push_back(result.weights[t].soft_clipped ? 1 : 0);
          obs.lp_new.push_back(lp[t]);
          obs.lp_old.push_back(graph.batch.lp_old[t]);
          obs.response.push_back(local_to_global[graph.batch.response_id[t]]);
        }
      }
      adam.ascend(live.flat(), grad, learning_rate);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double avg_at_k = 0.0;
  double pass_at_k = 0.0;
};

/// avg@k: mean success over k samples per prompt; pass@k: fraction of
/// prompts with at least one success. Prompts come from the evaluation lane
/// of `seed`, disjoint from the training stream.
inline EvalResult evaluate(const PolicyParams& params, const TrainConfig& cfg, std::uint64_t seed) {
  const auto lane = eval_prompt_lane(seed);
  const auto bounds = cfg.bounds();
  double avg = 0.0, pass = 0.0;
  for (std::size_t i = 0; i < cfg.eval_prompts; ++i) {
    const Prompt p = generate_prompt(cfg.task, lane, i, bounds);
    const auto features = p.features();
    double ok = 0.0;
    for (std::size_t j = 0; j < cfg.eval_samples; ++j) {
      const auto r = sample(params, features, cfg.max_len, cfg.eval_temperature,
                            derive_seed({seed, i, j, 0x65766c73ULL}), p.id);
      ok += verify(p, r.tokens).reward;
    }
    avg += ok / static_cast<double>(cfg.eval_samples);
    pass += ok > 0.0 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(std::max<std::size_t>(cfg.eval_prompts, 1));
  return {avg / n, pass / n};
}

// ---------------------------------------------------------------------------
// Trainer

/// Checkpoint layout (little-endian):
///   8 bytes "ASPOCKP\0", u32 version (1), u64 next step, f64 learning rate,
///   u8 learning-rate-halved flag, f64 last eval avg@k, f64 last eval pass@k,
///   parameter block (see write_params), u64 Adam t, u64 n, f64 x n first
///   moments, f64 x n second moments.
inline constexpr std::uint32_t checkpoint_format_version = 1;

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : cfg_(std::move(cfg)),
        live_((cfg_.validate(), PolicyParams::init(cfg_.policy, cfg_.seed))),
        reference_(live_),
        adam_(live_.size()),
        learning_rate_(cfg_.learning_rate) {}

  const TrainConfig& config() const { return cfg_; }
  const PolicyParams& params() const { return live_; }
  PolicyParams& mutable_params() { return live_; }
  const PolicyParams& reference() const { return reference_; }
  const AdamState& optimizer() const { return adam_; }
  double learning_rate() const { return learning_rate_; }
  std::uint64_t next_step() const { return step_; }
  bool done() const { return step_ >= cfg_.total_steps; }

  /// Collects a batch, runs its updates, and returns the step's metrics.
  MetricRecord step() {
    const std::uint64_t s = step_;
    const PolicyParams old = live_;
    const Rollouts rollouts = collect_rollouts(old, cfg_, s);
    StepOutcome outcome =
        run_step(live_, adam_, rollouts, cfg_, learning_rate_, s, cfg_.objective.kl_beta > 0.0 ? &reference_ : nullptr);
    const double lr_used = learning_rate_;
    if (outcome.aborted && !lr_halved_) {
      learning_rate_ *= 0.5;
      lr_halved_ = true;
    }
    const auto signals = policy_signals(live_, reference_, rollouts.sampled);
    MetricRecord m =
        compute_metrics(outcome.observation, rollouts.sampled, rollouts.kept.size(), rollouts.dropped, signals, s);
    m.updates = outcome.updates;
    m.aborted = outcome.aborted;
    m.learning_rate = lr_used;
    ++step_;
    if (step_ % cfg_.eval_interval == 0 || step_ == cfg_.total_steps || !has_eval_) {
      last_eval_ = evaluate(live_, cfg_, cfg_.seed);
      has_eval_ = true;
    }
    m.eval_avg_at_k = last_eval_.avg_at_k;
    m.eval_pass_at_k = last_eval_.pass_at_k;
    return m;
  }

  /// Runs to total_steps. `on_step` sees every record as it is produced.
  std::vector<MetricRecord> run(const std::function<void(const MetricRecord&, Trainer&)>& on_step = {}) {
    std::vector<MetricRecord> records;
    while (!done()) {
      records.push_back(step());
      if (on_step) on_step(records.back(), *this);
    }
    return records;
  }

  void save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
    static constexpr char magic[8] = {'A', 'S', 'P', 'O', 'C', 'K', 'P', '\0'};
    os.write(magic, 8);
    detail::write_pod(os, checkpoint_format_version);
    detail::write_pod(os, step_);
    detail::write_pod(os, learning_rate_);
    detail::write_pod(os, static_cast<std::uint8_t>(lr_halved_ ? 1 : 0));
    detail::write_pod(os, last_eval_.avg_at_k);
    detail::write_pod(os, last_eval_.pass_at_k);
    write_params(os, live_);
    detail::write_pod(os, adam_.t);
    detail::write_pod(os, static_cast<std::uint64_t>(adam_.m.size()));
    os.write(reinterpret_cast<const char*>(adam_.m.data()), static_cast<std::streamsize>(adam_.m.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(adam_.v.data()), static_cast<std::streamsize>(adam_.v.size() * sizeof(double)));
    if (!os) throw Error(ErrorCode::io_error, "failed writing " + path);
  }

  /// Restores parameters, optimizer state and step counter. The reference
  /// policy is re-derived from the seed, as at construction.
  void load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::io_error, "cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string_view(magic, 7) != "ASPOCKP") throw Error(ErrorCode::io_error, "not a checkpoint: " + path);
    const auto version = detail::read_pod<std::uint32_t>(is);
    if (version != checkpoint_format_version) throw Error(ErrorCode::io_error, "unsupported checkpoint version");
    step_ = detail::read_pod<std::uint64_t>(is);
    learning_rate_ = detail::read_pod<double>(is);
    lr_halved_ = detail::read_pod<std::uint8_t>(is) != 0;
    last_eval_.avg_at_k = detail::read_pod<double>(is);
    last_eval_.pass_at_k = detail::read_pod<double>(is);
    has_eval_ = true;
    PolicyParams p = read_params(is);
    if (!(p.shape() == cfg_.policy)) throw Error(ErrorCode::io_error, "checkpoint policy shape differs from config");
    live_ = std::move(p);
    adam_.t = detail::read_pod<std::uint64_t>(is);
    const auto n = detail::read_pod<std::uint64_t>(is);
    if (n != live_.size()) throw Error(ErrorCode::io_error, "optimizer state size mismatch");
    adam_.m.resize(n);
    adam_.v.resize(n);
    is.read(reinterpret_cast<char*>(adam_.m.data()), static_cast<std::streamsize>(n * sizeof(double)));
    is.read(reinterpret_cast<char*>(adam_.v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw Error(ErrorCode::io_error, "truncated checkpoint " + path);
  }

 private:
  TrainConfig cfg_;
  PolicyParams live_;
  PolicyParams reference_;
  AdamState adam_;
  double learning_rate_;
  bool lr_halved_ = false;
  std::uint64_t step_ = 0;
  EvalResult last_eval_;
  bool has_eval_ = false;
};

}  // namespace aspo

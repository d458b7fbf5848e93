// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "aspo/config.hpp"
#include "aspo/gradcheck.hpp"
#include "aspo/plot.hpp"
#include "aspo/run.hpp"

using namespace aspo;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Fresh empty directory under the system temp dir, removed on scope exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

TrainConfig tiny(std::size_t steps = 2) {
  TrainConfig cfg;
  cfg.total_steps = steps;
  cfg.eval_prompts = 4;
  cfg.eval_samples = 2;
  cfg.task_bounds.operand_max = 4;
  return cfg;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) ++n;
  return n;
}

std::string config_error_field(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

}  // namespace

// ---------------------------------------------------------------------------
// config

TEST(Config, DefaultsRoundTripThroughJson) {
  const TrainConfig d;
  TrainConfig c;
  c.learning_rate = 0.5;
  c.objective.variant = Variant::cispo;
  apply_json(c, to_json(d));
  EXPECT_EQ(to_json(c), to_json(d));
  EXPECT_EQ(to_json(d)["objective"]["eps_low"], 0.2);
  EXPECT_EQ(to_json(d)["objective"]["eps_high"], 0.28);
}

TEST(Config, EveryFieldHasSectionAndKey) {
  for (const auto& f : config_fields()) {
    const auto dot = f.name.find('.');
    ASSERT_NE(dot, std::string::npos) << f.name;
    EXPECT_EQ(f.name.find('.', dot + 1), std::string::npos) << f.name;
    EXPECT_EQ(find_field(f.name), &f);
  }
  EXPECT_EQ(find_field("train.nope"), nullptr);
}

TEST(Config, OverridesParseByKind) {
  TrainConfig c;
  apply_override(c, "objective.variant", "aspo");
  apply_override(c, "objective.eps_high", "0.3");
  apply_override(c, "train.group_size", "4");
  apply_override(c, "objective.negative_dual_clip", "false");
  apply_override(c, "task.kind", "parity");
  EXPECT_EQ(c.objective.variant, Variant::aspo);
  EXPECT_EQ(c.objective.eps_high, 0.3);
  EXPECT_EQ(c.group_size, 4u);
  EXPECT_FALSE(c.objective.negative_dual_clip);
  EXPECT_EQ(c.task, TaskKind::parity);
}

TEST(Config, ErrorsNameTheField) {
  TrainConfig c;
  EXPECT_EQ(config_error_field([&] { apply_override(c, "train.bogus", "1"); }), "train.bogus");
  EXPECT_EQ(config_error_field([&] { apply_override(c, "train.group_size", "4.5"); }), "train.group_size");
  EXPECT_EQ(config_error_field([&] { apply_override(c, "train.group_size", "-4"); }), "train.group_size");
  EXPECT_EQ(config_error_field([&] { apply_override(c, "objective.eps_low", "abc"); }), "objective.eps_low");
  EXPECT_EQ(config_error_field([&] { apply_override(c, "objective.variant", "ppo"); }), "objective.variant");
  EXPECT_EQ(config_error_field([&] { apply_override(c, "objective.negative_dual_clip", "maybe"); }),
            "objective.negative_dual_clip");
  EXPECT_EQ(config_error_field([&] { apply_json(c, nlohmann::json{{"objective", {{"eps", 1}}}}); }), "objective.eps");
  EXPECT_EQ(config_error_field([&] { apply_json(c, nlohmann::json{{"train", {{"seed", "one"}}}}); }), "train.seed");
  EXPECT_EQ(config_error_field([&] { apply_json(c, nlohmann::json{{"train", 3}}); }), "train");
}

TEST(Config, LoadFromFile) {
  TempDir dir("aspo_test_config");
  const auto path = (dir.path / "c.json").string();
  std::ofstream(path) << R"({"objective": {"variant": "gspo", "aggregation": "response_mean"},
                           "train": {"total_steps": 7}})";
  const auto c = load_config(path);
  EXPECT_EQ(c.objective.variant, Variant::gspo);
  EXPECT_EQ(c.objective.aggregation, Aggregation::response_mean);
  EXPECT_EQ(c.total_steps, 7u);
  EXPECT_EQ(c.group_size, TrainConfig{}.group_size);

  std::ofstream(path) << "{ not json";
  EXPECT_EQ(config_error_field([&] { load_config(path); }), "<file>");
  try {
    load_config((dir.path / "missing.json").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::io_error);
  }
}

// ---------------------------------------------------------------------------
// run directories and manifests

TEST(Run, OneStepGivesOneDataRow) {
  TempDir dir("aspo_test_run_one");
  const auto r = train_run(tiny(1), dir.path);
  EXPECT_EQ(count_lines(r.dir / "metrics.csv"), 2u);
  EXPECT_EQ(r.records.size(), 1u);
}

TEST(Run, ManifestRecordsResolvedConfig) {
  TempDir dir("aspo_test_run_manifest");
  TrainConfig cfg = tiny(1);
  apply_override(cfg, "objective.variant", "aspo");
  const auto r = train_run(cfg, dir.path, "train --objective.variant aspo");
  const auto m = nlohmann::json::parse(slurp(r.dir / "manifest.json"));
  EXPECT_EQ(m["config"]["objective"]["variant"], "aspo");
  EXPECT_EQ(m["status"], "completed");
  EXPECT_EQ(m["run_id"], r.run_id);
  EXPECT_EQ(m["code_version"], ASPO_CODE_VERSION);
  EXPECT_FALSE(m["started"].get<std::string>().empty());
  EXPECT_FALSE(m["finished"].get<std::string>().empty());
  EXPECT_EQ(m["outputs"][0], "metrics.csv");
}

TEST(Run, RunIdsAreUniqueAndRerunsIdentical) {
  TempDir dir("aspo_test_run_ids");
  const auto a = train_run(tiny(3), dir.path);
  const auto b = train_run(tiny(3), dir.path);
  EXPECT_EQ(a.run_id, "grpo-s1");
  EXPECT_EQ(b.run_id, "grpo-s1-2");
  EXPECT_EQ(slurp(a.dir / "metrics.csv"), slurp(b.dir / "metrics.csv"));
}

TEST(Run, CheckpointsLandInRunDirectory) {
  TempDir dir("aspo_test_run_ckpt");
  TrainConfig cfg = tiny(4);
  cfg.checkpoint_interval = 2;
  const auto r = train_run(cfg, dir.path);
  EXPECT_TRUE(fs::exists(r.dir / "checkpoint-2.bin"));
  EXPECT_TRUE(fs::exists(r.dir / "checkpoint-4.bin"));
  const auto m = nlohmann::json::parse(slurp(r.dir / "manifest.json"));
  EXPECT_EQ(m["outputs"].size(), 3u);
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path)) ++entries;
  EXPECT_EQ(entries, 1u);
}

TEST(Run, InvalidConfigWritesNothing) {
  TempDir dir("aspo_test_run_invalid");
  TrainConfig cfg = tiny(1);
  cfg.objective.eps_high = -1.0;
  EXPECT_THROW(train_run(cfg, dir.path), ConfigError);
  EXPECT_TRUE(fs::is_empty(dir.path));
}

TEST(Run, OutputRootFromEnvironment) {
  ::setenv(output_root_env, "/tmp/aspo-root-test", 1);
  EXPECT_EQ(output_root(), fs::path("/tmp/aspo-root-test"));
  ::unsetenv(output_root_env);
  EXPECT_EQ(output_root(), fs::path("runs"));
}

// ---------------------------------------------------------------------------
// comparison matrix

TEST(Compare, TwoVariantsFiveSeedsGiveTenRunsTwoRows) {
  TempDir dir("aspo_test_compare");
  const std::vector<Variant> variants{Variant::grpo, Variant::no_is};
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto runs = run_matrix(tiny(2), variants, seeds, dir.path, 3);
  EXPECT_EQ(runs.size(), 10u);
  for (const auto& r : runs) EXPECT_TRUE(r.result.has_value()) << r.error;
  const auto rows = summarize(runs, variants);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& row : rows) {
    EXPECT_EQ(row.runs, 5u);
    EXPECT_EQ(row.failed, 0u);
  }
  write_summary(rows, runs, dir.path / "summary.csv");
  EXPECT_EQ(count_lines(dir.path / "summary.csv"), 3u);
}

TEST(Compare, SingleRunSummaryEqualsFinalRecord) {
  TempDir dir("aspo_test_compare_single");
  const std::vector<Variant> variants{Variant::aspo};
  const std::vector<std::uint64_t> seeds{7};
  const auto runs = run_matrix(tiny(3), variants, seeds, dir.path, 1);
  const auto row = summarize(runs, variants).at(0);
  const auto& last = runs.at(0).result->records.back();
  EXPECT_EQ(row.final_entropy, last.entropy);
  EXPECT_EQ(row.final_avg_at_k, last.eval_avg_at_k);
  EXPECT_EQ(row.final_pass_at_k, last.eval_pass_at_k);
  EXPECT_EQ(row.final_hard_clip, last.hard_clip_fraction);
  EXPECT_EQ(row.final_soft_clip, last.soft_clip_fraction);
  EXPECT_EQ(row.min_final_entropy, last.entropy);
}

TEST(Compare, SummaryIsOrderInvariant) {
  std::vector<MatrixRun> runs;
  for (std::uint64_t s = 0; s < 6; ++s) {
    RunResult r;
    r.records.resize(8);
    for (auto& m : r.records) m.entropy = 0.1 * static_cast<double>((s * 7) % 6);
    r.records.back().eval_avg_at_k = 0.05 * static_cast<double>((s * 5) % 6);
    runs.push_back({Variant::grpo, s, r, {}});
  }
  const std::vector<Variant> variants{Variant::grpo};
  const auto base = summarize(runs, variants).at(0);
  std::mt19937 gen(3);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(runs.begin(), runs.end(), gen);
    const auto row = summarize(runs, variants).at(0);
    EXPECT_EQ(row.final_entropy, base.final_entropy);
    EXPECT_EQ(row.final_avg_at_k, base.final_avg_at_k);
  }
}

TEST(Compare, FailedRunsAreCountedAndListed) {
  TempDir dir("aspo_test_compare_fail");
  std::vector<MatrixRun> runs{{Variant::grpo, 1, std::nullopt, "boom"}};
  RunResult ok;
  ok.records.resize(1);
  ok.records[0].entropy = 0.5;
  runs.push_back({Variant::grpo, 2, ok, {}});
  const std::vector<Variant> variants{Variant::grpo};
  const auto rows = summarize(runs, variants);
  EXPECT_EQ(rows[0].runs, 2u);
  EXPECT_EQ(rows[0].failed, 1u);
  EXPECT_EQ(rows[0].final_entropy, 0.5);
  write_summary(rows, runs, dir.path / "summary.csv");
  EXPECT_NE(slurp(dir.path / "summary.csv").find("# failed grpo seed 1: boom"), std::string::npos);
}

TEST(Compare, ParallelAndSerialRunsMatch) {
  TempDir a("aspo_test_par_a"), b("aspo_test_par_b");
  const std::vector<Variant> variants{Variant::cispo, Variant::gspo};
  const std::vector<std::uint64_t> seeds{1, 2};
  const auto serial = run_matrix(tiny(2), variants, seeds, a.path, 1);
  const auto parallel = run_matrix(tiny(2), variants, seeds, b.path, 4);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(slurp(serial[i].result->dir / "metrics.csv"), slurp(parallel[i].result->dir / "metrics.csv"));
  }
}

TEST(Compare, Median) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_TRUE(std::isnan(median({})));
}

TEST(Compare, LateRatioGapSkipsFirstQuarterAndEmptySets) {
  std::vector<MetricRecord> r(8);
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i].pos_responses = r[i].neg_responses = 1;
    r[i].is_ratio_pos_mean = i < 2 ? 100.0 : 1.1;
    r[i].is_ratio_neg_mean = 1.0;
  }
  r[5].neg_responses = 0;
  r[5].is_ratio_pos_mean = 50.0;
  EXPECT_NEAR(late_ratio_gap(r), 0.1, 1e-12);
  EXPECT_EQ(late_ratio_gap(std::vector<MetricRecord>{}), 0.0);
}

// ---------------------------------------------------------------------------
// plots

TEST(Plot, SurfaceSvgStructure) {
  const std::size_t n = 10;
  const auto points = weight_surface(Variant::grpo, surface_grid(n), 1.0, ObjectiveConfig{});
  const auto svg = surface_svg(points, n, "grpo, A < 0");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("A &lt; 0"), std::string::npos);
  EXPECT_NE(svg.find("pi_old"), std::string::npos);
  EXPECT_NE(svg.find("pi_theta"), std::string::npos);
  std::size_t masked = 0, hatched = 0;
  for (const auto& p : points) masked += p.result.hard_masked;
  for (auto pos = svg.find("fill=\"url(#hatch)\"/>"); pos != std::string::npos;
       pos = svg.find("fill=\"url(#hatch)\"/>", pos + 1)) {
    ++hatched;
  }
  EXPECT_GT(masked, 0u);
  EXPECT_EQ(hatched, masked);
  EXPECT_EQ(svg, surface_svg(points, n, "grpo, A < 0"));
  EXPECT_THROW(surface_svg(points, n + 1, "x"), Error);
}

TEST(Plot, HighWeightCellIsTopLeftForGrpo) {
  // Largest unmasked grpo positive weight sits at small pi_old, large pi_theta:
  // its cell is drawn left of and above the smallest one.
  const std::size_t n = 20;
  const auto points = weight_surface(Variant::grpo, surface_grid(n), 1.0, ObjectiveConfig{});
  const SurfacePoint* hi = nullptr;
  const SurfacePoint* lo = nullptr;
  for (const auto& p : points) {
    if (p.result.hard_masked) continue;
    if (!hi || p.result.weight > hi->result.weight) hi = &p;
    if (!lo || p.result.weight < lo->result.weight) lo = &p;
  }
  EXPECT_GT(hi->pi_theta, lo->pi_theta);
  EXPECT_LT(hi->pi_old, lo->pi_old + 1e-12);
}

TEST(Plot, RampEndpoints) {
  const auto a = ramp(0.0), b = ramp(1.0), c = ramp(2.0);
  EXPECT_EQ(a.r, 68);
  EXPECT_EQ(b.g, 231);
  EXPECT_EQ(c.b, b.b);
}

// ---------------------------------------------------------------------------
// gradcheck helpers

TEST(GradCheck, RandomLogitBatchRatiosStayOffBoundaries) {
  ObjectiveConfig cfg;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto b = random_logit_batch(s, 24, cfg);
    ASSERT_EQ(b.logits.size(), 24 * b.vocab);
    for (std::size_t t = 0; t < b.size(); ++t) {
      const std::span<const double> z(b.logits.data() + t * b.vocab, b.vocab);
      const double r = std::exp(detail::log_softmax_at(z, b.token[t]) - b.lp_old[t]);
      EXPECT_FALSE(detail::near_clip_boundary(r, cfg, 1e-3));
    }
  }
}

TEST(GradCheck, EveryVariantPasses) {
  for (auto v : all_variants) {
    for (auto agg : {Aggregation::token_mean, Aggregation::response_mean}) {
      const auto c = check_variant(v, agg, 11, 3);
      EXPECT_LT(c.max_rel_error, 1e-6) << to_string(v) << " " << to_string(agg);
    }
  }
  EXPECT_LT(reciprocal_identity_error(5, 20), 1e-8);
  EXPECT_EQ(masked_perturbation_change(5, 5), 0.0);
}

TEST(GradCheck, BatchesMixClippedAndUnclipped) {
  const auto c = check_variant(Variant::aspo, Aggregation::token_mean, 3, 10);
  EXPECT_GT(c.hard, 0u);
  EXPECT_GT(c.soft, 0u);
  EXPECT_LE(c.tokens, 32u);
}

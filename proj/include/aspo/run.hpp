// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run directories, manifests, and the variant x seed comparison matrix.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "aspo/config.hpp"
#include "aspo/telemetry.hpp"
#include "aspo/trainer.hpp"

#ifndef ASPO_CODE_VERSION
#define ASPO_CODE_VERSION "0.1.0"
#endif

namespace aspo {

namespace fs = std::filesystem;

inline constexpr const char* output_root_env = "ASPO_OUTPUT_ROOT";

/// $ASPO_OUTPUT_ROOT, else ./runs.
inline fs::path output_root() {
  const char* env = std::getenv(output_root_env);
  return env && *env ? fs::path(env) : fs::path("runs");
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Creates root/<stem>, or root/<stem>-2, -3, ... if taken.
inline std::pair<std::string, fs::path> create_run_dir(const fs::path& root, const std::string& stem) {
  fs::create_directories(root);
  for (int n = 1;; ++n) {
    const std::string id = n == 1 ? stem : stem + "-" + std::to_string(n);
    const fs::path dir = root / id;
    if (fs::create_directory(dir)) return {id, dir};
  }
}

struct RunManifest {
  std::string run_id;
  std::string command;
  nlohmann::json config;
  std::string code_version = ASPO_CODE_VERSION;
  std::string started;
  std::string finished;  // empty while running
  std::string status = "running";
  std::vector<std::string> outputs;  // relative to the run directory

  nlohmann::json to_json() const {
    return {{"run_id", run_id},   {"command", command},   {"config", config},   {"code_version", code_version},
            {"started", started}, {"finished", finished}, {"status", status}, {"outputs", outputs}};
  }

  void write(const fs::path& dir) const {
    std::ofstream os(dir / "manifest.json");
    if (!os) throw Error(ErrorCode::io_error, "cannot write manifest in " + dir.string());
    os << to_json().dump(2) << '\n';
  }
};

inline std::string run_stem(const TrainConfig& cfg) {
  return std::string(to_string(cfg.objective.variant)) + "-s" + std::to_string(cfg.seed);
}

struct RunResult {
  std::string run_id;
  fs::path dir;
  std::vector<MetricRecord> records;
};

/// One training run in its own directory under `root`: manifest first,
/// then metrics.csv and any checkpoints.
inline RunResult train_run(const TrainConfig& cfg, const fs::path& root, const std::string& command = "train",
                           const std::function<void(const MetricRecord&)>& progress = {}) {
  cfg.validate();
  auto [id, dir] = create_run_dir(root, run_stem(cfg));
  RunManifest manifest;
  manifest.run_id = id;
  manifest.command = command;
  manifest.config = to_json(cfg);
  manifest.started = utc_timestamp();
  manifest.write(dir);

  RunResult result{id, dir, {}};
  try {
    Trainer trainer(cfg);
    result.records = trainer.run([&](const MetricRecord& m, Trainer& t) {
      if (cfg.checkpoint_interval > 0 && t.next_step() % cfg.checkpoint_interval == 0) {
        const std::string name = "checkpoint-" + std::to_string(t.next_step()) + ".bin";
        t.save_checkpoint((dir / name).string());
        manifest.outputs.push_back(name);
      }
      if (progress) progress(m);
    });
    write_records(result.records, (dir / "metrics.csv").string());
    manifest.outputs.insert(manifest.outputs.begin(), "metrics.csv");
    manifest.status = "completed";
  } catch (...) {
    manifest.status = "failed";
    manifest.finished = utc_timestamp();
    manifest.write(dir);
    throw;
  }
  manifest.finished = utc_timestamp();
  manifest.write(dir);
  return result;
}

// ---------------------------------------------------------------------------
// Comparison matrix

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Mean over steps in the last three quarters of the run of
/// (positive-set mean IS ratio - negative-set mean IS ratio), counting only
/// steps where both sets are non-empty. Zero if there are none.
inline double late_ratio_gap(std::span<const MetricRecord> records) {
  const std::size_t from = records.size() / 4;
  double sum = 0.0, n = 0.0;
  for (std::size_t i = from; i < records.size(); ++i) {
    const auto& m = records[i];
    if (m.pos_responses == 0 || m.neg_responses == 0) continue;
    sum += m.is_ratio_pos_mean - m.is_ratio_neg_mean;
    n += 1.0;
  }
  return n > 0 ? sum / n : 0.0;
}

struct MatrixRun {
  Variant variant;
  std::uint64_t seed;
  std::optional<RunResult> result;
  std::string error;
};

struct SummaryRow {
  Variant variant;
  std::size_t runs = 0;
  std::size_t failed = 0;
  double final_entropy = 0.0;
  double final_avg_at_k = 0.0;
  double final_pass_at_k = 0.0;
  double final_hard_clip = 0.0;
  double final_soft_clip = 0.0;
  double ratio_gap = 0.0;
  double min_final_entropy = 0.0;
};

/// Runs every (variant, seed) pair with up to `workers` threads. Each run is
/// fully determined by its config, so scheduling never changes outputs.
inline std::vector<MatrixRun> run_matrix(const TrainConfig& base, std::span<const Variant> variants,
                                         std::span<const std::uint64_t> seeds, const fs::path& root, std::size_t workers,
                                         const std::function<void(const MatrixRun&)>& on_done = {}) {
  std::vector<MatrixRun> runs;
  for (auto v : variants) {
    for (auto s : seeds) runs.push_back({v, s, std::nullopt, {}});
  }
  std::atomic<std::size_t> next{0};
  std::mutex report;
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      auto& r = runs[i];
      TrainConfig cfg = base;
      cfg.objective.variant = r.variant;
      cfg.seed = r.seed;
      try {
        r.result = train_run(cfg, root, "compare");
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      if (on_done) {
        std::lock_guard lock(report);
        on_done(r);
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(runs.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return runs;
}

inline std::vector<SummaryRow> summarize(std::span<const MatrixRun> runs, std::span<const Variant> variants) {
  std::vector<SummaryRow> rows;
  for (auto v : variants) {
    SummaryRow row{v};
    std::vector<double> h, avg, pass, hard, soft, gap;
    for (const auto& r : runs) {
      if (r.variant != v) continue;
      ++row.runs;
      if (!r.result || r.result->records.empty()) {
        ++row.failed;
        continue;
      }
      const auto& last = r.result->records.back();
      h.push_back(last.entropy);
      avg.push_back(last.eval_avg_at_k);
      pass.push_back(last.eval_pass_at_k);
      hard.push_back(last.hard_clip_fraction);
      soft.push_back(last.soft_clip_fraction);
      gap.push_back(late_ratio_gap(r.result->records));
    }
    row.final_entropy = median(h);
    row.final_avg_at_k = median(avg);
    row.final_pass_at_k = median(pass);
    row.final_hard_clip = median(hard);
    row.final_soft_clip = median(soft);
    row.ratio_gap = median(gap);
    row.min_final_entropy = h.empty() ? std::nan("") : *std::min_element(h.begin(), h.end());
    rows.push_back(row);
  }
  return rows;
}

inline constexpr const char* summary_columns =
    "variant,runs,failed,median_final_entropy,median_final_avg_at_k,median_final_pass_at_k,"
    "median_final_hard_clip_fraction,median_final_soft_clip_fraction,median_late_ratio_gap,min_final_entropy";

inline void write_summary(std::span<const SummaryRow> rows, std::span<const MatrixRun> runs, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  os << summary_columns << '\n';
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f,%.8f\n",
                  std::string(to_string(r.variant)).c_str(), r.runs, r.failed, r.final_entropy, r.final_avg_at_k,
                  r.final_pass_at_k, r.final_hard_clip, r.final_soft_clip, r.ratio_gap, r.min_final_entropy);
    os << buf;
  }
  for (const auto& r : runs) {
    if (!r.error.empty()) os << "# failed " << to_string(r.variant) << " seed " << r.seed << ": " << r.error << '\n';
  }
  if (!os) throw Error(ErrorCode::io_error, "failed writing " + path.string());
}

}  // namespace aspo

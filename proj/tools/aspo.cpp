// SPDX-License-Identifier: Apache-2.0
// aspo: train, compare, gradcheck and surface subcommands.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "aspo/config.hpp"
#include "aspo/gradcheck.hpp"
#include "aspo/plot.hpp"
#include "aspo/run.hpp"

using namespace aspo;

namespace {

enum Exit : int { ok = 0, config_error = 2, gradcheck_failure = 3, runtime_failure = 4 };

constexpr double gradcheck_tolerance = 1e-6;

/// --config plus one --<dotted.name> flag per config field.
struct ConfigOptions {
  std::string path;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App& app) {
    app.add_option("--config", path, "JSON configuration file")->check(CLI::ExistingFile);
    for (const auto& f : config_fields()) {
      app.add_option_function<std::string>(
          "--" + f.name, [this, name = f.name](const std::string& v) { overrides[name] = v; }, f.help);
    }
  }

  TrainConfig resolve() const {
    TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
    for (const auto& [name, text] : overrides) apply_override(cfg, name, text);
    cfg.validate();
    return cfg;
  }
};

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

fs::path resolve_root(const std::string& flag) { return flag.empty() ? output_root() : fs::path(flag); }

template <typename T>
std::vector<T> split_list(const std::string& text, T (*parse)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse(item));
  }
  return out;
}

std::uint64_t parse_seed(const std::string& s) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || s[0] == '-') throw ConfigError("--seeds", "bad seed '" + s + "'");
  return v;
}

/// Accepts "1,2,3" or an inclusive range "1-5".
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  const auto dash = text.find('-');
  if (dash != std::string::npos && text.find(',') == std::string::npos && dash > 0) {
    const auto lo = parse_seed(text.substr(0, dash)), hi = parse_seed(text.substr(dash + 1));
    if (hi < lo) throw ConfigError("--seeds", "empty range " + text);
    std::vector<std::uint64_t> out;
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
    return out;
  }
  return split_list<std::uint64_t>(text, parse_seed);
}

Variant parse_variant_flag(const std::string& s) {
  try {
    return parse_variant(s);
  } catch (const Error& e) {
    throw ConfigError("--variants", e.what());
  }
}

void print_record(const MetricRecord& m) {
  std::fprintf(stderr, "step %4llu  reward %.3f  entropy %.4f  hard %.4f  soft %.4f  avg@k %.3f  pass@k %.3f%s\n",
               static_cast<unsigned long long>(m.step), m.reward_mean, m.entropy, m.hard_clip_fraction,
               m.soft_clip_fraction, m.eval_avg_at_k, m.eval_pass_at_k, m.aborted ? "  (aborted)" : "");
}

// ---------------------------------------------------------------------------

int cmd_train(const ConfigOptions& opts, const std::string& root_flag, bool quiet, const std::string& command) {
  const TrainConfig cfg = opts.resolve();
  const auto result = train_run(cfg, resolve_root(root_flag), command, [&](const MetricRecord& m) {
    if (!quiet) print_record(m);
  });
  std::cout << result.dir.string() << '\n';
  return ok;
}

int cmd_compare(const ConfigOptions& opts, const std::string& root_flag, const std::string& variants_text,
                const std::string& seeds_text, std::size_t workers, const std::string& command) {
  const TrainConfig base = opts.resolve();
  const auto variants = split_list<Variant>(variants_text, parse_variant_flag);
  const auto seeds = parse_seeds(seeds_text);
  if (variants.empty()) throw ConfigError("--variants", "at least one variant is required");
  if (seeds.empty()) throw ConfigError("--seeds", "at least one seed is required");

  auto [id, dir] = create_run_dir(resolve_root(root_flag), "compare");
  RunManifest manifest;
  manifest.run_id = id;
  manifest.command = command;
  manifest.config = to_json(base);
  manifest.config["compare"] = {{"seeds", seeds}, {"workers", workers}};
  for (auto v : variants) manifest.config["compare"]["variants"].push_back(std::string(to_string(v)));
  manifest.started = utc_timestamp();
  manifest.write(dir);

  const auto runs = run_matrix(base, variants, seeds, dir / "runs", workers, [](const MatrixRun& r) {
    if (r.result) {
      const auto& last = r.result->records.back();
      std::fprintf(stderr, "done %s seed %llu: entropy %.4f avg@k %.3f\n", std::string(to_string(r.variant)).c_str(),
                   static_cast<unsigned long long>(r.seed), last.entropy, last.eval_avg_at_k);
    } else {
      std::fprintf(stderr, "FAILED %s seed %llu: %s\n", std::string(to_string(r.variant)).c_str(),
                   static_cast<unsigned long long>(r.seed), r.error.c_str());
    }
  });
  const auto rows = summarize(runs, variants);
  write_summary(rows, runs, dir / "summary.csv");
  manifest.outputs.push_back("summary.csv");
  for (const auto& r : runs) {
    if (r.result) manifest.outputs.push_back("runs/" + r.result->run_id);
  }
  manifest.status = "completed";
  manifest.finished = utc_timestamp();
  manifest.write(dir);

  std::ifstream summary(dir / "summary.csv");
  std::cout << summary.rdbuf();
  std::cout << dir.string() << '\n';
  return ok;
}

int cmd_gradcheck(const std::string& root_flag, std::uint64_t seed, std::size_t trials, const std::string& command) {
  const auto start = std::chrono::steady_clock::now();
  std::ostringstream report;
  bool failed = false;
  char buf[256];
  for (auto v : all_variants) {
    for (auto agg : {Aggregation::token_mean, Aggregation::response_mean}) {
      const auto c = check_variant(v, agg, seed, trials);
      const bool bad = !(c.max_rel_error < gradcheck_tolerance);
      failed = failed || bad;
      std::snprintf(buf, sizeof(buf), "%-14s %-14s max_rel_error %.3e  tokens<=%zu hard %zu soft %zu%s\n",
                    std::string(to_string(v)).c_str(), std::string(to_string(agg)).c_str(), c.max_rel_error, c.tokens,
                    c.hard, c.soft, bad ? "  FAIL" : "");
      report << buf;
      if (bad) {
        std::snprintf(buf, sizeof(buf), "  offending batch: variant %s, batch seed %llu\n",
                      std::string(to_string(v)).c_str(), static_cast<unsigned long long>(c.worst_seed));
        report << buf;
      }
    }
  }
  const double identity = reciprocal_identity_error(seed);
  const bool identity_bad = !(identity < 1e-8);
  std::snprintf(buf, sizeof(buf), "aspo/grpo gradient ratio vs (pi_old/pi_theta)^2: max error %.3e%s\n", identity,
                identity_bad ? "  FAIL" : "");
  report << buf;
  const double masked = masked_perturbation_change(seed);
  const bool masked_bad = !(masked <= 1e-15);
  std::snprintf(buf, sizeof(buf), "hard-masked token perturbation: max objective change %.3e%s\n", masked,
                masked_bad ? "  FAIL" : "");
  report << buf;
  failed = failed || identity_bad || masked_bad;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::snprintf(buf, sizeof(buf), "%s in %.2f s\n", failed ? "FAILED" : "passed", secs);
  report << buf;

  auto [id, dir] = create_run_dir(resolve_root(root_flag), "gradcheck-s" + std::to_string(seed));
  RunManifest manifest;
  manifest.run_id = id;
  manifest.command = command;
  manifest.config = {{"gradcheck", {{"seed", seed}, {"trials", trials}, {"tolerance", gradcheck_tolerance}}}};
  manifest.started = utc_timestamp();
  write_text((dir / "gradcheck.txt").string(), report.str());
  manifest.outputs.push_back("gradcheck.txt");
  manifest.status = failed ? "failed" : "completed";
  manifest.finished = utc_timestamp();
  manifest.write(dir);

  std::cout << report.str();
  return failed ? gradcheck_failure : ok;
}

int cmd_surface(const ConfigOptions& opts, const std::string& root_flag, const std::string& variant_text,
                std::size_t resolution, const std::string& command) {
  const TrainConfig cfg = opts.resolve();
  const Variant v = variant_text.empty() ? cfg.objective.variant : parse_variant_flag(variant_text);
  if (resolution < 2) throw ConfigError("--resolution", "must be >= 2");
  const auto grid = surface_grid(resolution);

  const std::string name(to_string(v));
  auto [id, dir] = create_run_dir(resolve_root(root_flag), "surface-" + name);
  RunManifest manifest;
  manifest.run_id = id;
  manifest.command = command;
  manifest.config = to_json(cfg);
  manifest.config["surface"] = {{"variant", name}, {"resolution", resolution}};
  manifest.started = utc_timestamp();
  manifest.write(dir);

  for (const auto& [sign, tag] : {std::pair{1.0, "pos"}, std::pair{-1.0, "neg"}}) {
    const auto points = weight_surface(v, grid, sign, cfg.objective);
    const std::string stem = name + "-" + tag;
    write_surface_csv((dir / (stem + ".csv")).string(), points);
    write_text((dir / (stem + ".svg")).string(),
               surface_svg(points, resolution, name + (sign > 0 ? ", A > 0" : ", A < 0")));
    manifest.outputs.push_back(stem + ".csv");
    manifest.outputs.push_back(stem + ".svg");
  }
  manifest.status = "completed";
  manifest.finished = utc_timestamp();
  manifest.write(dir);
  std::cout << dir.string() << '\n';
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surrogate-objective lab: GRPO, no_is, pos_resp_mean, CISPO, GSPO and ASPO on synthetic tasks"};
  app.require_subcommand(1);
  std::string root_flag;
  app.add_option("--output-root", root_flag, std::string("output directory (default $") + output_root_env + " or ./runs)");

  ConfigOptions train_opts, compare_opts, surface_opts;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "one training run");
  train_opts.attach(*train);
  train->add_flag("-q,--quiet", quiet, "no per-step progress");

  std::string variants_text = "grpo,aspo", seeds_text = "1-5";
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  auto* compare = app.add_subcommand("compare", "variant x seed matrix with a median summary");
  compare_opts.attach(*compare);
  compare->add_option("--variants", variants_text, "comma-separated variants")->capture_default_str();
  compare->add_option("--seeds", seeds_text, "comma-separated seeds or a range a-b")->capture_default_str();
  compare->add_option("--workers", workers, "parallel runs")->capture_default_str()->check(CLI::PositiveNumber);

  std::uint64_t gc_seed = 1;
  std::size_t gc_trials = 10;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of every objective");
  gradcheck->add_option("--seed", gc_seed, "batch seed")->capture_default_str();
  gradcheck->add_option("--trials", gc_trials, "random batches per variant and aggregation")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  std::string surface_variant;
  std::size_t resolution = 100;
  auto* surface = app.add_subcommand("surface", "token-weight surface grids and SVG heatmaps");
  surface_opts.attach(*surface);
  surface->add_option("--variant", surface_variant, "variant (default objective.variant)");
  surface->add_option("--resolution", resolution, "grid points per axis")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  const std::string command = command_line(argc, argv);
  try {
    if (*train) return cmd_train(train_opts, root_flag, quiet, command);
    if (*compare) return cmd_compare(compare_opts, root_flag, variants_text, seeds_text, workers, command);
    if (*gradcheck) return cmd_gradcheck(root_flag, gc_seed, gc_trials, command);
    if (*surface) return cmd_surface(surface_opts, root_flag, surface_variant, resolution, command);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return config_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return runtime_failure;
  }
  return ok;
}

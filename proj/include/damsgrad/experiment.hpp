#pragma once

// Experiment orchestration behind the command-line tool: configuration
// documents, per-seed runs, checkpoints, and the files written to disk.
//
// Output files (all written to a temporary name and renamed into place):
//
//   <benchmark>-<optimizer>-seed<S>.csv   step,loss[,x1,x2][,v_max_probe]
//   summary.json                          config, per-seed metrics, median/IQR
//   checkpoint-seed<S>.json               resumable state (run --stop-after)
//   tune-trials.csv, tune-best.json       random-search log and winner
//   compare.csv, compare.json             paired per-seed comparison
//   replacement.csv                       beta2,beta3,v_max_T,v_bar,t_star_pred,t_star_emp
//
// x1,x2 appear for rastrigin only; v_max_probe is omitted for SGD.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "damsgrad/benchmarks.hpp"

namespace damsgrad {

enum class BenchmarkId { Rastrigin, DriftRegression };

std::optional<BenchmarkId> parse_benchmark_id(std::string_view name);
std::string_view to_string(BenchmarkId id);

/// One master seed expanded into `count` run seeds via derive_seed(master, {i}).
struct MasterSeed {
  std::uint64_t master = 0;
  std::int64_t count = 1;
  bool operator==(const MasterSeed &) const = default;
};

using SeedSpec = std::variant<std::vector<std::uint64_t>, MasterSeed>;

std::vector<std::uint64_t> expand_seeds(const SeedSpec &spec);

/// Grid evaluated by analyze-replacement.
struct AnalysisGrid {
  std::vector<double> beta2{0.99, 0.999};
  std::vector<double> beta3{0.9995, 0.99999};
  std::vector<double> v_max_T{1.0};
  std::vector<double> v_bar{0.01, 0.1, 0.5};
  /// Simulation cap per cell.
  std::int64_t max_steps = 10'000'000;
  bool operator==(const AnalysisGrid &) const = default;
};

struct ExperimentConfig {
  BenchmarkId benchmark = BenchmarkId::Rastrigin;
  OptimizerKind optimizer = OptimizerKind::DAmsGrad;
  HyperParams hp;
  std::int64_t steps = 10000;
  SeedSpec seeds = std::vector<std::uint64_t>{0};
  std::string output_dir;
  std::optional<TuneSpec> tuner;
  /// rastrigin only
  Eigen::Vector2d start{-3.0, 5.0};
  /// drift-regression only; phases must cover exactly `steps`
  DriftRegressionTask task;
  AnalysisGrid analysis;

  bool operator==(const ExperimentConfig &) const = default;
};

/// Parses a JSON config document. Unknown keys, missing required keys,
/// out-of-range hyperparameters and unknown ids raise ConfigError; syntax
/// errors carry the line and column.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path &path);

/// Complete document with every default filled in; parse_config inverts it.
nlohmann::json config_to_json(const ExperimentConfig &cfg);
std::string serialize_config(const ExperimentConfig &cfg);

/// FNV-1a over the serialized config without its output directory, as hex.
std::string config_hash(const ExperimentConfig &cfg);

/// Resolves the output directory: explicit override, then the config, then
/// $DAMSGRAD_OUTPUT_ROOT/<benchmark>-<optimizer>, then ./damsgrad-out.
std::filesystem::path resolve_output_dir(const ExperimentConfig &cfg,
                                         const std::optional<std::filesystem::path> &override_dir);

/// Writes through a temporary file in the same directory and renames it.
void write_file_atomic(const std::filesystem::path &path, std::string_view content);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double x);

std::string run_record_csv(const RunRecord &record, BenchmarkId benchmark);

// ---------------------------------------------------------------------------
// Per-seed runs and checkpoints

inline constexpr int kCheckpointVersion = 1;

/// In-flight run of one seed of a configuration.
class SeedRun {
public:
  SeedRun(const ExperimentConfig &cfg, std::uint64_t seed);

  /// Advances to `until` (capped at the configured step count).
  void advance(std::int64_t until);
  void finish() { advance(total_steps_); }

  std::int64_t step() const;
  bool done() const;
  const RunRecord &record() const;
  const OptimizerState<double> &optimizer_state() const;
  std::uint64_t seed() const { return seed_; }

  nlohmann::json checkpoint() const;
  /// Rejects a checkpoint whose version, config hash, benchmark or seed differ.
  static SeedRun resume(const ExperimentConfig &cfg, const nlohmann::json &checkpoint);

private:
  std::string hash_;
  BenchmarkId benchmark_;
  std::uint64_t seed_;
  std::int64_t total_steps_;
  DriftRegressionTask task_;
  std::optional<RastriginSession> rastrigin_;
  std::optional<DriftSession> drift_;
};

/// Runs one seed to completion.
RunRecord run_seed(const ExperimentConfig &cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Subcommands

struct RunOptions {
  std::optional<std::filesystem::path> output_dir;
  int jobs = 1;
  /// Stop every seed after this many steps and write checkpoints instead of results.
  std::optional<std::int64_t> stop_after;
  /// Directory holding checkpoint-seed<S>.json files to continue from.
  std::optional<std::filesystem::path> resume_from;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::optional<RunRecord> record;
  std::filesystem::path file;
};

struct ExperimentResult {
  /// 0 unless every seed failed.
  int exit_status = 0;
  std::filesystem::path output_dir;
  std::vector<SeedOutcome> seeds;
  nlohmann::json summary;
};

ExperimentResult run_experiment(const ExperimentConfig &cfg, const RunOptions &options = {});

struct TuneOutcome {
  int exit_status = 0;
  TuneResult result;
  std::filesystem::path output_dir;
};

/// Random search on the config's benchmark and optimizer; drift-regression
/// trials train on the first configured seed.
TuneOutcome tune_experiment(const ExperimentConfig &cfg, const RunOptions &options = {});

/// A compare column: "adam" (beta3 = beta2), "amsgrad" (beta3 = 1),
/// "d-amsgrad" (beta3 from the config) or a literal beta3 value. Every
/// column runs the d-AmsGrad rule.
ExperimentConfig config_for_mode(const ExperimentConfig &base, std::string_view mode);

struct ComparisonReport {
  std::vector<std::string> labels;
  std::vector<std::uint64_t> seeds;
  /// runs[column][seed index]
  std::vector<std::vector<RunRecord>> runs;
  /// For drift tasks with more than one phase: recovery steps in the last
  /// phase against the lowest floor of that seed across columns.
  std::vector<std::vector<std::optional<std::int64_t>>> recovery;
  /// wins[i][j]: seeds where column i recovered strictly sooner than column j
  /// (pairwise floors).
  std::vector<std::vector<std::int64_t>> wins;
  nlohmann::json summary;
};

/// Paired runs of several configurations. All must share one seed list and
/// benchmark; otherwise ConfigError.
ComparisonReport compare_runs(const std::vector<std::pair<std::string, ExperimentConfig>> &columns,
                              int jobs = 1);

ComparisonReport compare_modes(const ExperimentConfig &base, const std::vector<std::string> &modes,
                               int jobs = 1);

/// compare_modes plus compare.csv / compare.json in the output directory.
ComparisonReport compare_experiment(const ExperimentConfig &base, const std::vector<std::string> &modes,
                                    const RunOptions &options = {});

struct ReplacementRow {
  double beta2, beta3, v_max_T, v_bar;
  std::optional<std::int64_t> t_star_pred;
  std::optional<std::int64_t> t_star_emp;
};

std::vector<ReplacementRow> analyze_replacement(const AnalysisGrid &grid, const HyperParams &base);
std::string replacement_csv(const std::vector<ReplacementRow> &rows);

/// analyze_replacement plus replacement.csv in the output directory.
std::vector<ReplacementRow> analyze_experiment(const ExperimentConfig &cfg, const RunOptions &options = {});

} // namespace damsgrad

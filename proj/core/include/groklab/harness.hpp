#pragma once

// Sweep orchestration: TOML configs, one directory per run keyed by a hash of
// its full configuration, resumable grid execution and report emission.
//
// Sweep directory layout:
//   sweep.json        resolved config and the run ids it covers
//   manifest.jsonl    append-only status events
//   runs/<id>/        config.json, metrics.csv, summary.json, checkpoint/
//   aggregate.csv     per-cell means and 95% intervals
//   failures.json     runs that diverged or raised

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "groklab/dynamics.hpp"
#include "groklab/model.hpp"
#include "groklab/tasks.hpp"
#include "groklab/trainer.hpp"

namespace groklab::harness {

struct TaskSpec {
  tasks::TaskKind kind = tasks::TaskKind::mod_add;
  std::uint32_t modulus = 113;
  /// Training-set sizes. For multitask this is the '+' count; for
  /// random_memo the number of random-label pairs.
  std::vector<std::size_t> d_train = {3000};
  /// Random-label '-' examples added by multitask.
  std::size_t n_memo = 3000;
  /// random_memo only: share labels between (a, b) and (b, a).
  bool commutative = false;
};

struct ModelGrid {
  std::vector<std::size_t> d_h = {64};
  std::vector<std::size_t> n_layers = {1};
  std::size_t n_heads = 4;
  std::size_t d_mlp = 0;
  bool partitioned_ffn = false;
  double init_scale = 1.0;
};

struct SweepConfig {
  std::string name = "sweep";
  TaskSpec task;
  ModelGrid model;
  trainer::TrainConfig train;
  dynamics::Thresholds thresholds;
  std::vector<std::uint64_t> seeds = {0};
  std::size_t jobs = 1;
  /// Where run directories live, relative to the sweep directory unless
  /// absolute. Sweeps pointing at the same place share finished runs.
  std::filesystem::path runs_dir = "runs";

  /// Throws ConfigError for empty grids, duplicate seeds or bad values.
  void validate() const;
};

/// Parses TOML text. `origin` names the source in error messages.
SweepConfig parse_sweep_config(std::string_view toml, const std::string& origin = "<config>");
/// Throws InputError naming the path when it cannot be read.
SweepConfig load_sweep_config(const std::filesystem::path& path);
nlohmann::json to_json(const SweepConfig& cfg);

/// One fully resolved (grid point, seed) pair. The seed drives the data
/// split, label draws and initialization.
struct RunSpec {
  model::ModelConfig model;
  tasks::TaskKind kind = tasks::TaskKind::mod_add;
  std::size_t d_train = 0;
  std::size_t n_memo = 0;
  bool commutative = false;
  trainer::TrainConfig train;
  std::uint64_t seed = 0;

  /// Canonical JSON (sorted keys); the run id is derived from its text.
  nlohmann::json to_json() const;
  static RunSpec from_json(const nlohmann::json& j);
  /// 16 hex digits of FNV-1a 64 over to_json().dump().
  std::string id() const;
};

/// Grid order: n_layers, d_h, d_train, seed (last varies fastest).
std::vector<RunSpec> expand(const SweepConfig& cfg);
tasks::Dataset make_dataset(const RunSpec& spec);

enum class RunStatus { pending, running, done, diverged, failed };
std::string_view to_string(RunStatus s);

struct RunManifest {
  std::string id;
  RunStatus status = RunStatus::pending;
  std::filesystem::path dir;
  std::optional<std::string> error;
};

/// Trains one run and writes config.json, metrics.csv, summary.json and the
/// checkpoint into `dir`. Files are staged in a sibling directory and moved
/// into place when complete. Returns nullopt when `cancel` interrupted it.
std::optional<RunManifest> execute_run(const RunSpec& spec, const std::filesystem::path& dir,
                                       const dynamics::Thresholds& th = {},
                                       const std::atomic<bool>* cancel = nullptr);

/// True when `dir` holds a finished run (summary.json plus a parsable
/// metrics.csv).
bool run_complete(const std::filesystem::path& dir);

struct SweepOptions {
  /// 0 keeps the config's job count.
  std::size_t jobs = 0;
  /// Stop scheduling after this many newly trained runs (for staged work).
  std::optional<std::size_t> max_new_runs;
  const std::atomic<bool>* cancel = nullptr;
  std::function<void(const std::string&)> log;
};

struct SweepResult {
  std::filesystem::path dir;
  std::size_t total = 0;
  std::size_t trained = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
  std::size_t diverged = 0;
  /// Runs neither finished nor failed (cancelled or beyond max_new_runs).
  std::size_t remaining = 0;
};

SweepResult run_sweep(const SweepConfig& cfg, const std::filesystem::path& out_dir,
                      const SweepOptions& options = {});

/// Final state of every finished run listed in the sweep.
struct LoadedRun {
  RunSpec spec;
  std::string id;
  std::filesystem::path dir;
  nlohmann::json summary;
  dynamics::RunOutcome outcome;
};

struct LoadedSweep {
  nlohmann::json config;
  std::vector<LoadedRun> runs;
  /// Listed run ids without a finished directory.
  std::vector<std::string> missing;
  dynamics::Thresholds thresholds;
};

/// Throws InputError when `dir` is neither a sweep nor a single run.
LoadedSweep load_sweep(const std::filesystem::path& dir);

/// Writes aggregate.csv for the finished runs of a sweep.
void write_aggregate(const LoadedSweep& sweep, const std::filesystem::path& path);

enum class ReportKind { phase_diagram, double_descent, capacity, emergence, trace };
std::string_view to_string(ReportKind k);
ReportKind parse_report_kind(std::string_view s);

struct ReportOptions {
  /// Minimum dip for double descent.
  double dip_delta = 0.10;
  /// Accuracy that counts as emerged.
  double emergence_threshold = 0.95;
  /// Reference parameter count for the emergence ratio; 0 selects the
  /// 1-layer d_h = 64 model at the sweep's modulus.
  double emergence_baseline = 0.0;
  /// Trace report on a multi-run sweep needs a run id.
  std::optional<std::string> run_id;
  /// Capacity sweep whose curve is intersected with D_crit.
  std::optional<std::filesystem::path> capacity_sweep;
};

/// Writes CSV, SVG and verdict.json for the report into `out_dir` and
/// returns the verdict. Throws InputError, without writing anything, when
/// the sweep has no finished runs.
nlohmann::json emit_report(const std::filesystem::path& sweep_dir, ReportKind kind,
                           const std::filesystem::path& out_dir, const ReportOptions& options = {});

/// Writes `contents` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace groklab::harness

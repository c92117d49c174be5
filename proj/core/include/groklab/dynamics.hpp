#pragma once

// Analysis of finished runs: regime classification of single traces and the
// curve estimators built on top of sweeps (critical dataset size,
// memorization capacity, double descent, emergence).

#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "groklab/trainer.hpp"

namespace groklab::dynamics {

struct Thresholds {
  /// Training accuracy treated as "memorized everything".
  double train_perfect = 0.995;
  /// Validation accuracy treated as "generalized".
  double generalized = 0.95;
  /// Validation accuracy treated as negligible (chance is 1/P).
  double negligible = 0.05;
  /// Minimum epochs between memorization and generalization for grokking.
  std::size_t grok_delay = 1000;
  /// Minimum depth of a double-descent dip.
  double dip_depth = 0.10;
  /// Evaluations a validation level must hold to count as a plateau.
  std::size_t plateau_window = 50;
  double plateau_tolerance = 0.02;

  void validate() const;
};

nlohmann::json to_json(const Thresholds& th);
Thresholds thresholds_from_json(const nlohmann::json& j);

enum class Dynamics { progression, ungrokking, grokking, semi_grokking, unclassified };
enum class NormTrend { increasing, decreasing, flat };

std::string_view to_string(Dynamics d);
Dynamics parse_dynamics(std::string_view s);
std::string_view to_string(NormTrend t);

struct DynamicsLabel {
  Dynamics label = Dynamics::unclassified;
  /// First epoch with train_acc >= train_perfect.
  std::optional<std::size_t> epoch_train_perfect;
  /// First epoch with val_acc >= generalized.
  std::optional<std::size_t> epoch_val_generalized;
  /// First epoch with val_acc >= 2·negligible.
  std::optional<std::size_t> epoch_onset;
  std::optional<double> val_at_train_perfect;
  std::optional<double> train_at_onset;
  double final_train_acc = 0.0;
  std::optional<double> final_val_acc;
  /// Parameter-norm slope over the generalization window, when one exists.
  std::optional<NormTrend> norm_trend;
  std::size_t plateaus = 0;
};

nlohmann::json to_json(const DynamicsLabel& label);

/// Rules, first match wins:
///   progression    generalization starts (val >= 2·negligible) while
///                  train < train_perfect, or train never saturates but
///                  final val > negligible;
///   grokking       val <= negligible when train saturates, and val reaches
///                  `generalized` at least grok_delay epochs later;
///   ungrokking     train saturates and final val <= negligible;
///   semi_grokking  train saturates and final val in (negligible, generalized);
///   unclassified   anything else.
/// Throws InputError for traces with fewer than two records.
DynamicsLabel classify(const trainer::RunTrace& trace, const Thresholds& th = {});

struct EpochWindow {
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// From the generalization onset to the first generalized epoch (or the end
/// of the trace); nullopt when validation never leaves the negligible zone.
std::optional<EpochWindow> transition_window(const trainer::RunTrace& trace,
                                             const Thresholds& th = {});

/// Sign of the least-squares slope of param_norm against epoch inside
/// `window`. Slopes below 1e-6·mean(norm) per epoch count as flat.
NormTrend norm_trend(const trainer::RunTrace& trace, EpochWindow window);

// ---- sweep-level estimators -------------------------------------------------

/// Mean and two-sided 95% Student-t interval. A single value has a
/// zero-width interval.
struct MeanCI {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
  std::size_t n = 0;

  double half_width() const { return (high - low) / 2.0; }
};
MeanCI mean_ci95(std::span<const double> values);

/// Final state of one run, as read back from a sweep.
struct RunOutcome {
  std::size_t d_h = 0;
  std::size_t n_layers = 1;
  std::size_t d_train = 0;
  std::uint64_t seed = 0;
  double final_train_acc = 0.0;
  std::optional<double> final_val_acc;
  Dynamics label = Dynamics::unclassified;
  std::size_t param_count = 0;
};

struct PhaseCell {
  std::size_t d_h = 0;
  std::size_t n_layers = 1;
  std::size_t d_train = 0;
  std::vector<RunOutcome> runs;
  MeanCI val_acc;
  Dynamics majority = Dynamics::unclassified;
  /// No completed run backs this grid point.
  bool missing = false;
};

struct CurvePoint {
  double size = 0.0;
  double acc = 0.0;
};

struct CapacityPoint {
  std::size_t d_h = 0;
  /// Memorized examples: final train_acc × set size.
  MeanCI capacity;
  MeanCI accuracy;
};

struct PhaseDiagram {
  std::vector<PhaseCell> cells;
  /// (d_h, D_crit) for every model size in the grid.
  std::vector<std::pair<std::size_t, std::optional<std::size_t>>> d_crit;
  std::vector<CapacityPoint> capacity;
  /// d_h where the capacity curve crosses D_crit, when both exist and cross.
  std::optional<double> crossing_d_h;
};

/// Most frequent label; ties resolve to unclassified.
Dynamics majority_label(std::span<const Dynamics> labels);

/// Groups outcomes by (d_h, n_layers, d_train), ordered by those keys.
std::vector<PhaseCell> aggregate_cells(std::span<const RunOutcome> runs);

/// Smallest d_train whose mean final val_acc reaches th.generalized.
/// Throws InputError when d_h is absent or has fewer than two sizes.
std::optional<std::size_t> estimate_d_crit(std::span<const PhaseCell> cells, std::size_t d_h,
                                           const Thresholds& th = {});

struct CapacityRun {
  std::size_t d_h = 0;
  double train_acc = 0.0;
  std::size_t set_size = 0;
};

/// Capacity per model size. Every run must have used `full_set` examples.
std::vector<CapacityPoint> estimate_capacity(std::span<const CapacityRun> runs,
                                             std::size_t full_set = 12'769);

struct DoubleDescent {
  bool detected = false;
  double size_low = 0.0;
  double size_high = 0.0;
  /// Best accuracy before the dip minus the dip minimum.
  double depth = 0.0;
  double dip_min = 0.0;
};

/// Detected iff some interior point sits at least `delta` below a point on
/// each side. The reported interval is the contiguous run of sizes around
/// the deepest such point whose accuracy is at most min(left, right) − delta.
/// Throws InputError for fewer than three points or unsorted sizes.
DoubleDescent detect_double_descent(std::span<const CurvePoint> curve, double delta);

/// max over j of (max_{i<j} acc_i − acc_j), or 0 for a non-decreasing curve.
double dip_depth(std::span<const CurvePoint> curve);

struct Emergence {
  double param_count = 0.0;
  double ratio = 0.0;
};

/// Smallest parameter count whose best accuracy reaches `threshold`, with its
/// ratio to `baseline_count`.
std::optional<Emergence> estimate_emergence(std::span<const CurvePoint> curve, double threshold,
                                            double baseline_count);

/// Aggregates a sweep. When `expected` grid points are given, those without
/// runs appear as missing cells.
PhaseDiagram build_phase_diagram(std::span<const RunOutcome> runs, const Thresholds& th = {},
                                 std::span<const CapacityRun> capacity_runs = {},
                                 std::span<const std::pair<std::size_t, std::size_t>> expected = {});

}  // namespace groklab::dynamics

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lossprio/dataset.hpp"
#include "lossprio/model.hpp"
#include "lossprio/prioritizer.hpp"

namespace lossprio {

struct EvalPoint {
  std::size_t iteration = 0;
  std::size_t backprops = 0;
  double test_error = 0.0;

  bool operator==(const EvalPoint&) const = default;
};

/// One back-propagated batch.
struct BatchRecord {
  std::size_t iteration = 0;
  std::size_t backprops = 0;  // cumulative, including this batch
  double corrupted_fraction = 0.0;
  std::optional<bool> gate_on;

  bool operator==(const BatchRecord&) const = default;
};

struct RunMetrics {
  std::vector<EvalPoint> eval_points;
  std::vector<BatchRecord> batches;
  /// Indexed by example id.
  std::vector<std::uint64_t> pick_counts;
  std::uint64_t seed = 0;
  bool diverged = false;

  /// +inf when there are no evaluations.
  double best_test_error() const;
  /// Fraction of VR batches drawn with the gate open; 0 for other prioritizers.
  double gate_on_fraction() const;
  std::size_t total_backprops() const;

  bool operator==(const RunMetrics&) const = default;
};

struct RunOptions {
  /// Evaluate clean test error each time the backprop count passes a multiple of this.
  std::size_t eval_every = 1280;
  bool record_batches = false;
};

struct RunResult {
  RunMetrics metrics;
  Mlp model;
  /// Every back-propagated batch in order; filled when RunOptions::record_batches is set.
  std::vector<BatchIds> batch_log;
};

/// Trains on `train`, scoring each candidate mini-batch with a forward pass and
/// back-propagating only what the prioritizer emits. Divergence stops the run
/// and sets metrics.diverged; metrics gathered up to that point are kept.
RunResult run_training(const Dataset& train, const Dataset& test, const TrainerConfig& trainer,
                       const PrioritizerConfig& prioritizer, const RunOptions& options = {});

struct SpeedupReport {
  double threshold_error = 0.0;
  std::size_t baseline_backprops = 0;
  /// nullopt: the method never reached the threshold (a dash in the summary).
  std::optional<std::size_t> method_backprops;
  std::optional<double> speedup;
  double best_error = 0.0;
};

/// Threshold = slack * baseline best error; each run's crossing is its first
/// evaluation at or below the threshold.
SpeedupReport compute_speedup(const RunMetrics& baseline, const RunMetrics& method,
                              double slack = 1.2);

/// Single-line JSON; unreached fields are null.
std::string to_json_line(const SpeedupReport& report);

/// First evaluation at or below `threshold`, or nullopt.
std::optional<EvalPoint> first_crossing(const RunMetrics& metrics, double threshold);

/// Lowest test error among evaluations at or below `budget` backprops.
double best_error_within(const RunMetrics& metrics, std::size_t budget);

/// Most- and least-picked ids among `population`. Ties go to the smaller id.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> rank_pick_frequencies(
    const RunMetrics& metrics, std::span<const std::size_t> population, std::size_t top_n);

/// Ids of `dataset` whose (possibly corrupted) label is `label`.
std::vector<std::size_t> class_population(const Dataset& dataset, std::size_t label);

struct AggregatedMetrics {
  std::size_t runs = 0;
  std::vector<std::size_t> backprops;
  std::vector<double> mean_test_error;
  std::vector<double> std_test_error;
  std::vector<double> mean_corrupted_fraction;
  std::vector<double> std_corrupted_fraction;

  /// The mean test-error curve as metrics, for compute_speedup.
  RunMetrics mean_curve() const;
};

/// Pointwise mean and sample standard deviation across runs. Runs with different
/// selectivity stop at different backprop counts, so series are truncated to the
/// shortest run; evaluation backprop counts must agree on that common prefix.
/// Throws AggregationError otherwise.
AggregatedMetrics aggregate_seeds(std::span<const RunMetrics> runs);

/// `iteration,backprops,test_error,corrupted_frac_batch,gate_on`; one row per
/// back-propagated batch, test_error and gate_on left empty where not applicable.
void write_metrics_csv(const RunMetrics& metrics, std::ostream& out);
/// `id,picks`.
void write_picks_csv(const RunMetrics& metrics, std::ostream& out);
void read_metrics_csv(std::istream& in, RunMetrics& metrics);
void read_picks_csv(std::istream& in, RunMetrics& metrics);

/// metrics.csv, picks.csv and run.json (seed, divergence, summary numbers).
void write_run_directory(const RunMetrics& metrics, const std::filesystem::path& dir);
RunMetrics read_run_directory(const std::filesystem::path& dir);

/// `backprops,mean_test_error,std_test_error`.
void write_aggregate_csv(const AggregatedMetrics& agg, std::ostream& out);
/// `iteration,mean_corrupted_frac,std_corrupted_frac`.
void write_aggregate_batches_csv(const AggregatedMetrics& agg, std::ostream& out);

}  // namespace lossprio

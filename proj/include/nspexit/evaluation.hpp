#pragma once

// Efficiency and reliability metrics over exit traces.
//
// Speed-up ratio over an exit histogram N^m (samples leaving at layer m):
//
//   speedup = sum_m M * N^m / sum_m m * N^m
//
// Exit-decision error rates. Every layer m < M that a trace actually ran, at
// or past its min_exit_layer, is one decision event: "exit" at the trace's
// exit layer, "continue" before it. Forced exits at layer M are not events.
//
//   premature = #(wrong prediction, exit)     / #(wrong prediction)
//   delayed   = #(correct prediction, continue) / #(correct prediction)
//
// An empty denominator yields 0.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nspexit/controller.hpp"

namespace nspexit {

struct ExitHistogram {
  // counts[m - 1] = samples exiting at layer m.
  std::vector<std::size_t> counts;

  std::size_t num_layers() const noexcept { return counts.size(); }
  std::size_t total() const noexcept;
};

enum class Metric { kAccuracy, kF1Binary, kMeanAccuracyF1 };

struct EvalReport {
  double accuracy = 0.0;
  std::optional<double> f1_binary;
  double speedup = 1.0;
  ExitHistogram histogram;
  double premature_rate = 0.0;
  double delayed_rate = 0.0;
  double mean_exit_layer = 0.0;
  std::size_t degenerate_events = 0;
};

struct CurvePoint {
  double threshold = 0.0;
  double speedup = 1.0;
  double performance = 0.0;
  double premature_rate = 0.0;
  double delayed_rate = 0.0;
  EvalReport report;
};

struct CalibrationResult {
  ExitPolicy policy;
  // The tuned knob: tau for threshold signals, the entropy threshold for the
  // patience-confidence signal, the integer target for patience.
  double knob = 0.0;
  EvalReport report;
  bool within_tolerance = false;
  std::size_t iterations = 0;
};

ExitHistogram exit_histogram(std::span<const ExitTrace> traces, std::size_t num_layers);

// Throws EmptyHistogram when no sample is counted.
double speed_up_ratio(const ExitHistogram& histogram);

double premature_exiting_rate(std::span<const ExitTrace> traces);
double delayed_exiting_rate(std::span<const ExitTrace> traces);

// Fraction of (correct, incorrect) pairs whose certainty is ordered correctly,
// ties counted as one half. Higher certainty should mean "more likely
// correct". Throws DegenerateLabels when all flags agree.
double dis_ranking_consistency(std::span<const double> certainty,
                               const std::vector<bool>& correct);

// Accuracy, or binary F1 with class 1 as the positive class. F1 throws
// NonBinaryLabels if any label or prediction is outside {0, 1}.
double task_performance(std::span<const ExitTrace> traces, Metric metric);

EvalReport summarize(std::span<const ExitTrace> traces, std::size_t num_layers,
                     std::size_t num_classes);

EvalReport evaluate(const MultiExitModel& model, std::span<const SampleFeatures> dataset,
                    const ExitPolicy& policy, std::size_t threads = 1);

double performance_of(const EvalReport& report, Metric metric);

// Certainty oriented so that higher means more certain.
double oriented_certainty(const ScoreReport& report);

// DIS at a fixed one-based layer over every sample, using the per-layer
// score as certainty and the per-layer prediction's correctness as label.
// Degenerate scores are skipped.
double dis_at_layer(const MultiExitModel& model, std::span<const SampleFeatures> dataset,
                    const SignalKind& signal, std::size_t layer);

inline constexpr std::size_t kDefaultCalibrationIters = 64;

// Tune the policy knob so that the dataset's speed-up ratio lands within tol
// of target_speedup. Returns the closest point found, flagged through
// within_tolerance. Throws UnreachableTarget if target_speedup exceeds the
// speed-up of the most permissive setting by more than tol.
CalibrationResult calibrate_threshold(const MultiExitModel& model,
                                      std::span<const SampleFeatures> dataset,
                                      const SignalKind& signal, double target_speedup,
                                      double tol, std::size_t max_iters = kDefaultCalibrationIters,
                                      std::size_t min_exit_layer = 1, std::size_t threads = 1);

// One point per tau in the ascending grid.
std::vector<CurvePoint> sweep_curve(const MultiExitModel& model,
                                    std::span<const SampleFeatures> dataset,
                                    const SignalKind& signal, std::span<const double> tau_grid,
                                    Metric metric = Metric::kAccuracy,
                                    std::size_t min_exit_layer = 1, std::size_t threads = 1);

}  // namespace nspexit

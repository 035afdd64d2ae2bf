#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "nspexit/linalg.hpp"
#include "nspexit/signals.hpp"

namespace nspexit {

// One internal classifier head per layer. Heads share feature_dim and
// num_classes and never share parameters.
class MultiExitModel {
 public:
  explicit MultiExitModel(std::vector<ProjectionContext> heads);

  std::size_t num_layers() const noexcept { return heads_.size(); }
  std::size_t feature_dim() const noexcept { return heads_.front().feature_dim(); }
  std::size_t num_classes() const noexcept { return heads_.front().num_classes(); }
  // Zero-based.
  const ProjectionContext& head(std::size_t layer) const { return heads_.at(layer); }

 private:
  std::vector<ProjectionContext> heads_;
};

struct SampleFeatures {
  std::vector<RealVector> per_layer;
  std::size_t gold_label = 0;

  friend bool operator==(const SampleFeatures&, const SampleFeatures&) = default;
};

// Exit rule, by signal orientation:
//   higher-means-uncertain (CAP, entropy): exit iff value <  threshold
//   higher-means-certain (max-prob, energy): exit iff value >= threshold
//   patience family: exit iff count >= target (threshold unused)
//   oracle: exit iff the current prediction is correct
// The last layer always exits. Layers below min_exit_layer never do.
struct ExitPolicy {
  SignalKind signal = signal::Cap{};
  double threshold = 0.0;
  std::size_t min_exit_layer = 1;
};

struct ExitTrace {
  // One-based, in [1, M].
  std::size_t exit_layer = 0;
  std::size_t predicted_class = 0;
  std::size_t gold_label = 0;
  std::size_t num_layers = 0;
  std::size_t min_exit_layer = 1;
  // Both have exactly exit_layer entries; layers past the exit are never run.
  std::vector<ScoreReport> per_layer_scores;
  std::vector<std::size_t> per_layer_argmax;
  std::size_t degenerate_layers = 0;
};

bool decide_exit(const ExitPolicy& policy, const ScoreReport& report,
                 const PatienceState& patience, std::size_t layer, std::size_t num_layers);

// Score one layer's feature with the given head. Updates `patience` for the
// patience-family signals. CAP on a degenerate feature yields a report with
// degenerate = true instead of throwing.
ScoreReport score_layer(const ProjectionContext& head, const SignalKind& signal,
                        const RealVector& feature, std::size_t gold_label,
                        PatienceState& patience);

// Scores at every layer, ignoring exits. Used for per-layer diagnostics.
std::vector<ScoreReport> score_all_layers(const MultiExitModel& model, const SignalKind& signal,
                                          const SampleFeatures& sample);

ExitTrace run_sample(const MultiExitModel& model, const ExitPolicy& policy,
                     const SampleFeatures& sample);

// Traces in input order. The result does not depend on `threads`. The first
// failing sample (lowest index) aborts the run; its index is attached to the
// rethrown Error.
std::vector<ExitTrace> run_dataset(const MultiExitModel& model, const ExitPolicy& policy,
                                   std::span<const SampleFeatures> dataset,
                                   std::size_t threads = 1);

}  // namespace nspexit

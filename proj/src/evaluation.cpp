#include "nspexit/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

#include "nspexit/error.hpp"

namespace nspexit {

namespace {

struct DecisionCounts {
  std::size_t wrong = 0;
  std::size_t wrong_exit = 0;
  std::size_t right = 0;
  std::size_t right_continue = 0;
};

DecisionCounts count_decisions(std::span<const ExitTrace> traces) {
  DecisionCounts c;
  for (const auto& t : traces) {
    for (std::size_t m = std::max<std::size_t>(1, t.min_exit_layer); m <= t.exit_layer; ++m) {
      if (m >= t.num_layers) break;
      const bool exited = m == t.exit_layer;
      if (t.per_layer_argmax[m - 1] == t.gold_label) {
        ++c.right;
        if (!exited) ++c.right_continue;
      } else {
        ++c.wrong;
        if (exited) ++c.wrong_exit;
      }
    }
  }
  return c;
}

double ratio_or_zero(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

// Apply the calibration knob to a signal. Threshold signals take it as tau;
// the patience-confidence signal as its entropy threshold; patience as its
// integer target.
ExitPolicy policy_with_knob(const SignalKind& signal, double knob, std::size_t min_exit_layer) {
  ExitPolicy policy{signal, 0.0, min_exit_layer};
  if (auto* pc = std::get_if<signal::PatienceConfidence>(&policy.signal)) {
    pc->entropy_threshold = knob;
  } else if (auto* p = std::get_if<signal::Patience>(&policy.signal)) {
    if (!(knob >= 1.0)) throw Error(ErrorKind::kInvalidArgument, "patience target must be >= 1");
    p->target = static_cast<std::size_t>(std::llround(knob));
  } else {
    policy.threshold = knob;
  }
  return policy;
}

std::pair<double, double> value_range(const MultiExitModel& model,
                                      std::span<const SampleFeatures> dataset,
                                      const SignalKind& signal) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& sample : dataset) {
    for (const auto& r : score_all_layers(model, signal, sample)) {
      if (r.degenerate || !std::isfinite(r.value)) continue;
      lo = std::min(lo, r.value);
      hi = std::max(hi, r.value);
    }
  }
  if (!(lo <= hi)) lo = hi = 0.0;
  return {lo, hi};
}

}  // namespace

std::size_t ExitHistogram::total() const noexcept {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

ExitHistogram exit_histogram(std::span<const ExitTrace> traces, std::size_t num_layers) {
  ExitHistogram h{std::vector<std::size_t>(num_layers, 0)};
  for (const auto& t : traces) {
    if (t.exit_layer < 1 || t.exit_layer > num_layers) {
      throw Error(ErrorKind::kInvalidArgument, "trace exit layer out of range");
    }
    ++h.counts[t.exit_layer - 1];
  }
  return h;
}

double speed_up_ratio(const ExitHistogram& histogram) {
  const double layers = static_cast<double>(histogram.num_layers());
  double full = 0.0;
  double used = 0.0;
  for (std::size_t m = 1; m <= histogram.num_layers(); ++m) {
    const double n = static_cast<double>(histogram.counts[m - 1]);
    full += layers * n;
    used += static_cast<double>(m) * n;
  }
  if (used == 0.0) throw Error(ErrorKind::kEmptyHistogram, "no samples in histogram");
  return full / used;
}

double premature_exiting_rate(std::span<const ExitTrace> traces) {
  const DecisionCounts c = count_decisions(traces);
  return ratio_or_zero(c.wrong_exit, c.wrong);
}

double delayed_exiting_rate(std::span<const ExitTrace> traces) {
  const DecisionCounts c = count_decisions(traces);
  return ratio_or_zero(c.right_continue, c.right);
}

double dis_ranking_consistency(std::span<const double> certainty,
                               const std::vector<bool>& correct) {
  if (certainty.size() != correct.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "certainty and correctness lengths differ");
  }
  std::vector<std::pair<double, bool>> items;
  items.reserve(certainty.size());
  std::size_t positives = 0;
  for (std::size_t i = 0; i < certainty.size(); ++i) {
    if (!std::isfinite(certainty[i])) {
      throw Error(ErrorKind::kNonFinite, "certainty value is not finite");
    }
    items.emplace_back(certainty[i], correct[i]);
    if (correct[i]) ++positives;
  }
  const std::size_t negatives = items.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw Error(ErrorKind::kDegenerateLabels, "need at least one correct and one incorrect sample");
  }
  std::sort(items.begin(), items.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  double concordant = 0.0;
  std::size_t negatives_below = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    std::size_t pos = 0;
    std::size_t neg = 0;
    while (j < items.size() && items[j].first == items[i].first) {
      items[j].second ? ++pos : ++neg;
      ++j;
    }
    concordant += static_cast<double>(pos) *
                  (static_cast<double>(negatives_below) + 0.5 * static_cast<double>(neg));
    negatives_below += neg;
    i = j;
  }
  return concordant / (static_cast<double>(positives) * static_cast<double>(negatives));
}

double task_performance(std::span<const ExitTrace> traces, Metric metric) {
  if (traces.empty()) throw Error(ErrorKind::kInvalidArgument, "no traces to score");
  if (metric == Metric::kAccuracy) {
    std::size_t hits = 0;
    for (const auto& t : traces) hits += t.predicted_class == t.gold_label;
    return static_cast<double>(hits) / static_cast<double>(traces.size());
  }
  if (metric == Metric::kMeanAccuracyF1) {
    return 0.5 * (task_performance(traces, Metric::kAccuracy) +
                  task_performance(traces, Metric::kF1Binary));
  }
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  for (const auto& t : traces) {
    if (t.predicted_class > 1 || t.gold_label > 1) {
      throw Error(ErrorKind::kNonBinaryLabels, "F1 needs labels in {0, 1}");
    }
    const bool pred = t.predicted_class == 1;
    const bool gold = t.gold_label == 1;
    tp += pred && gold;
    fp += pred && !gold;
    fn += !pred && gold;
  }
  const double precision = ratio_or_zero(tp, tp + fp);
  const double recall = ratio_or_zero(tp, tp + fn);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

EvalReport summarize(std::span<const ExitTrace> traces, std::size_t num_layers,
                     std::size_t num_classes) {
  EvalReport r;
  r.histogram = exit_histogram(traces, num_layers);
  r.speedup = speed_up_ratio(r.histogram);
  r.accuracy = task_performance(traces, Metric::kAccuracy);
  if (num_classes == 2) r.f1_binary = task_performance(traces, Metric::kF1Binary);
  const DecisionCounts c = count_decisions(traces);
  r.premature_rate = ratio_or_zero(c.wrong_exit, c.wrong);
  r.delayed_rate = ratio_or_zero(c.right_continue, c.right);
  double layer_sum = 0.0;
  for (const auto& t : traces) {
    layer_sum += static_cast<double>(t.exit_layer);
    r.degenerate_events += t.degenerate_layers;
  }
  r.mean_exit_layer = layer_sum / static_cast<double>(traces.size());
  return r;
}

EvalReport evaluate(const MultiExitModel& model, std::span<const SampleFeatures> dataset,
                    const ExitPolicy& policy, std::size_t threads) {
  const auto traces = run_dataset(model, policy, dataset, threads);
  return summarize(traces, model.num_layers(), model.num_classes());
}

double performance_of(const EvalReport& report, Metric metric) {
  switch (metric) {
    case Metric::kAccuracy:
      return report.accuracy;
    case Metric::kF1Binary:
      if (!report.f1_binary) throw Error(ErrorKind::kNonBinaryLabels, "F1 needs two classes");
      return *report.f1_binary;
    case Metric::kMeanAccuracyF1:
      if (!report.f1_binary) throw Error(ErrorKind::kNonBinaryLabels, "F1 needs two classes");
      return 0.5 * (report.accuracy + *report.f1_binary);
  }
  return report.accuracy;
}

double oriented_certainty(const ScoreReport& report) {
  return report.orientation == Orientation::kHigherMeansMoreUncertain ? -report.value
                                                                      : report.value;
}

double dis_at_layer(const MultiExitModel& model, std::span<const SampleFeatures> dataset,
                    const SignalKind& signal, std::size_t layer) {
  if (layer < 1 || layer > model.num_layers()) {
    throw Error(ErrorKind::kInvalidArgument, "layer out of range");
  }
  std::vector<double> certainty;
  std::vector<bool> correct;
  for (const auto& sample : dataset) {
    const auto reports = score_all_layers(model, signal, sample);
    const ScoreReport& r = reports[layer - 1];
    if (r.degenerate) continue;
    certainty.push_back(oriented_certainty(r));
    correct.push_back(r.argmax_class == sample.gold_label);
  }
  return dis_ranking_consistency(certainty, correct);
}

CalibrationResult calibrate_threshold(const MultiExitModel& model,
                                      std::span<const SampleFeatures> dataset,
                                      const SignalKind& signal, double target_speedup,
                                      double tol, std::size_t max_iters,
                                      std::size_t min_exit_layer, std::size_t threads) {
  validate_signal(signal);
  const double layers = static_cast<double>(model.num_layers());
  if (!(target_speedup >= 1.0 && target_speedup <= layers)) {
    throw Error(ErrorKind::kInvalidArgument, "target speed-up must lie in [1, M]");
  }
  if (!(tol > 0.0)) throw Error(ErrorKind::kInvalidArgument, "tolerance must be positive");
  if (dataset.empty()) throw Error(ErrorKind::kInvalidArgument, "empty dataset");

  CalibrationResult best;
  double best_gap = std::numeric_limits<double>::infinity();
  // Evaluates one knob setting, keeps the closest point and returns its speed-up.
  auto probe = [&](double knob) {
    ExitPolicy policy = policy_with_knob(signal, knob, min_exit_layer);
    EvalReport report = evaluate(model, dataset, policy, threads);
    const double speedup = report.speedup;
    const double gap = std::abs(speedup - target_speedup);
    ++best.iterations;
    if (gap < best_gap) {
      best_gap = gap;
      best.policy = std::move(policy);
      best.knob = knob;
      best.report = std::move(report);
      best.within_tolerance = gap <= tol;
    }
    return speedup;
  };
  auto unreachable = [&](double most_permissive) {
    return Error(ErrorKind::kUnreachableTarget,
                 "target speed-up " + std::to_string(target_speedup) +
                     " exceeds the most permissive setting's " +
                     std::to_string(most_permissive));
  };

  if (std::holds_alternative<signal::Oracle>(signal)) {
    const double s = probe(0.5);
    if (target_speedup > s + tol) throw unreachable(s);
    return best;
  }

  if (std::holds_alternative<signal::Patience>(signal)) {
    // Speed-up falls as the target grows; scan every integer target.
    const double permissive = probe(1.0);
    if (target_speedup > permissive + tol) throw unreachable(permissive);
    for (std::size_t t = 2; t <= model.num_layers() && !best.within_tolerance; ++t) {
      probe(static_cast<double>(t));
    }
    return best;
  }

  // Knob settings ordered by permissiveness: `never` exits nothing early,
  // `all` exits every sample at its first opportunity. Speed-up is
  // non-decreasing from the former to the latter.
  double never = 0.0;
  double all = 0.0;
  if (std::holds_alternative<signal::PatienceConfidence>(signal)) {
    const auto [lo, hi] = value_range(model, dataset, signal::Entropy{});
    (void)lo;
    never = 0.0;
    all = std::nextafter(hi, std::numeric_limits<double>::infinity());
  } else {
    const auto [lo, hi] = value_range(model, dataset, signal);
    const double above = std::nextafter(hi, std::numeric_limits<double>::infinity());
    if (orientation_of(signal) == Orientation::kHigherMeansMoreUncertain) {
      never = lo;
      all = above;
    } else {
      never = above;
      all = lo;
    }
  }

  const double s_never = probe(never);
  if (best.within_tolerance) return best;
  const double s_all = probe(all);
  if (target_speedup > s_all + tol) throw unreachable(s_all);
  if (best.within_tolerance || s_never > target_speedup) return best;

  double lo = never;
  double hi = all;
  for (std::size_t i = 0; i < max_iters && !best.within_tolerance; ++i) {
    const double mid = lo + 0.5 * (hi - lo);
    if (mid == lo || mid == hi) break;
    if (probe(mid) < target_speedup) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return best;
}

std::vector<CurvePoint> sweep_curve(const MultiExitModel& model,
                                    std::span<const SampleFeatures> dataset,
                                    const SignalKind& signal, std::span<const double> tau_grid,
                                    Metric metric, std::size_t min_exit_layer,
                                    std::size_t threads) {
  validate_signal(signal);
  if (tau_grid.empty()) throw Error(ErrorKind::kInvalidArgument, "empty threshold grid");
  if (!std::is_sorted(tau_grid.begin(), tau_grid.end())) {
    throw Error(ErrorKind::kInvalidArgument, "threshold grid must be ascending");
  }
  std::vector<CurvePoint> points;
  points.reserve(tau_grid.size());
  for (double tau : tau_grid) {
    CurvePoint p;
    p.threshold = tau;
    p.report = evaluate(model, dataset, policy_with_knob(signal, tau, min_exit_layer), threads);
    p.speedup = p.report.speedup;
    p.performance = performance_of(p.report, metric);
    p.premature_rate = p.report.premature_rate;
    p.delayed_rate = p.report.delayed_rate;
    points.push_back(std::move(p));
  }
  return points;
}

}  // namespace nspexit

#include "nspexit/controller.hpp"

#include <algorithm>
#include <exception>
#include <limits>
#include <mutex>
#include <string>
#include <thread>

#include "nspexit/error.hpp"

namespace nspexit {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void check_sample(const MultiExitModel& model, const SampleFeatures& sample) {
  if (sample.per_layer.size() != model.num_layers()) {
    throw Error(ErrorKind::kDimensionMismatch,
                "sample has " + std::to_string(sample.per_layer.size()) + " layers, model has " +
                    std::to_string(model.num_layers()));
  }
  for (const auto& x : sample.per_layer) {
    if (x.dim() != model.feature_dim()) {
      throw Error(ErrorKind::kDimensionMismatch,
                  "feature has dim " + std::to_string(x.dim()) + ", model expects " +
                      std::to_string(model.feature_dim()));
    }
  }
  if (sample.gold_label >= model.num_classes()) {
    throw Error(ErrorKind::kDimensionMismatch, "gold label out of range");
  }
}

}  // namespace

MultiExitModel::MultiExitModel(std::vector<ProjectionContext> heads) : heads_(std::move(heads)) {
  if (heads_.empty()) throw Error(ErrorKind::kInvalidArgument, "model needs at least one head");
  for (const auto& h : heads_) {
    if (h.feature_dim() != heads_.front().feature_dim() ||
        h.num_classes() != heads_.front().num_classes()) {
      throw Error(ErrorKind::kDimensionMismatch, "heads disagree on feature_dim or num_classes");
    }
  }
}

bool decide_exit(const ExitPolicy& policy, const ScoreReport& report,
                 const PatienceState& patience, std::size_t layer, std::size_t num_layers) {
  if (layer >= num_layers) return true;
  if (layer < policy.min_exit_layer || report.degenerate) return false;
  return std::visit(
      overloaded{
          [&](const signal::Patience& s) { return patience.count >= s.target; },
          [&](const signal::PatienceConfidence& s) { return patience.count >= s.target; },
          [&](const signal::Oracle&) { return report.value >= 0.5; },
          [&](const auto&) {
            return report.orientation == Orientation::kHigherMeansMoreUncertain
                       ? report.value < policy.threshold
                       : report.value >= policy.threshold;
          },
      },
      policy.signal);
}

ScoreReport score_layer(const ProjectionContext& head, const SignalKind& signal,
                        const RealVector& feature, std::size_t gold_label,
                        PatienceState& patience) {
  const RealVector l = logits(head, feature);
  const std::size_t predicted = argmax(l.values());
  return std::visit(
      overloaded{
          [&](const signal::Cap& s) {
            try {
              return cap_score(head, feature, s.alpha);
            } catch (const Error& e) {
              if (e.kind() != ErrorKind::kDegenerateFeature) throw;
              return ScoreReport{std::numeric_limits<double>::quiet_NaN(),
                                 Orientation::kHigherMeansMoreUncertain, predicted, true};
            }
          },
          [&](const signal::Entropy&) { return entropy_score(softmax(l)); },
          [&](const signal::MaxProb&) { return max_prob_score(softmax(l)); },
          [&](const signal::Energy& s) { return energy_score(l, s.temperature); },
          [&](const signal::Patience&) {
            patience = patience_update(patience, predicted);
            return ScoreReport{static_cast<double>(patience.count),
                               Orientation::kHigherMeansMoreCertain, predicted};
          },
          [&](const signal::PatienceConfidence& s) {
            const double h = entropy_score(softmax(l)).value;
            patience = patience_confidence_update(patience, h, s.entropy_threshold);
            return ScoreReport{static_cast<double>(patience.count),
                               Orientation::kHigherMeansMoreCertain, predicted};
          },
          [&](const signal::Oracle&) {
            return ScoreReport{predicted == gold_label ? 1.0 : 0.0,
                               Orientation::kHigherMeansMoreCertain, predicted};
          },
      },
      signal);
}

std::vector<ScoreReport> score_all_layers(const MultiExitModel& model, const SignalKind& signal,
                                          const SampleFeatures& sample) {
  check_sample(model, sample);
  PatienceState patience;
  std::vector<ScoreReport> out;
  out.reserve(model.num_layers());
  for (std::size_t m = 0; m < model.num_layers(); ++m) {
    out.push_back(score_layer(model.head(m), signal, sample.per_layer[m], sample.gold_label,
                              patience));
  }
  return out;
}

ExitTrace run_sample(const MultiExitModel& model, const ExitPolicy& policy,
                     const SampleFeatures& sample) {
  validate_signal(policy.signal);
  check_sample(model, sample);
  const std::size_t layers = model.num_layers();

  ExitTrace trace;
  trace.gold_label = sample.gold_label;
  trace.num_layers = layers;
  trace.min_exit_layer = policy.min_exit_layer;
  PatienceState patience;
  for (std::size_t m = 1; m <= layers; ++m) {
    const ScoreReport report = score_layer(model.head(m - 1), policy.signal,
                                           sample.per_layer[m - 1], sample.gold_label, patience);
    trace.per_layer_scores.push_back(report);
    trace.per_layer_argmax.push_back(report.argmax_class);
    if (report.degenerate) ++trace.degenerate_layers;
    if (decide_exit(policy, report, patience, m, layers)) {
      trace.exit_layer = m;
      trace.predicted_class = report.argmax_class;
      break;
    }
  }
  return trace;
}

std::vector<ExitTrace> run_dataset(const MultiExitModel& model, const ExitPolicy& policy,
                                   std::span<const SampleFeatures> dataset,
                                   std::size_t threads) {
  std::vector<ExitTrace> traces(dataset.size());
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, dataset.size()));

  std::mutex failure_mutex;
  std::size_t failed_index = std::numeric_limits<std::size_t>::max();
  std::exception_ptr failure;

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      try {
        traces[i] = run_sample(model, policy, dataset[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (i < failed_index) {
          failed_index = i;
          failure = std::current_exception();
        }
        return;
      }
    }
  };

  if (workers == 1) {
    work(0, dataset.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (dataset.size() + workers - 1) / workers;
    for (std::size_t begin = 0; begin < dataset.size(); begin += chunk) {
      pool.emplace_back(work, begin, std::min(dataset.size(), begin + chunk));
    }
  }

  if (failure) {
    try {
      std::rethrow_exception(failure);
    } catch (Error& e) {
      e.set_sample_index(failed_index);
      throw;
    }
  }
  return traces;
}

}  // namespace nspexit

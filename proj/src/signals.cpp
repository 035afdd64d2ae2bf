#include "nspexit/signals.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "nspexit/error.hpp"

namespace nspexit {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void require_probability(const RealVector& p) {
  if (p.dim() == 0) throw Error(ErrorKind::kNotAProbability, "empty probability vector");
  double sum = 0.0;
  for (double v : p.values()) {
    if (v < 0.0) throw Error(ErrorKind::kNotAProbability, "negative probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw Error(ErrorKind::kNotAProbability, "probabilities sum to " + std::to_string(sum));
  }
}

std::string format_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

void validate_signal(const SignalKind& kind) {
  std::visit(overloaded{
                 [](const signal::Cap& s) {
                   if (!(s.alpha > 0.0) || !std::isfinite(s.alpha))
                     throw Error(ErrorKind::kInvalidArgument, "alpha must be positive");
                 },
                 [](const signal::Energy& s) {
                   if (!(s.temperature > 0.0) || !std::isfinite(s.temperature))
                     throw Error(ErrorKind::kInvalidArgument, "temperature must be positive");
                 },
                 [](const signal::Patience& s) {
                   if (s.target < 1)
                     throw Error(ErrorKind::kInvalidArgument, "patience target must be >= 1");
                 },
                 [](const signal::PatienceConfidence& s) {
                   if (s.target < 1)
                     throw Error(ErrorKind::kInvalidArgument, "patience target must be >= 1");
                   if (!(s.entropy_threshold >= 0.0) || !std::isfinite(s.entropy_threshold))
                     throw Error(ErrorKind::kInvalidArgument,
                                 "entropy threshold must be non-negative");
                 },
                 [](const auto&) {},
             },
             kind);
}

Orientation orientation_of(const SignalKind& kind) {
  if (std::holds_alternative<signal::Cap>(kind) || std::holds_alternative<signal::Entropy>(kind)) {
    return Orientation::kHigherMeansMoreUncertain;
  }
  return Orientation::kHigherMeansMoreCertain;
}

bool is_patience_family(const SignalKind& kind) {
  return std::holds_alternative<signal::Patience>(kind) ||
         std::holds_alternative<signal::PatienceConfidence>(kind);
}

std::string signal_label(const SignalKind& kind) {
  return std::visit(
      overloaded{
          [](const signal::Cap& s) { return "cap(alpha=" + format_number(s.alpha) + ")"; },
          [](const signal::Entropy&) { return std::string("entropy"); },
          [](const signal::MaxProb&) { return std::string("maxprob"); },
          [](const signal::Energy& s) {
            return "energy(T=" + format_number(s.temperature) + ")";
          },
          [](const signal::Patience& s) {
            return "patience(target=" + std::to_string(s.target) + ")";
          },
          [](const signal::PatienceConfidence& s) {
            return "pcee(entropy_threshold=" + format_number(s.entropy_threshold) +
                   ",target=" + std::to_string(s.target) + ")";
          },
          [](const signal::Oracle&) { return std::string("oracle"); },
      },
      kind);
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorKind::kInvalidArgument, "argmax of an empty vector");
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) -
                                  values.begin());
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

RealVector softmax(const RealVector& logits) {
  const auto l = logits.values();
  if (l.empty()) return RealVector{};
  const double m = *std::max_element(l.begin(), l.end());
  std::vector<double> p(l.size());
  double s = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    p[i] = std::exp(l[i] - m);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return RealVector(std::move(p));
}

RealVector extended_softmax(const RealVector& logits, double nsp, double alpha) {
  std::vector<double> extended;
  extended.reserve(logits.dim() + 1);
  extended.push_back(alpha * nsp);
  extended.insert(extended.end(), logits.data().begin(), logits.data().end());
  return softmax(RealVector(std::move(extended)));
}

double cap_from_logits(const RealVector& logits, double nsp, double alpha) {
  const double unk = alpha * nsp;
  std::vector<double> extended;
  extended.reserve(logits.dim() + 1);
  extended.push_back(unk);
  extended.insert(extended.end(), logits.data().begin(), logits.data().end());
  return std::exp(unk - log_sum_exp(extended));
}

ScoreReport cap_score(const ProjectionContext& ctx, const RealVector& x_raw, double alpha) {
  if (!(alpha > 0.0)) throw Error(ErrorKind::kInvalidArgument, "alpha must be positive");
  const RealVector l = logits(ctx, x_raw);
  const double nsp = nsp_score(ctx, x_raw);
  return ScoreReport{cap_from_logits(l, nsp, alpha), Orientation::kHigherMeansMoreUncertain,
                     argmax(l.values())};
}

ScoreReport entropy_score(const RealVector& probabilities) {
  require_probability(probabilities);
  double h = 0.0;
  for (double p : probabilities.values()) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return ScoreReport{std::max(0.0, h), Orientation::kHigherMeansMoreUncertain,
                     argmax(probabilities.values())};
}

ScoreReport max_prob_score(const RealVector& probabilities) {
  require_probability(probabilities);
  const std::size_t k = argmax(probabilities.values());
  return ScoreReport{probabilities[k], Orientation::kHigherMeansMoreCertain, k};
}

ScoreReport energy_score(const RealVector& logits, double temperature) {
  if (!(temperature > 0.0)) {
    throw Error(ErrorKind::kInvalidArgument, "temperature must be positive");
  }
  std::vector<double> scaled(logits.data());
  for (double& v : scaled) v /= temperature;
  return ScoreReport{temperature * log_sum_exp(scaled), Orientation::kHigherMeansMoreCertain,
                     argmax(logits.values())};
}

PatienceState patience_update(const PatienceState& state, std::size_t argmax_class) {
  PatienceState next;
  next.count = state.last_argmax == argmax_class ? state.count + 1 : 1;
  next.last_argmax = argmax_class;
  return next;
}

PatienceState patience_confidence_update(const PatienceState& state, double entropy_value,
                                         double entropy_threshold) {
  PatienceState next;
  next.count = entropy_value < entropy_threshold ? state.count + 1 : 0;
  return next;
}

}  // namespace nspexit

#pragma once

// Exiting signals: the certainty-aware probability (CAP) built on the NSP
// score, and the logit-based baselines it is compared against.
//
// CAP appends a virtual "unknown" logit l0 = alpha * NSP(x') to the C class
// logits and reports the softmax mass that lands on it:
//
//   CAP = exp(l0) / (sum_i exp(l_i) + exp(l0)),   i = 1..C.
//
// Lower CAP means more certain; a head exits once CAP drops below tau.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>

#include "nspexit/linalg.hpp"

namespace nspexit {

enum class Orientation { kHigherMeansMoreCertain, kHigherMeansMoreUncertain };

struct ScoreReport {
  double value = 0.0;
  Orientation orientation = Orientation::kHigherMeansMoreCertain;
  // Argmax over the C original classes. The UNK logit never predicts.
  std::size_t argmax_class = 0;
  // The layer's offset feature was below the norm floor; value is NaN.
  bool degenerate = false;
};

// Consecutive-layer counter shared by the patience and patience-confidence
// signals. For the patience signal count == 0 iff last_argmax is empty; the
// patience-confidence counter does not track the argmax.
struct PatienceState {
  std::size_t count = 0;
  std::optional<std::size_t> last_argmax;

  friend bool operator==(const PatienceState&, const PatienceState&) = default;
};

namespace signal {

struct Cap {
  double alpha = 1.0;
};
struct Entropy {};
struct MaxProb {};
struct Energy {
  double temperature = 1.0;
};
struct Patience {
  std::size_t target = 2;
};
// Exit once the entropy stays below entropy_threshold for `target`
// consecutive layers.
struct PatienceConfidence {
  double entropy_threshold = 0.1;
  std::size_t target = 2;
};
// Diagnostic upper bound: exits exactly when the current prediction is
// correct. Needs the gold label, so it only exists for evaluation.
struct Oracle {};

}  // namespace signal

using SignalKind = std::variant<signal::Cap, signal::Entropy, signal::MaxProb, signal::Energy,
                                signal::Patience, signal::PatienceConfidence, signal::Oracle>;

// Throws InvalidArgument if a parameter is out of range.
void validate_signal(const SignalKind& kind);
Orientation orientation_of(const SignalKind& kind);
bool is_patience_family(const SignalKind& kind);
// Stable human-readable label, e.g. "cap(alpha=0.1)".
std::string signal_label(const SignalKind& kind);

std::size_t argmax(std::span<const double> values);
double log_sum_exp(std::span<const double> values);

RealVector softmax(const RealVector& logits);

// Softmax over (alpha * nsp, l_1, ..., l_C); index 0 is the UNK class.
RealVector extended_softmax(const RealVector& logits, double nsp, double alpha);

// Closed form of CAP for a given NSP value.
double cap_from_logits(const RealVector& logits, double nsp, double alpha);

ScoreReport cap_score(const ProjectionContext& ctx, const RealVector& x_raw, double alpha);

// Shannon entropy in nats. Throws NotAProbability.
ScoreReport entropy_score(const RealVector& probabilities);
ScoreReport max_prob_score(const RealVector& probabilities);
// Negative free energy T * logsumexp(l / T); higher means more certain.
ScoreReport energy_score(const RealVector& logits, double temperature);

PatienceState patience_update(const PatienceState& state, std::size_t argmax_class);
PatienceState patience_confidence_update(const PatienceState& state, double entropy_value,
                                         double entropy_threshold);

}  // namespace nspexit

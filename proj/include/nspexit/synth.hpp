#pragma once

// Seeded multi-exit benchmark: Gaussian class clusters that separate further
// at deeper layers, plus per-layer softmax-regression heads.
//
// Feature layout for a sample of class y at layer m (one-based):
//   dims [0, C)        class mean e_y * (base_separation + depth_gain * m)
//                      + noise_sigma * a * eps
//   dims [C, C+K)      noise_sigma * a * eps       (class-irrelevant nuisance)
//   dims [C+K, N)      noise_sigma * eps           (background)
// where a = exp(difficulty_spread * z) is drawn once per sample and eps is
// fresh standard normal noise per (sample, layer, dim). A sample with a large
// a is harder at every layer and carries more class-irrelevant energy.
//
// All randomness comes from Philox4x32-10 keyed by the seed, addressed by
// (sample, layer, dim, stream) counters, so every value can be regenerated
// independently of generation order.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "nspexit/trace_io.hpp"

namespace nspexit {

inline constexpr std::string_view kRngAlgorithm = "philox4x32-10";

using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

PhiloxCounter philox4x32_10(PhiloxCounter counter, PhiloxKey key);

// Counter-addressed draws. Each counter yields one uniform in [0, 1) or a pair
// of standard normals (Box-Muller).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

  double uniform(const PhiloxCounter& counter) const;
  std::array<double, 2> normal_pair(const PhiloxCounter& counter) const;

 private:
  PhiloxKey key_;
};

struct SynthConfig {
  std::size_t feature_dim = 16;
  std::size_t num_classes = 2;
  std::size_t num_layers = 6;
  std::size_t num_samples = 2000;
  std::uint64_t seed = 0;
  double base_separation = 0.5;
  double depth_gain = 0.5;
  double noise_sigma = 1.0;
  std::size_t class_irrelevant_dims = 8;
  double difficulty_spread = 0.5;
};

enum class HeadInit { kZero, kGaussian };

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t epochs = 300;
  double l2_penalty = 1e-3;
  // Zero init keeps the softmax weight columns summing to zero, so W is never
  // of full column rank; the default draws a small Gaussian instead.
  HeadInit init = HeadInit::kGaussian;
  double init_scale = 0.01;
  std::uint64_t seed = 0;
};

struct HeadFit {
  LayerHead head;
  // Mean loss before each step, then after the last one: epochs + 1 entries.
  std::vector<double> loss_history;
  double train_accuracy = 0.0;
};

// Throws InvalidConfig.
void validate(const SynthConfig& config);
void validate(const TrainConfig& config);

// Features and labels with zero (untrained) heads.
TraceDataset generate(const SynthConfig& config);

// Full-batch gradient descent on mean softmax cross-entropy plus
// (l2_penalty / 2) * ||W||^2. `layer` only selects the init stream.
// Throws Divergence if the loss becomes non-finite.
HeadFit train_head(std::span<const RealVector> features, std::span<const std::size_t> labels,
                   std::size_t num_classes, const TrainConfig& config, std::size_t layer = 0);

// Trains one head per layer independently (layers may run concurrently).
TraceDataset train_heads(const TraceDataset& dataset, const TrainConfig& config,
                         std::vector<HeadFit>* fits = nullptr, std::size_t threads = 1);

}  // namespace nspexit

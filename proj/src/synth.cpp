#include "nspexit/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <string>
#include <thread>

#include "nspexit/error.hpp"
#include "nspexit/signals.hpp"

namespace nspexit {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

// Stream tags in the last counter word.
constexpr std::uint32_t kLabelStream = 1;
constexpr std::uint32_t kDifficultyStream = 2;
constexpr std::uint32_t kNoiseStream = 3;
constexpr std::uint32_t kInitStream = 4;

std::uint32_t lo32(std::uint64_t v) { return static_cast<std::uint32_t>(v); }
std::uint32_t hi32(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

double to_unit(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (static_cast<std::uint64_t>(hi >> 5) << 26) | (lo >> 6);
  return static_cast<double>(bits) * 0x1.0p-53;
}

std::string format_real(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<LayerHead> zero_heads(std::size_t layers, std::size_t n, std::size_t c) {
  std::vector<LayerHead> heads;
  heads.reserve(layers);
  for (std::size_t m = 0; m < layers; ++m) {
    heads.push_back(LayerHead{RealMatrix::zeros(n, c), RealVector::zeros(c)});
  }
  return heads;
}

// Mean cross-entropy and its gradient for weights w (N x C row-major), bias b.
double loss_and_grad(std::span<const RealVector> x, std::span<const std::size_t> y,
                     std::size_t n, std::size_t c, const std::vector<double>& w,
                     const std::vector<double>& b, double l2, std::vector<double>* gw,
                     std::vector<double>* gb, std::size_t* correct) {
  const double inv_s = 1.0 / static_cast<double>(x.size());
  if (gw) std::fill(gw->begin(), gw->end(), 0.0);
  if (gb) std::fill(gb->begin(), gb->end(), 0.0);
  std::vector<double> z(c);
  // Neumaier-compensated sum of deviations from the first sample's loss, so a
  // constant per-sample loss (e.g. ln C at zero init) comes back exactly.
  double ref = 0.0;
  double loss = 0.0;
  double carry = 0.0;
  std::size_t hits = 0;
  for (std::size_t s = 0; s < x.size(); ++s) {
    const auto xs = x[s].values();
    for (std::size_t k = 0; k < c; ++k) z[k] = b[k];
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = xs[i];
      if (xi == 0.0) continue;
      for (std::size_t k = 0; k < c; ++k) z[k] += xi * w[i * c + k];
    }
    const double lse = log_sum_exp(z);
    if (s == 0) ref = lse - z[y[s]];
    const double term = (lse - z[y[s]]) - ref;
    const double t = loss + term;
    carry += std::abs(loss) >= std::abs(term) ? (loss - t) + term : (term - t) + loss;
    loss = t;
    if (argmax(z) == y[s]) ++hits;
    if (!gw) continue;
    for (std::size_t k = 0; k < c; ++k) {
      const double r = (std::exp(z[k] - lse) - (k == y[s] ? 1.0 : 0.0)) * inv_s;
      (*gb)[k] += r;
      for (std::size_t i = 0; i < n; ++i) (*gw)[i * c + k] += xs[i] * r;
    }
  }
  loss = ref + (loss + carry) * inv_s;
  double sq = 0.0;
  for (double v : w) sq += v * v;
  loss += 0.5 * l2 * sq;
  if (gw) {
    for (std::size_t j = 0; j < w.size(); ++j) (*gw)[j] += l2 * w[j];
  }
  if (correct) *correct = hits;
  return loss;
}

}  // namespace

PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
    ctr = {hi32(p1) ^ ctr[1] ^ key[0], lo32(p1), hi32(p0) ^ ctr[3] ^ key[1], lo32(p0)};
  }
  return ctr;
}

double CounterRng::uniform(const PhiloxCounter& counter) const {
  const auto r = philox4x32_10(counter, key_);
  return to_unit(r[0], r[1]);
}

std::array<double, 2> CounterRng::normal_pair(const PhiloxCounter& counter) const {
  const auto r = philox4x32_10(counter, key_);
  const double u1 = 1.0 - to_unit(r[0], r[1]);  // (0, 1]
  const double u2 = to_unit(r[2], r[3]);
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

void validate(const SynthConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kInvalidConfig, msg); };
  if (c.num_classes < 2) fail("num_classes must be at least 2");
  if (c.num_layers < 1) fail("num_layers must be at least 1");
  if (c.num_samples < 1) fail("num_samples must be at least 1");
  if (c.feature_dim < c.num_classes + c.class_irrelevant_dims) {
    fail("feature_dim must be at least num_classes + class_irrelevant_dims");
  }
  if (!(c.base_separation > 0.0) || !std::isfinite(c.base_separation)) {
    fail("base_separation must be positive");
  }
  if (!(c.depth_gain >= 0.0) || !std::isfinite(c.depth_gain)) {
    fail("depth_gain must be non-negative");
  }
  if (!(c.noise_sigma > 0.0) || !std::isfinite(c.noise_sigma)) {
    fail("noise_sigma must be positive");
  }
  if (!(c.difficulty_spread >= 0.0) || !std::isfinite(c.difficulty_spread)) {
    fail("difficulty_spread must be non-negative");
  }
  if (c.num_samples > UINT32_MAX || c.num_layers > UINT32_MAX || c.feature_dim > UINT32_MAX) {
    fail("dimensions exceed the 32-bit counter space");
  }
}

void validate(const TrainConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kInvalidConfig, msg); };
  if (c.epochs == 0) fail("epochs must be positive");
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) {
    fail("learning_rate must be positive");
  }
  if (!(c.l2_penalty >= 0.0) || !std::isfinite(c.l2_penalty)) {
    fail("l2_penalty must be non-negative");
  }
  if (!(c.init_scale >= 0.0) || !std::isfinite(c.init_scale)) {
    fail("init_scale must be non-negative");
  }
}

TraceDataset generate(const SynthConfig& config) {
  validate(config);
  const std::size_t n = config.feature_dim;
  const std::size_t c = config.num_classes;
  const std::size_t k = config.class_irrelevant_dims;
  const CounterRng rng(config.seed);

  TraceDataset ds;
  ds.samples.reserve(config.num_samples);
  std::vector<double> x(n);
  for (std::size_t s = 0; s < config.num_samples; ++s) {
    const auto s32 = static_cast<std::uint32_t>(s);
    const double u = rng.uniform({s32, 0, 0, kLabelStream});
    const auto label = std::min(c - 1, static_cast<std::size_t>(u * static_cast<double>(c)));
    const double z = rng.normal_pair({s32, 0, 0, kDifficultyStream})[0];
    const double scale = std::exp(config.difficulty_spread * z);

    SampleFeatures sf;
    sf.gold_label = label;
    sf.per_layer.reserve(config.num_layers);
    for (std::size_t m = 1; m <= config.num_layers; ++m) {
      const double sep = config.base_separation + config.depth_gain * static_cast<double>(m);
      for (std::size_t d = 0; d < n; d += 2) {
        const auto eps = rng.normal_pair(
            {s32, static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(d / 2), kNoiseStream});
        for (std::size_t j = 0; j < 2 && d + j < n; ++j) {
          const std::size_t dim = d + j;
          const double a = dim < c + k ? scale : 1.0;
          x[dim] = config.noise_sigma * a * eps[j];
          if (dim == label) x[dim] += sep;
        }
      }
      sf.per_layer.emplace_back(x);
    }
    ds.samples.push_back(std::move(sf));
  }

  ds.heads = zero_heads(config.num_layers, n, c);
  auto& man = ds.manifest;
  man.feature_dim = n;
  man.num_classes = c;
  man.num_layers = config.num_layers;
  man.num_samples = config.num_samples;
  for (std::size_t i = 0; i < c; ++i) man.label_names.push_back("class_" + std::to_string(i));
  man.provenance["generator"] = "synthetic";
  man.provenance["rng"] = std::string(kRngAlgorithm);
  man.provenance["seed"] = std::to_string(config.seed);
  man.provenance["base_separation"] = format_real(config.base_separation);
  man.provenance["depth_gain"] = format_real(config.depth_gain);
  man.provenance["noise_sigma"] = format_real(config.noise_sigma);
  man.provenance["class_irrelevant_dims"] = std::to_string(k);
  man.provenance["difficulty_spread"] = format_real(config.difficulty_spread);
  return ds;
}

HeadFit train_head(std::span<const RealVector> features, std::span<const std::size_t> labels,
                   std::size_t num_classes, const TrainConfig& config, std::size_t layer) {
  validate(config);
  if (features.empty()) throw Error(ErrorKind::kInvalidArgument, "no training samples");
  if (features.size() != labels.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "features and labels differ in length");
  }
  if (num_classes < 1) throw Error(ErrorKind::kInvalidArgument, "num_classes must be positive");
  const std::size_t n = features.front().dim();
  for (std::size_t s = 0; s < features.size(); ++s) {
    if (features[s].dim() != n) {
      throw Error(ErrorKind::kDimensionMismatch, "feature dimensions differ across samples");
    }
    if (labels[s] >= num_classes) {
      throw Error(ErrorKind::kDimensionMismatch, "label outside [0, num_classes)");
    }
  }
  const std::size_t c = num_classes;

  std::vector<double> w(n * c, 0.0);
  std::vector<double> b(c, 0.0);
  if (config.init == HeadInit::kGaussian) {
    const CounterRng rng(config.seed);
    for (std::size_t j = 0; j < w.size(); j += 2) {
      const auto g = rng.normal_pair({static_cast<std::uint32_t>(layer),
                                      static_cast<std::uint32_t>(j / 2), 0, kInitStream});
      w[j] = config.init_scale * g[0];
      if (j + 1 < w.size()) w[j + 1] = config.init_scale * g[1];
    }
  }

  HeadFit fit;
  fit.loss_history.reserve(config.epochs + 1);
  std::vector<double> gw(w.size());
  std::vector<double> gb(c);
  auto check = [&](double loss, std::size_t epoch) {
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::kDivergence,
                  "training loss became non-finite at epoch " + std::to_string(epoch));
    }
  };
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const double loss = loss_and_grad(features, labels, n, c, w, b, config.l2_penalty, &gw, &gb,
                                      nullptr);
    check(loss, e);
    fit.loss_history.push_back(loss);
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= config.learning_rate * gw[j];
    for (std::size_t k = 0; k < c; ++k) b[k] -= config.learning_rate * gb[k];
  }
  std::size_t hits = 0;
  const double final_loss =
      loss_and_grad(features, labels, n, c, w, b, config.l2_penalty, nullptr, nullptr, &hits);
  check(final_loss, config.epochs);
  for (double v : w) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kDivergence, "weights became non-finite");
  }
  fit.loss_history.push_back(final_loss);
  fit.train_accuracy = static_cast<double>(hits) / static_cast<double>(features.size());
  fit.head = LayerHead{RealMatrix(n, c, std::move(w)), RealVector(std::move(b))};
  return fit;
}

TraceDataset train_heads(const TraceDataset& dataset, const TrainConfig& config,
                         std::vector<HeadFit>* fits, std::size_t threads) {
  validate(config);
  const std::size_t layers = dataset.manifest.num_layers;
  if (dataset.samples.empty()) throw Error(ErrorKind::kInvalidArgument, "no training samples");
  std::vector<std::size_t> labels;
  labels.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) labels.push_back(s.gold_label);

  std::vector<std::optional<HeadFit>> results(layers);
  std::vector<std::exception_ptr> errors(layers);
  auto work = [&](std::size_t m) {
    try {
      std::vector<RealVector> x;
      x.reserve(dataset.samples.size());
      for (const auto& s : dataset.samples) {
        if (s.per_layer.size() != layers) {
          throw Error(ErrorKind::kDimensionMismatch, "sample layer count differs from num_layers");
        }
        x.push_back(s.per_layer[m]);
      }
      results[m] = train_head(x, labels, dataset.manifest.num_classes, config, m);
    } catch (...) {
      errors[m] = std::current_exception();
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, layers);
  if (workers == 1) {
    for (std::size_t m = 0; m < layers; ++m) work(m);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t m = t; m < layers; m += workers) work(m);
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  TraceDataset out = dataset;
  out.heads.clear();
  if (fits) fits->clear();
  for (auto& r : results) {
    out.heads.push_back(r->head);
    if (fits) fits->push_back(std::move(*r));
  }
  out.manifest.provenance["heads"] = "softmax_regression";
  out.manifest.provenance["train_learning_rate"] = format_real(config.learning_rate);
  out.manifest.provenance["train_epochs"] = std::to_string(config.epochs);
  out.manifest.provenance["train_l2_penalty"] = format_real(config.l2_penalty);
  out.manifest.provenance["train_init"] = config.init == HeadInit::kZero ? "zero" : "gaussian";
  out.manifest.provenance["train_init_scale"] = format_real(config.init_scale);
  out.manifest.provenance["train_seed"] = std::to_string(config.seed);
  return out;
}

}  // namespace nspexit

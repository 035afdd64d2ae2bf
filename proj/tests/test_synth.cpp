#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nspexit/error.hpp"
#include "nspexit/signals.hpp"
#include "nspexit/synth.hpp"

using namespace nspexit;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no Error thrown";
  return ErrorKind::kInvalidArgument;
}

std::vector<RealVector> layer_features(const TraceDataset& ds, std::size_t layer) {
  std::vector<RealVector> x;
  for (const auto& s : ds.samples) x.push_back(s.per_layer[layer]);
  return x;
}

std::vector<std::size_t> labels_of(const TraceDataset& ds) {
  std::vector<std::size_t> y;
  for (const auto& s : ds.samples) y.push_back(s.gold_label);
  return y;
}

}  // namespace

TEST(Philox, KnownAnswers) {
  EXPECT_EQ(philox4x32_10({0, 0, 0, 0}, {0, 0}),
            (PhiloxCounter{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
  EXPECT_EQ(philox4x32_10({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff},
                          {0xffffffff, 0xffffffff}),
            (PhiloxCounter{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
  EXPECT_EQ(philox4x32_10({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344},
                          {0xa4093822, 0x299f31d0}),
            (PhiloxCounter{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(CounterRng, UniformAndNormalMoments) {
  const CounterRng rng(99);
  double su = 0, sz = 0, szz = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform({static_cast<std::uint32_t>(i), 0, 0, 0});
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    su += u;
    const auto z = rng.normal_pair({static_cast<std::uint32_t>(i), 1, 0, 0});
    sz += z[0] + z[1];
    szz += z[0] * z[0] + z[1] * z[1];
  }
  EXPECT_NEAR(su / n, 0.5, 0.01);
  EXPECT_NEAR(sz / (2 * n), 0.0, 0.02);
  EXPECT_NEAR(szz / (2 * n), 1.0, 0.03);
}

TEST(Generate, DeterministicInSeed) {
  SynthConfig c;
  c.num_samples = 200;
  const auto a = generate(c);
  const auto b = generate(c);
  EXPECT_EQ(a, b);
  c.seed = 1;
  EXPECT_FALSE(generate(c) == a);
}

TEST(Generate, ShapeAndProvenance) {
  SynthConfig c;
  c.num_samples = 50;
  c.num_classes = 3;
  const auto ds = generate(c);
  EXPECT_NO_THROW(validate(ds));
  EXPECT_EQ(ds.manifest.label_names, (std::vector<std::string>{"class_0", "class_1", "class_2"}));
  EXPECT_EQ(ds.manifest.provenance.at("rng"), "philox4x32-10");
  EXPECT_EQ(ds.heads.size(), 6u);
  std::size_t counts[3] = {};
  for (const auto& s : ds.samples) ++counts[s.gold_label];
  for (auto k : counts) EXPECT_GT(k, 5u);
}

TEST(Generate, InvalidConfigs) {
  auto bad = [](auto mutate) {
    SynthConfig c;
    mutate(c);
    return kind_of([&] { generate(c); });
  };
  EXPECT_EQ(bad([](SynthConfig& c) { c.feature_dim = 9; }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(bad([](SynthConfig& c) { c.noise_sigma = 0; }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(bad([](SynthConfig& c) { c.base_separation = -1; }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(bad([](SynthConfig& c) { c.num_samples = 0; }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(bad([](SynthConfig& c) { c.num_layers = 0; }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(bad([](SynthConfig& c) { c.difficulty_spread = -0.1; }), ErrorKind::kInvalidConfig);
}

TEST(Generate, ZeroDepthGainMakesLayersAlike) {
  SynthConfig c;
  c.depth_gain = 0;
  c.difficulty_spread = 0;
  c.num_samples = 4000;
  const auto ds = generate(c);
  for (std::size_t m = 0; m < c.num_layers; ++m) {
    double on = 0, off = 0;
    for (const auto& s : ds.samples) {
      on += s.per_layer[m][s.gold_label];
      off += s.per_layer[m][1 - s.gold_label];
    }
    EXPECT_NEAR(on / 4000, 0.5, 0.05) << m;
    EXPECT_NEAR(off / 4000, 0.0, 0.05) << m;
  }
}

TEST(Generate, ClassMeanGrowsWithDepth) {
  SynthConfig c;
  c.num_samples = 4000;
  const auto ds = generate(c);
  for (std::size_t m = 0; m < c.num_layers; ++m) {
    double on = 0;
    for (const auto& s : ds.samples) on += s.per_layer[m][s.gold_label];
    EXPECT_NEAR(on / 4000, 0.5 + 0.5 * static_cast<double>(m + 1), 0.06) << m;
  }
}

TEST(TrainHead, InitialLossIsLnC) {
  for (std::size_t classes : {2u, 3u, 5u}) {
    for (std::size_t samples : {1u, 7u, 300u, 2000u}) {
      SynthConfig c;
      c.num_samples = samples;
      c.num_classes = classes;
      const auto ds = generate(c);
      TrainConfig t;
      t.init = HeadInit::kZero;
      t.epochs = 1;
      const auto fit = train_head(layer_features(ds, 0), labels_of(ds), classes, t);
      ASSERT_EQ(fit.loss_history.size(), 2u);
      EXPECT_EQ(fit.loss_history[0], std::log(static_cast<double>(classes)))
          << classes << " classes, " << samples << " samples";
    }
  }
}

TEST(TrainHead, OneStepFromZero) {
  const std::vector<RealVector> x{RealVector{1, 2}, RealVector{-1, 0.5}, RealVector{0, -3}};
  const std::vector<std::size_t> y{0, 1, 1};
  TrainConfig t;
  t.init = HeadInit::kZero;
  t.epochs = 1;
  t.learning_rate = 0.3;
  t.l2_penalty = 0.5;
  const auto fit = train_head(x, y, 2, t);
  // zero logits: p = 1/2, gradient = X^T (p - onehot) / S, penalty term vanishes at W = 0
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      double g = 0;
      for (std::size_t s = 0; s < 3; ++s) g += x[s][i] * (0.5 - (y[s] == k ? 1.0 : 0.0));
      EXPECT_NEAR(fit.head.weight(i, k), -0.3 * g / 3, 1e-15);
    }
  }
  for (std::size_t k = 0; k < 2; ++k) {
    double g = 0;
    for (std::size_t s = 0; s < 3; ++s) g += 0.5 - (y[s] == k ? 1.0 : 0.0);
    EXPECT_NEAR(fit.head.bias[k], -0.3 * g / 3, 1e-15);
  }
}

TEST(TrainHead, DuplicatedDataGivesSameWeights) {
  SynthConfig c;
  c.num_samples = 100;
  const auto ds = generate(c);
  auto x = layer_features(ds, 2);
  auto y = labels_of(ds);
  for (auto init : {HeadInit::kZero, HeadInit::kGaussian}) {
    TrainConfig t;
    t.init = init;
    t.epochs = 50;
    const auto once = train_head(x, y, 2, t);
    auto x2 = x;
    auto y2 = y;
    x2.insert(x2.end(), x.begin(), x.end());
    y2.insert(y2.end(), y.begin(), y.end());
    const auto twice = train_head(x2, y2, 2, t);
    for (std::size_t i = 0; i < once.head.weight.values().size(); ++i) {
      EXPECT_NEAR(once.head.weight.values()[i], twice.head.weight.values()[i], 1e-12);
    }
  }
}

TEST(TrainHead, SeparableDataIsFit) {
  // two clusters on either side of the plane x0 + x1 = 0
  std::vector<RealVector> x;
  std::vector<std::size_t> y;
  const CounterRng rng(4);
  for (std::uint32_t s = 0; s < 40; ++s) {
    const auto a = rng.normal_pair({s, 0, 0, 0});
    const auto b = rng.normal_pair({s, 1, 0, 0});
    const double sign = s % 2 ? 1.0 : -1.0;
    x.push_back(RealVector{sign * 2 + 0.3 * a[0], sign * 2 + 0.3 * a[1], b[0], b[1]});
    y.push_back(s % 2);
  }
  const auto fit = train_head(x, y, 2, TrainConfig{});
  EXPECT_EQ(fit.train_accuracy, 1.0);
  for (std::size_t s = 0; s < x.size(); ++s) {
    double l[2];
    for (std::size_t k = 0; k < 2; ++k) {
      l[k] = fit.head.bias[k];
      for (std::size_t i = 0; i < 4; ++i) l[k] += fit.head.weight(i, k) * x[s][i];
    }
    EXPECT_EQ(l[1] > l[0], y[s] == 1) << s;
  }
}

TEST(TrainHead, Errors) {
  const std::vector<RealVector> x{RealVector{1, 2}};
  const std::vector<std::size_t> y{0};
  TrainConfig t;
  t.epochs = 0;
  EXPECT_EQ(kind_of([&] { train_head(x, y, 2, t); }), ErrorKind::kInvalidConfig);
  t = TrainConfig{};
  t.learning_rate = 0;
  EXPECT_EQ(kind_of([&] { train_head(x, y, 2, t); }), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of([&] { train_head(x, std::vector<std::size_t>{2}, 2, TrainConfig{}); }),
            ErrorKind::kDimensionMismatch);

  SynthConfig c;
  c.num_samples = 50;
  const auto ds = generate(c);
  t = TrainConfig{};
  t.learning_rate = 1e300;
  t.epochs = 10;
  EXPECT_EQ(kind_of([&] { train_head(layer_features(ds, 5), labels_of(ds), 2, t); }),
            ErrorKind::kDivergence);
}

TEST(TrainHeads, DefaultsAreDeterministicAndFullRank) {
  SynthConfig c;
  c.num_samples = 500;
  const auto ds = generate(c);
  std::vector<HeadFit> fits;
  const auto a = train_heads(ds, TrainConfig{}, &fits);
  const auto b = train_heads(ds, TrainConfig{}, nullptr, 4);
  EXPECT_EQ(a, b);
  EXPECT_NO_THROW(build_model(a));
  for (const auto& f : fits) {
    ASSERT_EQ(f.loss_history.size(), 301u);
    for (std::size_t e = 1; e < f.loss_history.size(); ++e) {
      EXPECT_LE(f.loss_history[e], f.loss_history[e - 1]);
    }
  }
}

TEST(TrainHeads, ZeroInitIsRankDeficient) {
  SynthConfig c;
  c.num_samples = 200;
  TrainConfig t;
  t.init = HeadInit::kZero;
  const auto ds = train_heads(generate(c), t);
  EXPECT_EQ(kind_of([&] { build_model(ds); }), ErrorKind::kRankDeficient);
}

TEST(TrainHeads, DeepestLayerSeparableWithoutNoise) {
  SynthConfig c;
  c.num_samples = 200;
  c.noise_sigma = 1e-6;
  std::vector<HeadFit> fits;
  train_heads(generate(c), TrainConfig{}, &fits);
  EXPECT_EQ(fits.back().train_accuracy, 1.0);
}

TEST(TrainHeads, AccuracyGrowsWithDepth) {
  std::vector<double> mean(6, 0.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthConfig c;
    c.seed = seed;
    TrainConfig t;
    t.seed = seed;
    std::vector<HeadFit> fits;
    train_heads(generate(c), t, &fits, 2);
    for (std::size_t m = 0; m < 6; ++m) mean[m] += fits[m].train_accuracy / 5;
  }
  for (std::size_t m = 1; m < 6; ++m) EXPECT_GE(mean[m], mean[m - 1]);
  EXPECT_GT(mean.front(), 0.70);
  EXPECT_GT(mean.back(), 0.95);
}

// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are pinned
// below. Exit status is nonzero if any criterion fails, except criteria listed
// as known-unattainable (they still print FAIL, with the reason).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nspexit/cli.hpp"
#include "nspexit/evaluation.hpp"
#include "nspexit/synth.hpp"
#include "oracles.hpp"

using namespace nspexit;
namespace fs = std::filesystem;

namespace {

constexpr int kNspInstances = 1000;
constexpr double kNspTol = 1e-8;
constexpr double kNspSeconds = 10.0;
constexpr double kIdempotenceTol = 1e-9;
constexpr double kOrthogonalityTol = 1e-8;
constexpr double kPythagorasRelTol = 1e-8;
constexpr double kBasisTol = 1e-10;
constexpr int kCapTriples = 100;
constexpr double kCapTol = 1e-12;
constexpr int kMonotoneCases = 10000;
constexpr double kTargetSpeedup = 2.0;
constexpr double kCalibrationTol = 0.05;
constexpr double kCalibrationSeconds = 60.0;
constexpr int kDirectionalSeeds = 5;
constexpr double kDirectionalAlpha = 1.0;
// Speed-ups must actually match for a premature-rate comparison.
constexpr double kMatchTol = 0.01;
constexpr double kAccuracySlack = 0.005;

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;
int known_failures = 0;

void report(const std::string& name, const Outcome& o, const char* known_reason = nullptr) {
  std::printf("%s  %-44s %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
  if (!o.pass && known_reason) {
    std::printf("      known unattainable: %s\n", known_reason);
    ++known_failures;
  } else if (!o.pass) {
    ++failures;
  }
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<oracle::Instance> nsp_instances() {
  std::mt19937_64 rng(20240611);
  std::uniform_int_distribution<std::size_t> n(8, 64), c(2, 4);
  std::vector<oracle::Instance> out;
  for (int i = 0; i < kNspInstances; ++i) {
    const std::size_t nn = n(rng);
    const std::size_t cc = c(rng);
    out.push_back(oracle::random_instance(rng, nn, cc));
  }
  return out;
}

Outcome nsp_oracle(const std::vector<oracle::Instance>& inst) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_gs = 0, worst_svd = 0;
  for (const auto& in : inst) {
    const auto ctx = build_projection_context(in.w, in.b);
    const double nsp = nsp_score(ctx, in.x);
    const auto w = oracle::to_eigen(in.w);
    const auto b = oracle::to_eigen(in.b);
    const auto x = oracle::to_eigen(in.x);
    worst_gs = std::max(worst_gs, std::abs(nsp - oracle::gram_schmidt_nsp(w, b, x)));
    worst_svd = std::max(worst_svd, std::abs(nsp - oracle::svd_nsp(w, b, x)));
  }
  const double secs = seconds_since(t0);
  return {worst_gs <= kNspTol && worst_svd <= kNspTol && secs < kNspSeconds,
          "max |diff| gram-schmidt " + fmt("%.2e", worst_gs) + ", svd " + fmt("%.2e", worst_svd) +
              ", " + fmt("%.2f", secs) + " s"};
}

Outcome projection_invariants(const std::vector<oracle::Instance>& inst) {
  double idem = 0, orth = 0, pyth = 0, basis = 0;
  for (const auto& in : inst) {
    const auto ctx = build_projection_context(in.w, in.b);
    const std::size_t n = in.w.rows();
    const std::size_t c = in.w.cols();
    const auto xw = project_column_space(ctx, in.x);
    const auto xww = project_column_space(ctx, xw);
    for (std::size_t i = 0; i < n; ++i) idem = std::max(idem, std::abs(xww[i] - xw[i]));

    double wt_inf = 0, x_inf = 0, worst = 0;
    for (std::size_t i = 0; i < n; ++i) x_inf = std::max(x_inf, std::abs(in.x[i]));
    for (std::size_t k = 0; k < c; ++k) {
      double row = 0, s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        row += std::abs(in.w(i, k));
        s += in.w(i, k) * (in.x[i] - xw[i]);
      }
      wt_inf = std::max(wt_inf, row);
      worst = std::max(worst, std::abs(s));
    }
    orth = std::max(orth, worst / (1 + wt_inf * x_inf));

    double xx = 0, pp = 0, rr = 0;
    for (std::size_t i = 0; i < n; ++i) {
      xx += in.x[i] * in.x[i];
      pp += xw[i] * xw[i];
      rr += (in.x[i] - xw[i]) * (in.x[i] - xw[i]);
    }
    pyth = std::max(pyth, std::abs(xx - pp - rr) / xx);

    const auto q = oracle::to_eigen(ctx.basis());
    basis = std::max(basis,
                     (q.transpose() * q - oracle::Mat::Identity(c, c)).cwiseAbs().maxCoeff());
  }
  return {idem <= kIdempotenceTol && orth <= kOrthogonalityTol && pyth <= kPythagorasRelTol &&
              basis <= kBasisTol,
          "idempotence " + fmt("%.1e", idem) + ", orthogonality " + fmt("%.1e", orth) +
              ", pythagoras " + fmt("%.1e", pyth) + ", Q^TQ-I " + fmt("%.1e", basis)};
}

Outcome cap_closed_form() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> logit(-8, 8), nsp(0, 1);
  std::uniform_int_distribution<std::size_t> classes(2, 4);
  const double alphas[] = {0.01, 0.1, 1.0, 10.0};
  double worst = 0;
  for (int i = 0; i < kCapTriples; ++i) {
    std::vector<double> l(classes(rng));
    for (double& v : l) v = logit(rng);
    const double n = nsp(rng);
    const double a = alphas[i % 4];
    worst = std::max(worst, std::abs(cap_from_logits(RealVector(l), n, a) -
                                     oracle::cap_high_precision(l, n, a)));
  }
  return {worst <= kCapTol, "max |diff| vs 50-digit oracle " + fmt("%.2e", worst) +
                                " over alpha grid {0.01, 0.1, 1, 10}"};
}

Outcome cap_monotonicity() {
  std::mt19937_64 rng(78);
  std::uniform_real_distribution<double> logit(-4, 4), nsp(0, 0.95), step(1e-3, 1.0);
  const double alphas[] = {0.1, 1.0, 10.0};
  int violations = 0;
  for (int i = 0; i < kMonotoneCases; ++i) {
    std::vector<double> l(2 + i % 3);
    for (double& v : l) v = logit(rng);
    const double n = nsp(rng);
    const double a = alphas[i % 3];
    const double base = cap_from_logits(RealVector(l), n, a);
    if (!(base > 0 && base < 1)) ++violations;
    if (!(cap_from_logits(RealVector(l), n + 0.05 * step(rng), a) > base)) ++violations;
    auto up = l;
    up[i % up.size()] += step(rng);
    if (!(cap_from_logits(RealVector(up), n, a) < base)) ++violations;
  }
  return {violations == 0, std::to_string(kMonotoneCases) + " cases, " +
                               std::to_string(violations) + " violations"};
}

Outcome speedup_hand_cases() {
  auto at = [](std::vector<std::pair<std::size_t, std::size_t>> mass) {
    ExitHistogram h{std::vector<std::size_t>(12, 0)};
    for (auto [layer, count] : mass) h.counts[layer - 1] = count;
    return speed_up_ratio(h);
  };
  const double a = at({{12, 100}});
  const double b = at({{6, 100}});
  const double c = at({{4, 50}, {12, 50}});
  return {a == 1.0 && b == 2.0 && c == 1.5,
          "all@12 " + fmt("%.17g", a) + ", all@6 " + fmt("%.17g", b) + ", half@4/half@12 " +
              fmt("%.17g", c)};
}

ExitTrace hand_trace(std::vector<std::size_t> argmaxes, std::size_t gold) {
  ExitTrace t;
  t.exit_layer = argmaxes.size();
  t.predicted_class = argmaxes.back();
  t.gold_label = gold;
  t.num_layers = 3;
  t.per_layer_argmax = argmaxes;
  t.per_layer_scores.resize(argmaxes.size());
  return t;
}

struct Bench {
  TraceDataset dataset;
  MultiExitModel model;
};

Bench make_bench(std::uint64_t seed) {
  SynthConfig sc;
  sc.seed = seed;
  TrainConfig tc;
  tc.seed = seed;
  auto ds = train_heads(generate(sc), tc);
  auto model = build_model(ds);
  return Bench{std::move(ds), std::move(model)};
}

Outcome error_rates(const Bench& bench) {
  // M = 3. Trace one: wrong/continue, wrong/exit. Trace two: right/continue, right/exit.
  const std::vector<ExitTrace> traces{hand_trace({1, 1}, 0), hand_trace({0, 0}, 0)};
  const double p = premature_exiting_rate(traces);
  const double d = delayed_exiting_rate(traces);
  const auto r = evaluate(bench.model, bench.dataset.samples, ExitPolicy{signal::Oracle{}, 0, 1});
  return {p == 0.5 && d == 0.5 && r.premature_rate == 0.0 && r.delayed_rate == 0.0,
          "hand traces premature " + fmt("%g", p) + " delayed " + fmt("%g", d) +
              "; oracle premature " + fmt("%g", r.premature_rate) + " delayed " +
              fmt("%g", r.delayed_rate)};
}

void calibration(const Bench& bench) {
  const std::vector<SignalKind> signals = {signal::Cap{1.0},  signal::Entropy{},
                                           signal::MaxProb{}, signal::Energy{},
                                           signal::Patience{}, signal::PatienceConfidence{}};
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& s : signals) {
    const auto r = calibrate_threshold(bench.model, bench.dataset.samples, s, kTargetSpeedup,
                                       kCalibrationTol);
    const double su = r.report.speedup;
    const bool pass = std::abs(su - kTargetSpeedup) <= kCalibrationTol &&
                      su == speed_up_ratio(r.report.histogram);
    const bool patience = std::holds_alternative<signal::Patience>(s);
    report("calibration " + signal_label(s),
           {pass, "speed-up " + fmt("%.4f", su) + " (knob " + fmt("%g", r.knob) + ")"},
           patience ? "the integer patience target only reaches ~1.61x (3) or ~2.44x (2) here"
                    : nullptr);
  }
  const double secs = seconds_since(t0);
  report("calibration runtime", {secs < kCalibrationSeconds, fmt("%.2f s", secs)});
}

Outcome directional() {
  double prem[3] = {}, acc[3] = {};
  const SignalKind signals[3] = {signal::Cap{kDirectionalAlpha}, signal::MaxProb{},
                                 signal::Entropy{}};
  double worst_match = 0;
  for (int seed = 0; seed < kDirectionalSeeds; ++seed) {
    const Bench b = make_bench(static_cast<std::uint64_t>(seed));
    for (int i = 0; i < 3; ++i) {
      const auto r =
          calibrate_threshold(b.model, b.dataset.samples, signals[i], kTargetSpeedup, kMatchTol);
      worst_match = std::max(worst_match, std::abs(r.report.speedup - kTargetSpeedup));
      prem[i] += r.report.premature_rate / kDirectionalSeeds;
      acc[i] += r.report.accuracy / kDirectionalSeeds;
    }
  }
  const bool pass = prem[0] <= prem[1] && prem[0] <= prem[2] &&
                    acc[0] >= acc[1] - kAccuracySlack && acc[0] >= acc[2] - kAccuracySlack &&
                    worst_match <= kMatchTol;
  return {pass, "premature cap " + fmt("%.4f", prem[0]) + " maxprob " + fmt("%.4f", prem[1]) +
                    " entropy " + fmt("%.4f", prem[2]) + "; accuracy cap " +
                    fmt("%.4f", acc[0]) + " maxprob " + fmt("%.4f", acc[1]) + " entropy " +
                    fmt("%.4f", acc[2])};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Every file under dir plus the command's stdout.
std::string run_and_capture(std::vector<std::string> args, const fs::path& dir, int* code) {
  args.insert(args.end(), {"--out", dir.string()});
  std::ostringstream out, err;
  *code = run_cli(args, out, err);
  std::string all = out.str();
  // synth echoes the output path, which is the only intended difference
  for (std::size_t pos; (pos = all.find(dir.string())) != std::string::npos;) {
    all.replace(pos, dir.string().size(), "<out>");
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + slurp(f);
  return all;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "nspexit_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  int code = 0;
  std::vector<std::string> mismatched;
  int commands = 0;
  auto check = [&](const std::string& name, const std::vector<std::string>& args) {
    ++commands;
    int c1 = 0, c2 = 0;
    const auto a = run_and_capture(args, root / (name + "_1"), &c1);
    const auto b = run_and_capture(args, root / (name + "_2"), &c2);
    if (c1 != 0 || c2 != 0 || a != b) mismatched.push_back(name);
  };
  check("synth", {"synth", "--seed", "7"});
  const std::string trace = (root / "synth_1" / "bench").string();
  check("eval", {"eval", "--trace", trace, "--signal", "cap", "--tau", "0.4"});
  check("eval_target", {"eval", "--trace", trace, "--target-speedup", "2", "--threads", "4"});
  check("calibrate", {"calibrate", "--trace", trace, "--signal", "energy", "--target-speedup", "2"});
  check("sweep", {"sweep", "--trace", trace, "--grid", "lin:0:1:11", "--alphas",
                  "0.01,0.1,1.0,10.0"});
  check("compare", {"compare", "--trace", trace, "--target-speedup", "2"});
  std::ostringstream i1, i2, e;
  ++commands;
  code = run_cli({"inspect", "--trace", trace}, i1, e) | run_cli({"inspect", "--trace", trace}, i2, e);
  if (code != 0 || i1.str() != i2.str()) mismatched.push_back("inspect");
  fs::remove_all(root);
  std::string detail = std::to_string(commands) + " commands run twice";
  if (!mismatched.empty()) {
    detail += "; differing:";
    for (const auto& m : mismatched) detail += " " + m;
  }
  return {mismatched.empty(), detail};
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto instances = nsp_instances();
  report("NSP oracle equivalence (1000 instances)", nsp_oracle(instances));
  report("projection invariants", projection_invariants(instances));
  report("CAP closed form (100 triples)", cap_closed_form());
  report("CAP monotonicity (10000 cases)", cap_monotonicity());
  report("speed-up hand cases", speedup_hand_cases());
  const Bench bench = make_bench(0);
  report("error-rate hand traces and oracle", error_rates(bench));
  calibration(bench);
  report("directional: CAP vs max-prob/entropy at 2x", directional());
  report("CLI byte determinism", determinism());
  std::printf("%d failed, %d known unattainable, %.1f s total\n", failures, known_failures,
              seconds_since(t0));
  return failures == 0 ? 0 : 1;
}

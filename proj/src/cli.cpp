#include "nspexit/cli.hpp"

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "nspexit/evaluation.hpp"
#include "nspexit/synth.hpp"
#include "nspexit/trace_io.hpp"

namespace nspexit {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

const std::vector<std::string> kSignalNames = {"cap",      "entropy", "maxprob", "energy",
                                               "patience", "pcee",    "oracle"};

struct SignalFlags {
  std::string name = "cap";
  double alpha = 1.0;
  double temperature = 1.0;
  std::size_t patience_target = 2;
  double entropy_threshold = 0.1;
};

struct CommonFlags {
  std::string trace;
  std::string out;
  SignalFlags signal;
  std::optional<double> tau;
  std::optional<double> target_speedup;
  double tol = 0.05;
  std::size_t min_exit_layer = 1;
  std::string metric = "accuracy";
  std::size_t threads = 1;
};

SignalKind make_signal(const std::string& name, const SignalFlags& f) {
  SignalKind kind;
  if (name == "cap") {
    kind = signal::Cap{f.alpha};
  } else if (name == "entropy") {
    kind = signal::Entropy{};
  } else if (name == "maxprob") {
    kind = signal::MaxProb{};
  } else if (name == "energy") {
    kind = signal::Energy{f.temperature};
  } else if (name == "patience") {
    kind = signal::Patience{f.patience_target};
  } else if (name == "pcee") {
    kind = signal::PatienceConfidence{f.entropy_threshold, f.patience_target};
  } else if (name == "oracle") {
    kind = signal::Oracle{};
  } else {
    throw Error(ErrorKind::kInvalidConfig, "unknown signal '" + name + "'");
  }
  try {
    validate_signal(kind);
  } catch (const Error& e) {
    throw Error(ErrorKind::kInvalidConfig, e.what());
  }
  return kind;
}

Metric parse_metric(const std::string& name) {
  if (name == "accuracy") return Metric::kAccuracy;
  if (name == "f1") return Metric::kF1Binary;
  if (name == "acc_f1") return Metric::kMeanAccuracyF1;
  throw Error(ErrorKind::kInvalidConfig, "unknown metric '" + name + "'");
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  if (!text.empty() && text.back() == sep) parts.emplace_back();
  return parts;
}

double parse_real(const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || !std::isfinite(v)) {
    throw Error(ErrorKind::kInvalidConfig, "not a finite number: '" + text + "'");
  }
  return v;
}

// Shortest round-trip text, shared by the JSON and CSV writers.
std::string num(double v) { return json(v).dump(); }

fs::path prepare_out_dir(const std::string& out) {
  const fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIoFailure, "cannot create " + out + ": " + ec.message());
  return dir;
}

json report_json(const EvalReport& r, Metric metric) {
  json j;
  j["accuracy"] = r.accuracy;
  j["f1_binary"] = r.f1_binary ? json(*r.f1_binary) : json(nullptr);
  j["performance"] = performance_of(r, metric);
  j["speedup"] = r.speedup;
  j["premature_rate"] = r.premature_rate;
  j["delayed_rate"] = r.delayed_rate;
  j["mean_exit_layer"] = r.mean_exit_layer;
  j["degenerate_events"] = r.degenerate_events;
  j["num_samples"] = r.histogram.total();
  j["histogram"] = r.histogram.counts;
  return j;
}

std::string histogram_csv(const ExitHistogram& h) {
  std::string csv = "layer,count\n";
  for (std::size_t m = 0; m < h.counts.size(); ++m) {
    csv += std::to_string(m + 1) + "," + std::to_string(h.counts[m]) + "\n";
  }
  return csv;
}

json policy_json(const ExitPolicy& p) {
  return json{{"signal", signal_label(p.signal)},
              {"threshold", p.threshold},
              {"min_exit_layer", p.min_exit_layer}};
}

void add_signal_flags(CLI::App* cmd, SignalFlags& f) {
  cmd->add_option("--signal", f.name, "Exit signal")
      ->check(CLI::IsMember(kSignalNames))
      ->capture_default_str();
  cmd->add_option("--alpha", f.alpha, "CAP scale on the null-space score")->capture_default_str();
  cmd->add_option("--temperature", f.temperature, "Energy temperature")->capture_default_str();
  cmd->add_option("--patience-target", f.patience_target, "Patience count needed to exit")
      ->capture_default_str();
  cmd->add_option("--entropy-threshold", f.entropy_threshold,
                  "Entropy threshold of the patience-confidence signal")
      ->capture_default_str();
}

void add_trace_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--trace", f.trace, "Trace stem or manifest path")->required();
  cmd->add_option("--min-exit-layer", f.min_exit_layer, "First layer allowed to exit")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--metric", f.metric, "accuracy, f1 or acc_f1")
      ->check(CLI::IsMember({"accuracy", "f1", "acc_f1"}))
      ->capture_default_str();
  cmd->add_option("--threads", f.threads, "Worker threads for evaluation")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

struct LoadedTrace {
  TraceDataset dataset;
  MultiExitModel model;
};

LoadedTrace load(const std::string& path) {
  TraceDataset ds = load_trace(path);
  MultiExitModel model = build_model(ds);
  return LoadedTrace{std::move(ds), std::move(model)};
}

int cmd_synth(const SynthConfig& sc, const TrainConfig& tc, const std::string& out,
              const std::string& name, const std::string& encoding, std::size_t threads,
              std::ostream& os) {
  TraceDataset ds = train_heads(generate(sc), tc, nullptr, threads);
  ds.manifest.payload_encoding =
      encoding == "json" ? PayloadEncoding::kJson : PayloadEncoding::kBinaryLittleEndianF32;
  const fs::path stem = prepare_out_dir(out) / name;
  save_trace(ds, stem);
  const TracePaths paths = resolve_trace_paths(stem);
  os << "wrote " << paths.manifest.string() << "\n";
  return kExitOk;
}

int cmd_eval(const CommonFlags& f, bool calibrate_only, std::ostream& os) {
  const LoadedTrace t = load(f.trace);
  const SignalKind kind = make_signal(f.signal.name, f.signal);
  const Metric metric = parse_metric(f.metric);

  json doc;
  doc["command"] = calibrate_only ? "calibrate" : "eval";
  doc["trace"] = f.trace;
  doc["metric"] = f.metric;
  EvalReport report;
  ExitPolicy policy;
  if (f.target_speedup) {
    const CalibrationResult cal =
        calibrate_threshold(t.model, t.dataset.samples, kind, *f.target_speedup, f.tol,
                            kDefaultCalibrationIters, f.min_exit_layer, f.threads);
    report = cal.report;
    policy = cal.policy;
    doc["calibration"] = json{{"target_speedup", *f.target_speedup},
                              {"tol", f.tol},
                              {"knob", cal.knob},
                              {"within_tolerance", cal.within_tolerance},
                              {"iterations", cal.iterations}};
  } else {
    policy = ExitPolicy{kind, *f.tau, f.min_exit_layer};
    report = evaluate(t.model, t.dataset.samples, policy, f.threads);
  }
  doc["policy"] = policy_json(policy);
  doc["report"] = report_json(report, metric);

  const fs::path dir = prepare_out_dir(f.out);
  write_file_atomically(dir / "report.json", doc.dump(2) + "\n");
  write_file_atomically(dir / "histogram.csv", histogram_csv(report.histogram));
  os << signal_label(policy.signal) << " threshold=" << num(policy.threshold)
     << " speedup=" << num(report.speedup) << " " << f.metric << "="
     << num(performance_of(report, metric)) << " premature=" << num(report.premature_rate)
     << " delayed=" << num(report.delayed_rate) << "\n";
  if (doc.contains("calibration") && !doc["calibration"]["within_tolerance"].get<bool>()) {
    os << "warning: closest speed-up is outside the requested tolerance\n";
  }
  return kExitOk;
}

int cmd_sweep(const CommonFlags& f, const std::string& grid_text, const std::string& alphas_text,
              std::ostream& os) {
  const std::vector<double> grid = parse_grid(grid_text);
  std::vector<double> alphas;
  if (!alphas_text.empty()) {
    if (f.signal.name != "cap") {
      throw Error(ErrorKind::kInvalidConfig, "--alphas only applies to --signal cap");
    }
    alphas = parse_grid(alphas_text);
  }
  const LoadedTrace t = load(f.trace);
  const Metric metric = parse_metric(f.metric);

  std::vector<SignalKind> kinds;
  if (alphas.empty()) {
    kinds.push_back(make_signal(f.signal.name, f.signal));
  } else {
    for (double a : alphas) {
      SignalFlags sf = f.signal;
      sf.alpha = a;
      kinds.push_back(make_signal("cap", sf));
    }
  }
  std::string csv =
      "signal,threshold,speedup,performance,accuracy,premature_rate,delayed_rate,"
      "mean_exit_layer\n";
  std::size_t rows = 0;
  for (const auto& kind : kinds) {
    for (const CurvePoint& p : sweep_curve(t.model, t.dataset.samples, kind, grid, metric,
                                           f.min_exit_layer, f.threads)) {
      csv += "\"" + signal_label(kind) + "\"," + num(p.threshold) + "," + num(p.speedup) + "," +
             num(p.performance) + "," + num(p.report.accuracy) + "," + num(p.premature_rate) +
             "," + num(p.delayed_rate) + "," + num(p.report.mean_exit_layer) + "\n";
      ++rows;
    }
  }
  write_file_atomically(prepare_out_dir(f.out) / "curve.csv", csv);
  os << "wrote " << rows << " curve points\n";
  return kExitOk;
}

// DIS at every layer; nullopt where all predictions agree in correctness.
std::vector<std::optional<double>> dis_per_layer(const LoadedTrace& t, const SignalKind& kind) {
  const std::size_t layers = t.model.num_layers();
  std::vector<std::vector<double>> certainty(layers);
  std::vector<std::vector<bool>> correct(layers);
  for (const auto& sample : t.dataset.samples) {
    const auto reports = score_all_layers(t.model, kind, sample);
    for (std::size_t m = 0; m < layers; ++m) {
      if (reports[m].degenerate) continue;
      certainty[m].push_back(oriented_certainty(reports[m]));
      correct[m].push_back(reports[m].argmax_class == sample.gold_label);
    }
  }
  std::vector<std::optional<double>> out(layers);
  for (std::size_t m = 0; m < layers; ++m) {
    try {
      out[m] = dis_ranking_consistency(certainty[m], correct[m]);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kDegenerateLabels) throw;
    }
  }
  return out;
}

int cmd_compare(const CommonFlags& f, const std::string& signals_text, std::ostream& os) {
  const LoadedTrace t = load(f.trace);
  const Metric metric = parse_metric(f.metric);
  const double target = *f.target_speedup;

  std::vector<SignalKind> kinds;
  for (const auto& name : split(signals_text, ',')) kinds.push_back(make_signal(name, f.signal));
  if (kinds.empty()) throw Error(ErrorKind::kInvalidConfig, "--signals is empty");

  json rows = json::array();
  std::string csv =
      "signal,knob,within_tolerance,speedup,performance,accuracy,premature_rate,delayed_rate,"
      "mean_exit_layer,mean_dis\n";
  for (const auto& kind : kinds) {
    CalibrationResult cal;
    if (std::holds_alternative<signal::Oracle>(kind)) {
      cal.policy = ExitPolicy{kind, 0.0, f.min_exit_layer};
      cal.report = evaluate(t.model, t.dataset.samples, cal.policy, f.threads);
      cal.within_tolerance = std::abs(cal.report.speedup - target) <= f.tol;
    } else {
      cal = calibrate_threshold(t.model, t.dataset.samples, kind, target, f.tol,
                                kDefaultCalibrationIters, f.min_exit_layer, f.threads);
    }
    const auto dis = dis_per_layer(t, kind);
    json dis_json = json::array();
    double dis_sum = 0.0;
    std::size_t dis_n = 0;
    for (const auto& d : dis) {
      dis_json.push_back(d ? json(*d) : json(nullptr));
      if (d) {
        dis_sum += *d;
        ++dis_n;
      }
    }
    const json mean_dis = dis_n ? json(dis_sum / static_cast<double>(dis_n)) : json(nullptr);
    const EvalReport& r = cal.report;
    json row = report_json(r, metric);
    row["signal"] = signal_label(kind);
    row["knob"] = cal.knob;
    row["within_tolerance"] = cal.within_tolerance;
    row["per_layer_dis"] = dis_json;
    row["mean_dis"] = mean_dis;
    rows.push_back(row);
    csv += "\"" + signal_label(kind) + "\"," + num(cal.knob) + "," +
           (cal.within_tolerance ? "true" : "false") + "," + num(r.speedup) + "," +
           num(performance_of(r, metric)) + "," + num(r.accuracy) + "," + num(r.premature_rate) +
           "," + num(r.delayed_rate) + "," + num(r.mean_exit_layer) + "," + mean_dis.dump() +
           "\n";
  }
  json doc{{"command", "compare"},
           {"trace", f.trace},
           {"target_speedup", target},
           {"tol", f.tol},
           {"metric", f.metric},
           {"dis_form", "DIS (ranking-consistency form)"},
           {"rows", rows}};
  const fs::path dir = prepare_out_dir(f.out);
  write_file_atomically(dir / "compare.csv", csv);
  write_file_atomically(dir / "compare.json", doc.dump(2) + "\n");
  os << csv;
  return kExitOk;
}

int cmd_inspect(const std::string& trace, bool verify, std::ostream& os) {
  if (verify) {
    const TraceDataset ds = load_trace(trace);
    os << manifest_json(ds.manifest);
    os << "payload ok: " << ds.samples.size() << " samples\n";
  } else {
    os << manifest_json(read_manifest(trace));
  }
  return kExitOk;
}

void require_positive(double v, const char* name) {
  if (!(v > 0.0)) throw Error(ErrorKind::kInvalidConfig, std::string(name) + " must be positive");
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidConfig:
      return kExitUsage;
    case ErrorKind::kRankDeficient:
    case ErrorKind::kDegenerateFeature:
    case ErrorKind::kDivergence:
    case ErrorKind::kUnreachableTarget:
    case ErrorKind::kEmptyHistogram:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  if (text.rfind("lin:", 0) == 0) {
    const auto parts = split(text.substr(4), ':');
    if (parts.size() != 3) throw Error(ErrorKind::kInvalidConfig, "expected lin:start:stop:count");
    const double start = parse_real(parts[0]);
    const double stop = parse_real(parts[1]);
    const double count = parse_real(parts[2]);
    if (count < 1 || count != std::floor(count) || count > 1e6) {
      throw Error(ErrorKind::kInvalidConfig, "grid count must be a positive integer");
    }
    const auto n = static_cast<std::size_t>(count);
    for (std::size_t i = 0; i < n; ++i) {
      grid.push_back(n == 1 ? start
                            : start + (stop - start) * static_cast<double>(i) /
                                          static_cast<double>(n - 1));
    }
  } else {
    for (const auto& p : split(text, ',')) grid.push_back(parse_real(p));
  }
  if (grid.empty()) throw Error(ErrorKind::kInvalidConfig, "empty grid");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) {
      throw Error(ErrorKind::kInvalidConfig, "grid must be strictly ascending");
    }
  }
  return grid;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Early-exit certainty engine"};
  app.name("nspexit");
  app.require_subcommand(1);

  SynthConfig sc;
  TrainConfig tc;
  std::string synth_out;
  std::string synth_name = "bench";
  std::string encoding = "binary";
  std::string init = "gaussian";
  std::size_t synth_threads = 1;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic benchmark and train its heads");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--name", synth_name, "File stem inside --out")->capture_default_str();
  synth->add_option("--seed", sc.seed, "Seed for data and head init")->capture_default_str();
  synth->add_option("--feature-dim", sc.feature_dim)->capture_default_str();
  synth->add_option("--num-classes", sc.num_classes)->capture_default_str();
  synth->add_option("--num-layers", sc.num_layers)->capture_default_str();
  synth->add_option("--num-samples", sc.num_samples)->capture_default_str();
  synth->add_option("--base-separation", sc.base_separation)->capture_default_str();
  synth->add_option("--depth-gain", sc.depth_gain)->capture_default_str();
  synth->add_option("--noise-sigma", sc.noise_sigma)->capture_default_str();
  synth->add_option("--class-irrelevant-dims", sc.class_irrelevant_dims)->capture_default_str();
  synth->add_option("--difficulty-spread", sc.difficulty_spread)->capture_default_str();
  synth->add_option("--learning-rate", tc.learning_rate)->capture_default_str();
  synth->add_option("--epochs", tc.epochs)->capture_default_str();
  synth->add_option("--l2-penalty", tc.l2_penalty)->capture_default_str();
  synth->add_option("--init", init)
      ->check(CLI::IsMember({"zero", "gaussian"}))
      ->capture_default_str();
  synth->add_option("--init-scale", tc.init_scale)->capture_default_str();
  synth->add_option("--encoding", encoding)
      ->check(CLI::IsMember({"binary", "json"}))
      ->capture_default_str();
  synth->add_option("--threads", synth_threads)->check(CLI::PositiveNumber)->capture_default_str();

  CommonFlags ef;
  auto* eval = app.add_subcommand("eval", "Evaluate one exit policy");
  add_trace_flags(eval, ef);
  add_signal_flags(eval, ef.signal);
  auto* eval_tau = eval->add_option("--tau", ef.tau, "Exit threshold");
  auto* eval_target = eval->add_option("--target-speedup", ef.target_speedup,
                                       "Calibrate tau to this speed-up first");
  eval_tau->excludes(eval_target);
  eval->add_option("--tol", ef.tol, "Calibration tolerance")->capture_default_str();
  eval->add_option("--out", ef.out, "Output directory")->required();

  CommonFlags cf;
  auto* calibrate = app.add_subcommand("calibrate", "Tune tau to hit a target speed-up");
  add_trace_flags(calibrate, cf);
  add_signal_flags(calibrate, cf.signal);
  calibrate->add_option("--target-speedup", cf.target_speedup)->required();
  auto* cal_tau = calibrate->add_option("--tau", cf.tau);
  calibrate->add_option("--tol", cf.tol)->capture_default_str();
  calibrate->add_option("--out", cf.out, "Output directory")->required();

  CommonFlags sf;
  std::string grid;
  std::string alphas;
  auto* sweep = app.add_subcommand("sweep", "Trade-off curve over a tau grid");
  add_trace_flags(sweep, sf);
  add_signal_flags(sweep, sf.signal);
  sweep->add_option("--grid", grid, "Comma list or lin:start:stop:count")->required();
  sweep->add_option("--alphas", alphas, "Optional CAP alpha grid (same syntax)");
  sweep->add_option("--out", sf.out, "Output directory")->required();

  CommonFlags pf;
  std::string signals = "cap,entropy,maxprob,energy,patience,pcee,oracle";
  auto* compare = app.add_subcommand("compare", "Compare signals at a matched speed-up");
  add_trace_flags(compare, pf);
  add_signal_flags(compare, pf.signal);
  compare->add_option("--signals", signals, "Comma-separated signal names")
      ->capture_default_str();
  compare->add_option("--target-speedup", pf.target_speedup)->required();
  compare->add_option("--tol", pf.tol)->capture_default_str();
  compare->add_option("--out", pf.out, "Output directory")->required();

  std::string inspect_trace;
  bool verify = false;
  auto* inspect = app.add_subcommand("inspect", "Print a trace manifest");
  inspect->add_option("--trace", inspect_trace)->required();
  inspect->add_flag("--verify", verify, "Also load and check the payload");

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.emplace_back("nspexit");
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      tc.init = init == "zero" ? HeadInit::kZero : HeadInit::kGaussian;
      tc.seed = sc.seed;
      return cmd_synth(sc, tc, synth_out, synth_name, encoding, synth_threads, out);
    }
    if (eval->parsed()) {
      if (!ef.tau && !ef.target_speedup) {
        throw Error(ErrorKind::kInvalidConfig, "eval needs --tau or --target-speedup");
      }
      if (ef.target_speedup) require_positive(ef.tol, "--tol");
      return cmd_eval(ef, false, out);
    }
    if (calibrate->parsed()) {
      if (cal_tau->count() > 0) {
        throw Error(ErrorKind::kInvalidConfig, "calibrate takes --target-speedup, not --tau");
      }
      require_positive(cf.tol, "--tol");
      return cmd_eval(cf, true, out);
    }
    if (sweep->parsed()) return cmd_sweep(sf, grid, alphas, out);
    if (compare->parsed()) {
      require_positive(pf.tol, "--tol");
      return cmd_compare(pf, signals, out);
    }
    if (inspect->parsed()) return cmd_inspect(inspect_trace, verify, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace nspexit

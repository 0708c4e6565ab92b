#pragma once

// The rrnet command line: train, eval, unroll, params, sweep, dynamics and
// synth-data. Exit codes: 0 ok, 1 usage, 2 invalid model or config, 3 runtime.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rrnet/cifar.hpp"
#include "rrnet/config.hpp"
#include "rrnet/dynamics.hpp"
#include "rrnet/presets.hpp"
#include "rrnet/trainer.hpp"
#include "rrnet/unroll.hpp"

namespace rrnet::cli {

enum ExitCode { kOk = 0, kUsage = 1, kInvalid = 2, kRuntime = 3 };

inline constexpr int kDeskTrain = 6000;
inline constexpr int kDeskTest = 1000;
inline constexpr int kDeskEpochs = 6;

struct Options {
  std::string config_path;
  std::string preset;
  std::optional<int> t;
  std::vector<int> t_list;
  std::optional<int> epochs;
  std::optional<int> batch;
  std::optional<std::uint64_t> seed;
  bool desk_scale = false;
  std::string data_dir;
  std::string out_dir = "rrnet_out";
  bool dump = false;
  std::string checkpoint;

  // dynamics
  std::string input_kind = "constant";
  std::string weight_kind = "constant";
  int dim = 8;
  double norm = 0.5;
  double tol = 1e-8;
  int max_terms = 10000;

  // synth-data
  int n_train = 50000;
  int n_test = 10000;
};

struct Resolved {
  ModelSpec model;
  TrainConfig train;
  std::string source;  // "preset:NAME" or the config path
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw CLI::ValidationError("--t-list", "bad entry '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError("--t-list", "empty list");
  return out;
}

}  // namespace detail

/// Builds the model and training config from --config or --preset plus overrides.
inline Resolved resolve(const Options& o) {
  if (o.config_path.empty() == o.preset.empty())
    throw CLI::ValidationError("model", "give exactly one of --config or --preset");
  Resolved r;
  if (!o.config_path.empty()) {
    auto mc = parse_config(detail::read_file(o.config_path));
    if (!mc.diagnostics.empty()) {
      std::string msg = "invalid config '" + o.config_path + "':";
      for (const auto& d : mc.diagnostics) msg += "\n  " + d;
      throw ConfigError(msg);
    }
    r.model = std::move(mc.model);
    r.train = mc.train;
    r.source = o.config_path;
  } else {
    PresetOptions po;
    if (o.desk_scale) po.widths = preset_desk_widths(o.preset);
    r.model = preset(o.preset, po);
    r.source = "preset:" + o.preset;
  }
  if (o.t) r.model.io.readout_times = {*o.t};
  if (o.desk_scale) {
    r.train.epochs = kDeskEpochs;
    r.train.lr_schedule = default_lr_schedule(kDeskEpochs);
    r.train.train_subset = kDeskTrain;
    r.train.test_subset = kDeskTest;
  }
  if (o.epochs) {
    r.train.epochs = *o.epochs;
    r.train.lr_schedule = default_lr_schedule(*o.epochs);
  }
  if (o.batch) r.train.batch_size = *o.batch;
  if (o.seed) r.train.seed = *o.seed;
  if (auto d = validate(r.train); !d.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : d) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  if (auto d = validate(r.model.graph, r.model.sharing, r.model.io); !d.empty()) {
    std::string msg = "invalid model:";
    for (const auto& e : d) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return r;
}

inline nlohmann::json run_metadata(const Resolved& r, const Options& o, const std::string& command) {
  nlohmann::json j;
  j["command"] = command;
  j["source"] = r.source;
  j["desk_scale"] = o.desk_scale;
  j["seed"] = r.train.seed;
  j["config_hash"] = config_hash(r.model);
  j["config"] = nlohmann::json::parse(serialize_config(r.model, r.train));
  return j;
}

inline void log_resolved(std::ostream& log, const Resolved& r, const Options& o) {
  log << "# source: " << r.source << (o.desk_scale ? " (desk scale)" : "") << '\n'
      << "# seed: " << r.train.seed << '\n'
      << "# config hash: " << config_hash(r.model) << '\n'
      << "# resolved config:\n"
      << serialize_config(r.model, r.train) << std::flush;
}

inline CifarData load_data(const Options& o) {
  if (o.data_dir.empty())
    throw IoError("no data directory: pass --data DIR or set RRNET_DATA "
                  "(`rrnet synth-data --out DIR` writes a stand-in set)");
  return load_cifar10(o.data_dir);
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write '" + p.string() + "'");
  os << j.dump(2) << '\n';
}

inline int cmd_unroll(const Options& o, std::ostream& out, std::ostream& err) {
  const auto r = resolve(o);
  log_resolved(err, r, o);
  const auto u = unroll(r.model);
  if (o.dump) {
    dump(u, out);
    return kOk;
  }
  std::size_t live = 0;
  for (const auto& n : u.nodes) live += n.live;
  const auto [lo, hi] = wall_clock_estimate(r.model.io.max_readout());
  out << "nodes " << u.nodes.size() << "\nlive_nodes " << live << "\nparams " << param_count(u)
      << "\nreadout_times";
  for (int t : u.readout_times) out << ' ' << t;
  out << "\nwall_clock_ms " << lo << '-' << hi << '\n';
  return kOk;
}

inline int cmd_params(const Options& o, std::ostream& out, std::ostream& err) {
  const auto r = resolve(o);
  log_resolved(err, r, o);
  out << param_count(unroll(r.model)) << '\n';
  return kOk;
}

inline int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const auto r = resolve(o);
  log_resolved(err, r, o);
  const auto data = load_data(o);
  namespace fs = std::filesystem;
  fs::create_directories(o.out_dir);
  TrainHooks hooks;
  hooks.log = &err;
  hooks.checkpoint_path =
      o.checkpoint.empty() ? (fs::path(o.out_dir) / "checkpoint.json").string() : o.checkpoint;
  write_json(fs::path(o.out_dir) / "run.json", run_metadata(r, o, "train"));
  const auto res = train(r.model, r.train, data, hooks);
  write_metrics_csv((fs::path(o.out_dir) / "metrics.csv").string(), res.history);
  out << "t " << r.model.io.max_readout() << " params " << param_count(unroll(r.model))
      << " test_error " << res.history.back().test_error << " checkpoint " << hooks.checkpoint_path
      << '\n';
  return kOk;
}

inline int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const auto r = resolve(o);
  log_resolved(err, r, o);
  if (o.checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "eval needs a checkpoint");
  const auto store = ParamStore<float>::load(o.checkpoint, config_hash(r.model));
  const auto data = load_data(o);
  const Dataset test = r.train.test_subset ? data.test.head(*r.train.test_subset) : data.test;
  const Dataset stats = r.train.train_subset ? data.train.head(*r.train.train_subset) : data.train;
  std::vector<int> ts = o.t_list;
  if (ts.empty()) ts = {r.model.io.max_readout()};
  out << "t,test_error\n";
  for (int t : ts) out << t << ',' << evaluate(store, r.model, t, test, &stats) << '\n' << std::flush;
  return kOk;
}

inline int cmd_sweep(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.t_list.empty()) throw CLI::ValidationError("--t-list", "sweep needs --t-list");
  const auto r = resolve(o);
  log_resolved(err, r, o);
  const auto data = load_data(o);
  namespace fs = std::filesystem;
  fs::create_directories(o.out_dir);
  auto meta = run_metadata(r, o, "sweep");
  meta["t_list"] = o.t_list;
  write_json(fs::path(o.out_dir) / "run.json", meta);
  std::ofstream csv(fs::path(o.out_dir) / "sweep.csv");
  if (!csv) throw IoError("cannot write sweep.csv in '" + o.out_dir + "'");
  const std::string header = "t,params,test_error\n";
  out << header;
  csv << header;
  for (int t : o.t_list) {
    const ModelSpec m = with_readout(r.model, t);
    err << "# training readout t=" << t << '\n';
    TrainHooks hooks;
    hooks.log = &err;
    hooks.eval_each_epoch = false;
    const auto res = train(m, r.train, data, hooks);
    write_metrics_csv((fs::path(o.out_dir) / ("metrics_t" + std::to_string(t) + ".csv")).string(),
                      res.history);
    std::ostringstream line;
    line << t << ',' << param_count(unroll(m)) << ',' << res.history.back().test_error << '\n';
    out << line.str() << std::flush;
    csv << line.str() << std::flush;
  }
  return kOk;
}

inline int cmd_dynamics(const Options& o, std::ostream& out, std::ostream& err) {
  using namespace rrnet::dynamics;
  if (o.dim < 1) throw ConfigError("--dim must be >= 1");
  if (!(o.norm >= 0)) throw ConfigError("--norm must be >= 0");
  if (!(o.tol > 0)) throw ConfigError("--tol must be > 0");
  const std::uint64_t seed = o.seed.value_or(1);
  err << "# seed: " << seed << "\n# dim: " << o.dim << " norm: " << o.norm << " tol: " << o.tol
      << " max_terms: " << o.max_terms << '\n';
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Matrix k(o.dim, o.dim);
  for (auto& e : k.reshaped()) e = nd(rng);
  k = (0.5 * (k + k.transpose())).eval();  // symmetric: spectral radius equals spectral norm
  const double sn = estimate_spectral_norm(k, 500);
  if (sn > 0) k *= o.norm / sn;
  Vector x(o.dim);
  for (auto& e : x) e = nd(rng);

  SystemDescriptor d;
  if (o.input_kind == "delta") {
    d.input = Schedule::delta(x);
  } else if (o.input_kind == "constant") {
    d.input = Schedule::constant(x);
  } else {
    throw ConfigError("--input must be delta or constant");
  }
  const Vector w = k.reshaped();
  if (o.weight_kind == "constant") {
    d.weights = Schedule::constant(w);
  } else if (o.weight_kind == "per-t") {
    d.weights = Schedule::explicit_list({w, 0.5 * w});
  } else {
    throw ConfigError("--weights must be constant or per-t");
  }
  const auto cls = classify(d);
  const auto res = power_series_solve(LinearOperator(k), x, o.tol, o.max_terms);
  out << "# system: " << describe(cls) << '\n'
      << "# spectral_norm: " << estimate_spectral_norm(k, 500)
      << " spectral_radius: " << estimate_spectral_radius(k, 500) << '\n'
      << "# converged: " << (res.converged ? "true" : "false") << " terms: " << res.terms_used
      << '\n'
      << "term,residual_norm\n";
  out << std::setprecision(10);
  for (const auto& tr : res.trace) out << tr.term << ',' << tr.residual_norm << '\n';
  return kOk;
}

inline int cmd_synth(const Options& o, std::ostream& out, std::ostream& err) {
  const std::uint64_t seed = o.seed.value_or(1);
  err << "# seed: " << seed << '\n';
  write_synthetic_cifar10(o.out_dir, o.n_train, o.n_test, seed);
  out << "wrote " << o.n_train << " train and " << o.n_test << " test records to " << o.out_dir
      << '\n';
  return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-state recurrent networks: unroll, count, train and evaluate", "rrnet"};
  app.require_subcommand(1, 1);
  retain_heap_memory();
  Options o;
  std::string t_list;

  auto model_flags = [&](CLI::App* c) {
    c->add_option("--config", o.config_path, "model/training config JSON");
    c->add_option("--preset", o.preset, "named preset")
        ->check(CLI::IsMember(preset_names()));
    c->add_option("--t", o.t, "readout time")->check(CLI::NonNegativeNumber);
    c->add_flag("--desk-scale", o.desk_scale,
                "reduced widths, " + std::to_string(kDeskTrain) + "/" + std::to_string(kDeskTest) +
                    " record subsets and " + std::to_string(kDeskEpochs) + " epochs");
  };
  auto train_flags = [&](CLI::App* c) {
    c->add_option("--epochs", o.epochs)->check(CLI::PositiveNumber);
    c->add_option("--batch", o.batch)->check(CLI::PositiveNumber);
    c->add_option("--seed", o.seed);
    c->add_option("--data", o.data_dir, "CIFAR-10 binary directory")->envname("RRNET_DATA");
    c->add_option("--out", o.out_dir, "output directory");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model and write metrics and a checkpoint");
  model_flags(train_cmd);
  train_flags(train_cmd);
  train_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint path (default OUT/checkpoint.json)");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint at one or more readout times");
  model_flags(eval_cmd);
  train_flags(eval_cmd);
  eval_cmd->add_option("--checkpoint", o.checkpoint)->required();
  eval_cmd->add_option("--t-list", t_list, "comma-separated test readout times");

  auto* unroll_cmd = app.add_subcommand("unroll", "build the unrolled graph");
  model_flags(unroll_cmd);
  unroll_cmd->add_flag("--dump", o.dump, "print every node");

  auto* params_cmd = app.add_subcommand("params", "print the parameter count");
  model_flags(params_cmd);

  auto* sweep_cmd = app.add_subcommand("sweep", "train at each readout time; CSV t,params,test_error");
  model_flags(sweep_cmd);
  train_flags(sweep_cmd);
  sweep_cmd->add_option("--t-list", t_list)->required();

  auto* dyn_cmd = app.add_subcommand("dynamics", "power-series trace for a random symmetric K' of given spectral norm");
  dyn_cmd->add_option("--input", o.input_kind, "delta | constant");
  dyn_cmd->add_option("--weights", o.weight_kind, "constant | per-t");
  dyn_cmd->add_option("--dim", o.dim);
  dyn_cmd->add_option("--norm", o.norm, "spectral norm of K'");
  dyn_cmd->add_option("--tol", o.tol);
  dyn_cmd->add_option("--max-terms", o.max_terms)->check(CLI::PositiveNumber);
  dyn_cmd->add_option("--seed", o.seed);

  auto* synth_cmd = app.add_subcommand("synth-data", "write a procedural CIFAR-format data set");
  synth_cmd->add_option("--out", o.out_dir)->required();
  synth_cmd->add_option("--train", o.n_train);
  synth_cmd->add_option("--test", o.n_test);
  synth_cmd->add_option("--seed", o.seed);

  try {
    app.parse(argc, argv);
    if (!t_list.empty()) o.t_list = detail::parse_int_list(t_list);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(o, out, err);
    if (*eval_cmd) return cmd_eval(o, out, err);
    if (*unroll_cmd) return cmd_unroll(o, out, err);
    if (*params_cmd) return cmd_params(o, out, err);
    if (*sweep_cmd) return cmd_sweep(o, out, err);
    if (*dyn_cmd) return cmd_dynamics(o, out, err);
    if (*synth_cmd) return cmd_synth(o, out, err);
  } catch (const CLI::ValidationError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "invalid: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}

}  // namespace rrnet::cli

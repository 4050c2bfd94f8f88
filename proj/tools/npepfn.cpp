// npepfn command-line front end. Every subcommand writes its artifacts under
// --out and exits 0 only when everything it was asked to do succeeded.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "CLI11.hpp"
#include "json.hpp"
#include "npepfn/bridge.hpp"
#include "npepfn/dataset_io.hpp"
#include "npepfn/evaluation.hpp"
#include "npepfn/experiment.hpp"
#include "npepfn/npe.hpp"
#include "npepfn/simulators.hpp"
#include "npepfn/tsnpe.hpp"
#include "npepfn/unconditional.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace npepfn;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string backend = "reference";
  std::string out = "npepfn-out";
};

std::vector<double> parse_vector(const std::string& text) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) throw Error("not a number: '" + item + "'");
    out.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

json artifact_hashes(const fs::path& dir, const std::vector<std::string>& names) {
  json out = json::object();
  for (const auto& n : names) out[n] = git_blob_sha1(slurp(dir / n));
  return out;
}

/// Observation columns of a CSV: the x_* columns of a dataset file (valid rows
/// only) or every column of a plain table.
Matrix read_observation_rows(const fs::path& path) {
  const NumericTable t = read_table_csv(path);
  std::vector<std::size_t> xcols;
  std::optional<std::size_t> valid_col;
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    if (t.columns[c].starts_with("x_")) xcols.push_back(c);
    if (t.columns[c] == "valid") valid_col = c;
  }
  if (xcols.empty()) return t.values;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < t.values.rows(); ++i)
    if (!valid_col || t.values(i, *valid_col) != 0.0) rows.push_back(i);
  return t.values.select_rows(rows).select_cols(xcols);
}

Observation resolve_observation(const TaskSpec& task, const std::string& x_text, std::uint64_t seed) {
  if (!x_text.empty()) {
    Observation obs;
    obs.x = parse_vector(x_text);
    if (obs.x.size() != task.obs_dim)
      throw ShapeError("--x-o has " + std::to_string(obs.x.size()) + " values, task needs " +
                       std::to_string(task.obs_dim));
    return obs;
  }
  return draw_observation(task, derive_seed(seed, 100));
}

json provenance_json(const PosteriorSampleSet& post) {
  const auto& p = post.provenance;
  return {{"task", p.task},         {"x_o", p.x_o},   {"order", p.order}, {"n_filter", p.n_filter},
          {"context_rows", p.context_rows}, {"seed", p.seed}, {"backend", p.backend}};
}

int cmd_simulate(const Globals& g, const std::string& task_name, std::size_t sims) {
  const TaskSpec task = make_task(task_name);
  const fs::path out = g.out;
  fs::create_directories(out);
  const auto data = sample_joint(task, sims, derive_seed(g.seed, 1));
  write_dataset_csv(data, out / "simulations.csv");
  write_json(out / "provenance.json", {{"command", "simulate"},
                                       {"task", task.name},
                                       {"sims", sims},
                                       {"seed", g.seed},
                                       {"valid", data.valid_count()},
                                       {"artifacts", artifact_hashes(out, {"simulations.csv"})}});
  std::cout << "wrote " << data.size() << " simulations to " << (out / "simulations.csv").string() << "\n";
  return 0;
}

struct InferArgs {
  std::string task;
  std::size_t sims = 1000;
  std::string data;
  std::size_t filter = 10000;
  std::size_t samples = 1000;
  std::string order = "default";
  std::string x_o;
};

int cmd_infer(const Globals& g, const InferArgs& a) {
  const TaskSpec task = make_task(a.task);
  const fs::path out = g.out;
  fs::create_directories(out);
  std::vector<std::string> artifacts;
  SimulationDataset data;
  if (!a.data.empty()) {
    data = read_dataset_csv(fs::path(a.data));
    if (data.theta_dim() != task.theta_dim || data.obs_dim() != task.obs_dim)
      throw ShapeError("dataset dimensions do not match task " + task.name);
  } else {
    data = sample_joint(task, a.sims, derive_seed(g.seed, 1));
    write_dataset_csv(data, out / "simulations.csv");
    artifacts.push_back("simulations.csv");
  }
  const Observation obs = resolve_observation(task, a.x_o, g.seed);
  auto backend = make_backend(g.backend);
  NpeOptions opts;
  opts.filter.n_filter = a.filter;
  opts.task_name = task.name;
  const auto post = sample_posterior(data, obs.x, a.samples, ArOrder::parse(a.order, task.theta_dim),
                                     derive_seed(g.seed, 200), *backend, opts);
  write_matrix_csv(post.samples, "theta", out / "samples.csv");
  artifacts.push_back("samples.csv");
  json prov = provenance_json(post);
  prov["command"] = "infer";
  if (!obs.theta.empty()) prov["theta_true"] = obs.theta;
  if (!a.data.empty()) prov["data"] = a.data;
  prov["artifacts"] = artifact_hashes(out, artifacts);
  write_json(out / "provenance.json", prov);
  std::cout << "wrote " << post.samples.rows() << " posterior samples to " << (out / "samples.csv").string() << "\n";
  return 0;
}

struct InferSeqArgs {
  std::string task;
  std::size_t rounds = 10;
  std::size_t budget = 0;
  double alpha = 1e-3;
  std::string mode = "rejection";
  std::optional<double> restricted;
  std::size_t ratio_size = kDefaultRatioSize;
  std::size_t samples = 1000;
  std::size_t filter = 10000;
  std::string order = "default";
  std::string x_o;
};

int cmd_infer_seq(const Globals& g, const InferSeqArgs& a) {
  const TaskSpec task = make_task(a.task);
  if (a.budget % a.rounds != 0) throw Error("--budget must be divisible by --rounds");
  TsnpeConfig cfg;
  cfg.rounds = a.rounds;
  cfg.sims_per_round = a.budget / a.rounds;
  cfg.alpha = a.alpha;
  cfg.ratio_size = a.ratio_size;
  cfg.final_samples = a.samples;
  cfg.filter.n_filter = a.filter;
  cfg.order = a.order;
  cfg.restricted_c = a.restricted;
  if (a.mode == "rejection") {
    cfg.mode = ProposalMode::Rejection;
  } else if (a.mode.starts_with("sir:")) {
    cfg.mode = ProposalMode::Sir;
    cfg.sir_k = static_cast<std::size_t>(std::stoul(a.mode.substr(4)));
  } else {
    throw Error("--mode must be rejection or sir:<K>");
  }
  const fs::path out = g.out;
  fs::create_directories(out);
  const Observation obs = resolve_observation(task, a.x_o, g.seed);
  auto backend = make_backend(g.backend);
  const auto res = run_tsnpe(task, cfg, obs.x, derive_seed(g.seed, 200), *backend);

  write_dataset_csv(res.data, out / "simulations.csv");
  write_matrix_csv(res.posterior.samples, "theta", out / "samples.csv");
  json rounds = json::array();
  for (const auto& r : res.rounds) {
    rounds.push_back({{"round", r.round},
                      {"new_simulations", r.new_simulations},
                      {"total_simulations", r.total_simulations},
                      {"proposals", r.proposals},
                      {"acceptance_rate", r.acceptance_rate},
                      {"valid_fraction", r.valid_fraction},
                      {"hdr_threshold", r.hdr_threshold},
                      {"restricted_active", r.restricted_active},
                      {"posterior_mean", r.posterior_mean},
                      {"energy_score", r.energy_score}});
  }
  json metrics = {{"rounds", rounds}};
  if (res.failure) metrics["failure"] = *res.failure;
  write_json(out / "rounds.json", metrics);
  json prov = provenance_json(res.posterior);
  prov["command"] = "infer-seq";
  prov["rounds"] = a.rounds;
  prov["budget"] = a.budget;
  prov["alpha"] = a.alpha;
  prov["mode"] = a.mode;
  if (a.restricted) prov["restricted_c"] = *a.restricted;
  if (!obs.theta.empty()) prov["theta_true"] = obs.theta;
  prov["artifacts"] = artifact_hashes(out, {"simulations.csv", "samples.csv", "rounds.json"});
  write_json(out / "provenance.json", prov);
  if (res.failure) {
    write_json(out / "failures.json", {{"failed", {{{"cell", "infer-seq"}, {"error", *res.failure}}}}});
    std::cerr << "npepfn: " << *res.failure << "\n";
    return 1;
  }
  std::cout << "completed " << res.rounds.size() << " rounds, " << res.data.size() << " simulations\n";
  return 0;
}

int emit_eval(const Globals& g, const std::string& name, const json& result) {
  fs::create_directories(g.out);
  write_json(fs::path(g.out) / ("eval_" + name + ".json"), result);
  std::cout << result.dump(2) << "\n";
  return 0;
}

struct SbcArgs {
  std::string task;
  std::size_t sims = 1000;
  std::size_t datasets = 500;
  std::size_t posterior_samples = 100;
  std::size_t filter = 10000;
  std::string order = "default";
};

int cmd_eval_sbc(const Globals& g, const SbcArgs& a) {
  const TaskSpec task = make_task(a.task);
  auto backend = make_backend(g.backend);
  const auto data = sample_joint(task, a.sims, derive_seed(g.seed, 1));
  const ArOrder order = ArOrder::parse(a.order, task.theta_dim);
  NpeOptions opts;
  opts.filter.n_filter = a.filter;
  const SbcSampler sampler = [&](std::span<const double> x, std::size_t n, std::uint64_t s) {
    return sample_posterior(data, x, n, order, s, *backend, opts).samples;
  };
  const auto res = sbc(task.prior, task.simulate, sampler, a.datasets, a.posterior_samples, derive_seed(g.seed, 2));
  return emit_eval(g, "sbc",
                   {{"task", task.name},
                    {"sims", a.sims},
                    {"datasets", a.datasets},
                    {"posterior_samples", a.posterior_samples},
                    {"eod", res.eod},
                    {"eod_per_dim", res.eod_per_dim},
                    {"ranks", res.ranks},
                    {"seed", g.seed}});
}

struct DensityArgs {
  std::string data;
  std::size_t clusters = 1;
  std::size_t train_size = 0;
  double test_fraction = 0.2;
  std::size_t samples = 0;
};

int cmd_density(const Globals& g, const DensityArgs& a) {
  const NumericTable table = read_table_csv(fs::path(a.data));
  const std::size_t n = table.values.rows();
  if (!(a.test_fraction > 0.0 && a.test_fraction < 1.0)) throw Error("--test-fraction must lie in (0, 1)");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = make_rng(g.seed, 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng() % i)]);
  const auto n_test = static_cast<std::size_t>(std::ceil(a.test_fraction * static_cast<double>(n)));
  if (n_test >= n) throw Error("dataset too small for the requested test fraction");
  const std::size_t available = n - n_test;
  const std::size_t n_train = a.train_size == 0 ? available : a.train_size;
  if (n_train > available)
    throw Error("--train-size " + std::to_string(n_train) + " exceeds the " + std::to_string(available) +
                " non-test rows");
  std::vector<std::size_t> test_rows(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train_rows(perm.begin() + static_cast<std::ptrdiff_t>(n_test),
                                      perm.begin() + static_cast<std::ptrdiff_t>(n_test + n_train));
  auto backend = make_backend(g.backend);
  const MixtureDensityModel model(table.values.select_rows(train_rows), a.clusters, derive_seed(g.seed, 1), *backend);
  const auto logp = model.log_density(table.values.select_rows(test_rows));
  fs::create_directories(g.out);
  const auto outside = static_cast<std::size_t>(
      std::count_if(logp.begin(), logp.end(), [](double v) { return !std::isfinite(v); }));
  const double nll = mean_nll(logp);
  json result = {{"data", a.data},
                 {"clusters", a.clusters},
                 {"train_size", n_train},
                 {"test_size", n_test},
                 {"nll", std::isfinite(nll) ? json(nll) : json("inf")},
                 {"outside_support", outside},
                 {"weights", model.partition().weights},
                 {"kmeans_iterations", model.partition().iterations},
                 {"seed", g.seed}};
  if (a.samples > 0) {
    NumericTable draws{table.columns, model.sample(a.samples, derive_seed(g.seed, 2))};
    write_table_csv(draws, fs::path(g.out) / "density_samples.csv");
  }
  write_json(fs::path(g.out) / "density.json", result);
  std::cout << result.dump(2) << "\n";
  return 0;
}

int cmd_bridge_check(const Globals& g) {
  json report = {{"backend", g.backend}};
  bool ok = true;
  auto check = [&](const std::string& name, const std::function<void(json&)>& fn) {
    json entry;
    try {
      fn(entry);
      entry["ok"] = true;
    } catch (const std::exception& e) {
      entry["ok"] = false;
      entry["error"] = e.what();
      ok = false;
    }
    report[name] = entry;
  };
  std::unique_ptr<InContextBackend> backend;
  check("handshake", [&](json& e) {
    backend = make_backend(g.backend);
    const auto caps = backend->capabilities();
    e["describe"] = backend->describe();
    e["max_context"] = caps.max_context;
    e["max_features"] = caps.max_features;
    if (auto* b = dynamic_cast<BridgeBackend*>(backend.get())) e["peer_version"] = b->peer_version();
  });
  if (backend) {
    check("regress", [&](json& e) {
      ContextSet ctx{Matrix{{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}}, {0.0, 1.0, 1.0, 2.0}};
      const auto preds = backend->regress(ctx, Matrix{{0.5, 0.5}}, g.seed);
      if (preds.size() != 1) throw Error("expected one predictive distribution");
      e["mean"] = preds[0].mean();
      e["mass"] = preds[0].total_mass();
      if (std::abs(preds[0].total_mass() - 1.0) > 1e-6) throw Error("predictive density is not normalised");
    });
    check("classify", [&](json& e) {
      ClassContext ctx{Matrix{{-2.0}, {-1.5}, {-1.0}, {1.0}, {1.5}, {2.0}}, {0, 0, 0, 1, 1, 1}};
      const auto probs = backend->classify(ctx, Matrix{{-1.75}, {1.75}}, g.seed);
      const auto c1 = probs.column_of(1);
      e["p_class1"] = std::vector<double>{probs.probabilities(0, c1), probs.probabilities(1, c1)};
      if (!(probs.probabilities(1, c1) > probs.probabilities(0, c1))) throw Error("classifier ordering is wrong");
    });
  }
  report["ok"] = ok;
  std::cout << report.dump(2) << "\n";
  return ok ? 0 : 1;
}

int cmd_run(const Globals& g, const std::string& config_path, bool out_given, std::size_t jobs) {
  const std::string text = slurp(config_path);
  ExperimentConfig cfg = parse_experiment_config(text);
  if (out_given || cfg.output.empty()) cfg.output = g.out;
  if (jobs > 0) cfg.jobs = jobs;
  const auto report = run_experiment(cfg, text);
  for (const auto& c : report.cells)
    std::cout << (c.ok ? "ok      " : "FAILED  ") << c.name << (c.ok ? "" : ": " + c.error) << "\n";
  return report.all_ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"npepfn: training-free simulation-based inference with in-context density estimators"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed; every random stream is derived from it");
  app.add_option("--backend", g.backend, "reference | bridge:<command> | tcp:<host>:<port>");
  auto* out_opt = app.add_option("--out", g.out, "Output directory");

  auto* sim = app.add_subcommand("simulate", "Simulate (theta, x) pairs from a task prior");
  std::string sim_task;
  std::size_t sim_n = 1000;
  sim->add_option("--task", sim_task, "Task name")->required();
  sim->add_option("--sims", sim_n, "Number of simulations");

  auto* infer = app.add_subcommand("infer", "Sample the posterior for one observation (NPE-PFN)");
  InferArgs ia;
  infer->add_option("--task", ia.task, "Task name")->required();
  infer->add_option("--sims", ia.sims, "Simulations to draw when --data is not given");
  infer->add_option("--data", ia.data, "Existing simulations CSV");
  infer->add_option("--filter", ia.filter, "Context budget N_filter")->check(CLI::PositiveNumber);
  infer->add_option("--samples", ia.samples, "Posterior samples")->check(CLI::PositiveNumber);
  infer->add_option("--order", ia.order, "default | random:<seed>");
  infer->add_option("--x-o", ia.x_o, "Observation as comma-separated values (default: drawn from the task)");

  auto* seq = app.add_subcommand("infer-seq", "Truncated sequential inference (TSNPE-PFN)");
  InferSeqArgs sa;
  double restricted = 0.0;
  seq->add_option("--task", sa.task, "Task name")->required();
  seq->add_option("--rounds", sa.rounds, "Rounds R")->check(CLI::PositiveNumber);
  seq->add_option("--budget", sa.budget, "Total simulation budget (R * N_r)")->required();
  seq->add_option("--alpha", sa.alpha, "Truncation fraction alpha");
  seq->add_option("--mode", sa.mode, "rejection | sir:<K>");
  auto* restricted_opt = seq->add_option("--restricted", restricted, "Validity threshold c for a restricted prior");
  seq->add_option("--ratio-size", sa.ratio_size, "Posterior samples per class in the ratio estimator");
  seq->add_option("--samples", sa.samples, "Final posterior samples");
  seq->add_option("--filter", sa.filter, "Context budget N_filter");
  seq->add_option("--order", sa.order, "default | random:<seed>");
  seq->add_option("--x-o", sa.x_o, "Observation as comma-separated values");

  auto* eval = app.add_subcommand("eval", "Evaluation metrics");
  eval->require_subcommand(1);
  auto* ev_c2st = eval->add_subcommand("c2st", "Classifier two-sample test between two sample CSVs");
  std::string c2st_p, c2st_q;
  std::size_t folds = 5;
  ev_c2st->add_option("--p", c2st_p, "First sample CSV")->required();
  ev_c2st->add_option("--q", c2st_q, "Second sample CSV")->required();
  ev_c2st->add_option("--folds", folds, "Cross-validation folds");
  auto* ev_sbc = eval->add_subcommand("sbc", "Simulation-based calibration of NPE-PFN on a task");
  SbcArgs sb;
  ev_sbc->add_option("--task", sb.task, "Task name")->required();
  ev_sbc->add_option("--sims", sb.sims, "Training simulations");
  ev_sbc->add_option("--datasets", sb.datasets, "SBC datasets");
  ev_sbc->add_option("--posterior-samples", sb.posterior_samples, "Posterior samples per dataset (L)");
  ev_sbc->add_option("--filter", sb.filter, "Context budget N_filter");
  ev_sbc->add_option("--order", sb.order, "default | random:<seed>");
  std::string pred_samples, pred_x, pred_data;
  auto* ev_energy = eval->add_subcommand("energy", "Energy score of predictive samples");
  ev_energy->add_option("--samples", pred_samples, "Predictive samples CSV")->required();
  ev_energy->add_option("--x-o", pred_x, "Observation")->required();
  ev_energy->add_option("--data", pred_data, "Simulations CSV whose statistics standardise the space");
  auto* ev_pred = eval->add_subcommand("predictive", "Mean standardised distance of predictives to x_o");
  ev_pred->add_option("--samples", pred_samples, "Predictive samples CSV")->required();
  ev_pred->add_option("--x-o", pred_x, "Observation")->required();
  ev_pred->add_option("--data", pred_data, "Simulations CSV whose statistics standardise the space")->required();

  auto* dens = app.add_subcommand("density", "Unconditional density estimation with k-means mixtures");
  DensityArgs da;
  dens->add_option("--data", da.data, "CSV table")->required();
  dens->add_option("--clusters", da.clusters, "k")->check(CLI::PositiveNumber);
  dens->add_option("--train-size", da.train_size, "Training rows (default: all non-test rows)");
  dens->add_option("--test-fraction", da.test_fraction, "Held-out fraction");
  dens->add_option("--samples", da.samples, "Also write this many model samples");

  auto* bcheck = app.add_subcommand("bridge-check", "Handshake and smoke-test the selected backend");

  auto* run = app.add_subcommand("run", "Run a config-driven experiment grid");
  std::string config_path;
  std::size_t jobs = 0;
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--jobs", jobs, "Parallel cells (overrides the config)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) return cmd_simulate(g, sim_task, sim_n);
    if (infer->parsed()) return cmd_infer(g, ia);
    if (seq->parsed()) {
      if (restricted_opt->count() > 0) sa.restricted = restricted;
      return cmd_infer_seq(g, sa);
    }
    if (ev_c2st->parsed()) {
      const auto res = c2st(read_observation_rows(c2st_p), read_observation_rows(c2st_q), folds, g.seed);
      return emit_eval(g, "c2st",
                       {{"accuracy", res.accuracy},
                        {"fold_accuracies", res.fold_accuracies},
                        {"folds", res.folds},
                        {"classifier", res.classifier},
                        {"seed", g.seed}});
    }
    if (ev_sbc->parsed()) return cmd_eval_sbc(g, sb);
    if (ev_energy->parsed() || ev_pred->parsed()) {
      const Matrix s = read_observation_rows(pred_samples);
      const auto x = parse_vector(pred_x);
      std::optional<StandardizationStats> stats;
      if (!pred_data.empty()) {
        const auto d = read_dataset_csv(fs::path(pred_data));
        stats = fit_standardization(d.xs(), d.valid());
      }
      if (ev_energy->parsed())
        return emit_eval(g, "energy", {{"energy_score", energy_score(s, x, stats ? &*stats : nullptr)},
                                       {"standardized", stats.has_value()}});
      return emit_eval(g, "predictive", {{"predictive_distance", predictive_distance(s, x, *stats)}});
    }
    if (dens->parsed()) return cmd_density(g, da);
    if (bcheck->parsed()) return cmd_bridge_check(g);
    if (run->parsed()) return cmd_run(g, config_path, out_opt->count() > 0, jobs);
  } catch (const std::exception& e) {
    std::cerr << "npepfn: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

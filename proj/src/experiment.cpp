#include "npepfn/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "npepfn/bridge.hpp"
#include "npepfn/dataset_io.hpp"
#include "npepfn/evaluation.hpp"
#include "npepfn/simulators.hpp"
#include "npepfn/standardize.hpp"

namespace npepfn {

using nlohmann::json;

namespace {

const std::vector<std::string> kAllMetrics = {"mean_error", "c2st", "energy", "predictive"};

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key))
      throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
T get_key(const json& obj, const std::string& key, const std::string& where, const T& fallback, bool required) {
  const std::string name = where.empty() ? key : where + "." + key;
  if (!obj.contains(key)) {
    if (required) throw ConfigError("missing config key '" + name + "'");
    return fallback;
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + name + "' has the wrong type");
  }
}

std::size_t positive(std::size_t v, const std::string& name) {
  if (v < 1) throw ConfigError("config key '" + name + "' must be >= 1");
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string cell_name(std::size_t budget, std::uint64_t seed) {
  return "b" + std::to_string(budget) + "_s" + std::to_string(seed);
}

Matrix first_rows(const Matrix& m, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, m.rows()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return m.select_rows(idx);
}

SimulationDataset simulate_predictive(const TaskSpec& task, const Matrix& thetas, std::uint64_t seed) {
  SimulationDataset out(task.theta_dim, task.obs_dim);
  for (std::size_t i = 0; i < thetas.rows(); ++i) {
    Rng rng = make_rng(seed, i);
    const auto x = task.simulate(thetas.row(i), rng);
    out.append(thetas.row(i), x, all_finite(x));
  }
  return out;
}

json tsnpe_rounds_json(const TsnpeResult& res) {
  json rounds = json::array();
  for (const auto& r : res.rounds) {
    rounds.push_back({{"round", r.round},
                      {"new_simulations", r.new_simulations},
                      {"total_simulations", r.total_simulations},
                      {"proposals", r.proposals},
                      {"acceptance_rate", r.acceptance_rate},
                      {"valid_fraction", r.valid_fraction},
                      {"hdr_threshold", r.hdr_threshold},
                      {"ratio_excluded", r.ratio_excluded},
                      {"restricted_active", r.restricted_active},
                      {"posterior_mean", r.posterior_mean},
                      {"energy_score", r.energy_score},
                      {"predictive_valid_fraction", r.predictive_valid_fraction}});
  }
  json out = {{"rounds", rounds}};
  if (res.failure) out["failure"] = *res.failure;
  return out;
}

void run_cell(const ExperimentConfig& cfg, std::size_t budget, std::uint64_t seed, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const TaskSpec task = make_task(cfg.task);
  auto backend = make_backend(cfg.backend);
  const ArOrder order = ArOrder::parse(cfg.order, task.theta_dim);
  NpeOptions npe;
  npe.filter = cfg.filter;
  npe.task_name = task.name;
  auto wants = [&](const std::string& m) {
    return std::find(cfg.metrics.begin(), cfg.metrics.end(), m) != cfg.metrics.end();
  };

  json metrics = {{"task", task.name},
                  {"budget", budget},
                  {"seed", seed},
                  {"engine", cfg.engine == EngineKind::Npe ? "npe" : "tsnpe"},
                  {"backend", backend->describe()},
                  {"observations", json::array()}};

  SimulationDataset npe_data;
  if (cfg.engine == EngineKind::Npe) {
    npe_data = sample_joint(task, budget, derive_seed(seed, 1));
    write_dataset_csv(npe_data, dir / "simulations.csv");
  }

  std::optional<std::string> failure;
  for (std::size_t k = 0; k < cfg.observations && !failure; ++k) {
    const std::string tag = "obs" + std::to_string(k);
    const Observation obs = draw_observation(task, derive_seed(seed, 100 + k));
    json entry = {{"index", k}, {"theta_true", obs.theta}, {"x_o", obs.x}};

    PosteriorSampleSet post;
    const SimulationDataset* data = &npe_data;
    TsnpeResult seq;
    if (cfg.engine == EngineKind::Npe) {
      post = sample_posterior(npe_data, obs.x, cfg.samples, order, derive_seed(seed, 200 + k), *backend, npe);
    } else {
      TsnpeConfig t = cfg.tsnpe;
      t.sims_per_round = budget / t.rounds;
      t.final_samples = cfg.samples;
      t.filter = cfg.filter;
      t.order = cfg.order;
      t.predictive_samples = cfg.predictive_samples;
      seq = run_tsnpe(task, t, obs.x, derive_seed(seed, 200 + k), *backend);
      write_dataset_csv(seq.data, dir / ("simulations_" + tag + ".csv"));
      write_file(dir / ("rounds_" + tag + ".json"), tsnpe_rounds_json(seq).dump(2) + "\n");
      if (seq.failure) failure = *seq.failure;
      post = std::move(seq.posterior);
      data = &seq.data;
    }
    write_matrix_csv(post.samples, "theta", dir / ("posterior_" + tag + ".csv"));
    entry["context_rows"] = post.provenance.context_rows;

    if (task.has_analytic_posterior()) {
      const GaussianPosterior ref = task.analytic_posterior(obs.x);
      if (wants("mean_error")) {
        const auto mean = post.samples.column_means();
        std::vector<double> err(mean.size());
        double total = 0.0;
        for (std::size_t j = 0; j < mean.size(); ++j) {
          err[j] = std::abs(mean[j] - ref.mean[j]) / std::sqrt(ref.variance[j]);
          total += err[j];
        }
        entry["mean_error"] = {{"per_dim", err}, {"mean", total / static_cast<double>(err.size())}};
      }
      if (wants("c2st")) {
        Rng rng = make_rng(seed, 300 + k);
        const Matrix ref_samples = ref.sample(cfg.samples, rng);
        write_matrix_csv(ref_samples, "theta", dir / ("reference_" + tag + ".csv"));
        const auto c = c2st(post.samples, ref_samples, 5, derive_seed(seed, 400 + k));
        entry["c2st"] = {{"accuracy", c.accuracy}, {"folds", c.folds}, {"classifier", c.classifier},
                         {"seed", derive_seed(seed, 400 + k)}};
      }
    }
    if (wants("energy") || wants("predictive")) {
      const auto pred = simulate_predictive(task, first_rows(post.samples, cfg.predictive_samples),
                                            derive_seed(seed, 500 + k));
      write_dataset_csv(pred, dir / ("predictive_" + tag + ".csv"));
      const auto valid_pred = pred.valid_only();
      entry["predictive_valid_fraction"] =
          pred.empty() ? 0.0 : static_cast<double>(valid_pred.size()) / static_cast<double>(pred.size());
      if (data->valid_count() > 0 && valid_pred.size() >= 2) {
        const auto stats = fit_standardization(data->xs(), data->valid());
        if (wants("energy")) entry["energy_score"] = energy_score(valid_pred.xs(), obs.x, &stats);
        if (wants("predictive")) entry["predictive_distance"] = predictive_distance(valid_pred.xs(), obs.x, stats);
      }
    }
    metrics["observations"].push_back(std::move(entry));
  }
  write_file(dir / "metrics.json", metrics.dump(2) + "\n");
  if (failure) throw Error(*failure);
}

}  // namespace

ExperimentConfig parse_experiment_config(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown_keys(root,
                      {"schema_version", "task", "budgets", "seeds", "observations", "backend", "engine", "filter",
                       "samples", "order", "metrics", "predictive_samples", "output", "jobs"},
                      "");
  const int version = get_key<int>(root, "schema_version", "", 0, true);
  if (version != kConfigSchemaVersion)
    throw ConfigError("unsupported schema_version " + std::to_string(version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");

  ExperimentConfig cfg;
  cfg.task = get_key<std::string>(root, "task", "", "", true);
  try {
    (void)make_task(cfg.task);
  } catch (const Error& e) {
    throw ConfigError(std::string("config key 'task': ") + e.what());
  }
  cfg.budgets = get_key<std::vector<std::size_t>>(root, "budgets", "", {}, true);
  cfg.seeds = get_key<std::vector<std::uint64_t>>(root, "seeds", "", {}, true);
  if (cfg.budgets.empty()) throw ConfigError("config key 'budgets' must not be empty");
  if (cfg.seeds.empty()) throw ConfigError("config key 'seeds' must not be empty");
  for (auto b : cfg.budgets) positive(b, "budgets");
  cfg.observations = positive(get_key<std::size_t>(root, "observations", "", 1, false), "observations");
  cfg.backend = get_key<std::string>(root, "backend", "", "reference", false);
  if (cfg.backend != "reference" && !cfg.backend.starts_with("bridge:") && !cfg.backend.starts_with("tcp:"))
    throw ConfigError("config key 'backend' must be reference, bridge:<command> or tcp:<host>:<port>");
  cfg.samples = positive(get_key<std::size_t>(root, "samples", "", 1000, false), "samples");
  cfg.order = get_key<std::string>(root, "order", "", "default", false);
  try {
    (void)ArOrder::parse(cfg.order, 1);
  } catch (const Error& e) {
    throw ConfigError(std::string("config key 'order': ") + e.what());
  }
  cfg.predictive_samples = get_key<std::size_t>(root, "predictive_samples", "", 200, false);
  cfg.output = get_key<std::string>(root, "output", "", "", false);
  cfg.jobs = positive(get_key<std::size_t>(root, "jobs", "", 1, false), "jobs");
  cfg.metrics = get_key<std::vector<std::string>>(root, "metrics", "", kAllMetrics, false);
  for (const auto& m : cfg.metrics)
    if (std::find(kAllMetrics.begin(), kAllMetrics.end(), m) == kAllMetrics.end())
      throw ConfigError("config key 'metrics' has unknown metric '" + m + "'");

  if (root.contains("filter")) {
    const auto& f = root["filter"];
    if (!f.is_object()) throw ConfigError("config key 'filter' must be an object");
    reject_unknown_keys(f, {"n_filter"}, "filter");
    cfg.filter.n_filter = positive(get_key<std::size_t>(f, "n_filter", "filter", 10000, false), "filter.n_filter");
  }

  if (root.contains("engine")) {
    const auto& e = root["engine"];
    if (!e.is_object()) throw ConfigError("config key 'engine' must be an object");
    reject_unknown_keys(e, {"kind", "rounds", "alpha", "ratio_size", "mode", "sir_k", "restricted_c"}, "engine");
    const auto kind = get_key<std::string>(e, "kind", "engine", "npe", false);
    if (kind == "npe") {
      for (const auto* key : {"rounds", "alpha", "ratio_size", "mode", "sir_k", "restricted_c"})
        if (e.contains(key)) throw ConfigError(std::string("config key 'engine.") + key + "' requires kind tsnpe");
    } else if (kind == "tsnpe") {
      cfg.engine = EngineKind::Tsnpe;
      cfg.tsnpe.rounds = positive(get_key<std::size_t>(e, "rounds", "engine", 10, false), "engine.rounds");
      cfg.tsnpe.alpha = get_key<double>(e, "alpha", "engine", 1e-3, false);
      cfg.tsnpe.ratio_size = positive(get_key<std::size_t>(e, "ratio_size", "engine", kDefaultRatioSize, false),
                                      "engine.ratio_size");
      const auto mode = get_key<std::string>(e, "mode", "engine", "rejection", false);
      if (mode == "rejection")
        cfg.tsnpe.mode = ProposalMode::Rejection;
      else if (mode == "sir")
        cfg.tsnpe.mode = ProposalMode::Sir;
      else
        throw ConfigError("config key 'engine.mode' must be rejection or sir");
      cfg.tsnpe.sir_k = positive(get_key<std::size_t>(e, "sir_k", "engine", 10, false), "engine.sir_k");
      if (e.contains("restricted_c")) cfg.tsnpe.restricted_c = get_key<double>(e, "restricted_c", "engine", 0.3, true);
      try {
        cfg.tsnpe.validate();
      } catch (const Error& err) {
        throw ConfigError(std::string("config key 'engine': ") + err.what());
      }
      for (auto b : cfg.budgets)
        if (b % cfg.tsnpe.rounds != 0)
          throw ConfigError("config key 'budgets': " + std::to_string(b) + " is not divisible by engine.rounds");
    } else {
      throw ConfigError("config key 'engine.kind' must be npe or tsnpe");
    }
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(read_file(path));
}

bool ExperimentReport::all_ok() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellOutcome& c) { return c.ok; });
}

ExperimentReport run_experiment(const ExperimentConfig& config, std::string_view config_text) {
  if (config.output.empty()) throw ConfigError("no output directory (config key 'output' or --out)");
  const std::filesystem::path root = config.output;
  std::filesystem::create_directories(root);

  struct Cell {
    std::size_t budget;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (auto b : config.budgets)
    for (auto s : config.seeds) cells.push_back({b, s});

  ExperimentReport report;
  report.cells.resize(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      auto& out = report.cells[i];
      out.name = cell_name(cells[i].budget, cells[i].seed);
      try {
        run_cell(config, cells[i].budget, cells[i].seed, root / out.name);
        out.ok = true;
      } catch (const std::exception& e) {
        out.error = e.what();
      }
    }
  };
  const std::size_t jobs = std::min(config.jobs, cells.size());
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  json failures = json::array();
  json succeeded = json::array();
  for (const auto& c : report.cells) {
    if (c.ok)
      succeeded.push_back(c.name);
    else
      failures.push_back({{"cell", c.name}, {"error", c.error}});
  }
  write_file(root / "failures.json", json{{"failed", failures}, {"succeeded", succeeded}}.dump(2) + "\n");

  json artifacts = json::object();
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root))
    if (entry.is_regular_file() && entry.path().filename() != "provenance.json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) artifacts[std::filesystem::relative(f, root).generic_string()] = git_blob_sha1(read_file(f));

  json provenance = {{"schema_version", kConfigSchemaVersion},
                     {"config", json::parse(config_text)},
                     {"config_sha1", git_blob_sha1(config_text)},
                     {"seeds", config.seeds},
                     {"budgets", config.budgets},
                     {"artifacts", artifacts}};
  write_file(root / "provenance.json", provenance.dump(2) + "\n");
  return report;
}

std::string git_blob_sha1(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("SHA-1 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

}  // namespace npepfn

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "doctest.h"
#include "json.hpp"
#include "npepfn/dataset_io.hpp"
#include "npepfn/evaluation.hpp"
#include "npepfn/experiment.hpp"

using namespace npepfn;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string kCli = NPEPFN_CLI;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("npepfn_test_experiment_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json small_config(const fs::path& out) {
  return {{"schema_version", 1},
          {"task", "gaussian_linear"},
          {"budgets", {200}},
          {"seeds", {0, 1}},
          {"observations", 1},
          {"samples", 300},
          {"metrics", {"c2st", "mean_error", "energy", "predictive"}},
          {"predictive_samples", 100},
          {"output", out.string()}};
}

std::string config_error(const std::string& text) {
  try {
    (void)parse_experiment_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

int run_status(const std::string& command) {
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing fills every field") {
  const auto cfg = parse_experiment_config(R"({
    "schema_version": 1, "task": "two_moons", "budgets": [1000, 2000], "seeds": [3],
    "observations": 2, "backend": "reference",
    "engine": {"kind": "tsnpe", "rounds": 5, "alpha": 0.001, "ratio_size": 500, "mode": "sir", "sir_k": 10,
               "restricted_c": 0.3},
    "filter": {"n_filter": 5000}, "samples": 400, "order": "random:4", "metrics": ["energy"],
    "predictive_samples": 50, "output": "runs/x", "jobs": 2})");
  CHECK(cfg.task == "two_moons");
  CHECK(cfg.budgets == std::vector<std::size_t>{1000, 2000});
  CHECK(cfg.engine == EngineKind::Tsnpe);
  CHECK(cfg.tsnpe.rounds == 5);
  CHECK(cfg.tsnpe.alpha == 0.001);
  CHECK(cfg.filter.n_filter == 5000);
  CHECK(cfg.order == "random:4");
  CHECK(cfg.jobs == 2);
}

TEST_CASE("unknown config keys are rejected by name") {
  CHECK(config_error(R"({"schema_version": 1, "task": "gaussian_linear", "budgets": [10], "seeds": [0],
                         "bugdets": [10]})")
            .find("'bugdets'") != std::string::npos);
  CHECK(config_error(R"({"schema_version": 1, "task": "gaussian_linear", "budgets": [10], "seeds": [0],
                         "engine": {"kind": "tsnpe", "rounds": 2, "roundz": 3}})")
            .find("'engine.roundz'") != std::string::npos);
  CHECK(config_error(R"({"schema_version": 1, "task": "gaussian_linear", "seeds": [0]})").find("'budgets'") !=
        std::string::npos);
  CHECK(config_error(R"({"schema_version": 2, "task": "gaussian_linear", "budgets": [10], "seeds": [0]})")
            .find("schema_version") != std::string::npos);
  CHECK(config_error(R"({"schema_version": 1, "task": "no_such_task", "budgets": [10], "seeds": [0]})")
            .find("'task'") != std::string::npos);
  CHECK(config_error(R"({"schema_version": 1, "task": "gaussian_linear", "budgets": [10], "seeds": [0],
                         "metrics": ["nltp"]})")
            .find("nltp") != std::string::npos);
  CHECK(config_error("{not json").find("not valid JSON") != std::string::npos);
}

TEST_CASE("git blob hashes match git") {
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("rerunning a config gives bit-identical metrics") {
  const fs::path a = scratch_dir("rerun_a"), b = scratch_dir("rerun_b");
  json cfg_a = small_config(a), cfg_b = small_config(b);
  cfg_b["jobs"] = 2;
  const auto ra = run_experiment(parse_experiment_config(cfg_a.dump()), cfg_a.dump());
  const auto rb = run_experiment(parse_experiment_config(cfg_b.dump()), cfg_b.dump());
  REQUIRE(ra.all_ok());
  REQUIRE(rb.all_ok());
  for (const char* cell : {"b200_s0", "b200_s1"}) {
    CHECK(slurp(a / cell / "metrics.json") == slurp(b / cell / "metrics.json"));
    CHECK(slurp(a / cell / "posterior_obs0.csv") == slurp(b / cell / "posterior_obs0.csv"));
  }
  CHECK(slurp(a / "b200_s0" / "metrics.json") != slurp(a / "b200_s1" / "metrics.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("metrics are recomputable from the persisted samples") {
  const fs::path dir = scratch_dir("recompute");
  const json cfg = small_config(dir);
  REQUIRE(run_experiment(parse_experiment_config(cfg.dump()), cfg.dump()).all_ok());
  const fs::path cell = dir / "b200_s0";
  const json metrics = json::parse(slurp(cell / "metrics.json"));
  const json& obs = metrics["observations"][0];
  const Matrix post = read_table_csv(cell / "posterior_obs0.csv").values;
  const Matrix ref = read_table_csv(cell / "reference_obs0.csv").values;
  CHECK(post.rows() == 300);
  const auto c = c2st(post, ref, obs["c2st"]["folds"].get<std::size_t>(), obs["c2st"]["seed"].get<std::uint64_t>());
  CHECK(c.accuracy == obs["c2st"]["accuracy"].get<double>());

  const auto sims = read_dataset_csv(cell / "simulations.csv");
  const auto pred = read_dataset_csv(cell / "predictive_obs0.csv").valid_only();
  const auto stats = fit_standardization(sims.xs(), sims.valid());
  const auto x_o = obs["x_o"].get<std::vector<double>>();
  CHECK(energy_score(pred.xs(), x_o, &stats) == obs["energy_score"].get<double>());
  CHECK(predictive_distance(pred.xs(), x_o, stats) == obs["predictive_distance"].get<double>());
  fs::remove_all(dir);
}

TEST_CASE("provenance hashes every artifact") {
  const fs::path dir = scratch_dir("provenance");
  const json cfg = small_config(dir);
  const std::string text = cfg.dump(2);
  REQUIRE(run_experiment(parse_experiment_config(text), text).all_ok());
  const json prov = json::parse(slurp(dir / "provenance.json"));
  CHECK(prov["config_sha1"] == git_blob_sha1(text));
  CHECK(prov["config"] == cfg);
  CHECK(prov["seeds"] == json::array({0, 1}));
  const json& artifacts = prov["artifacts"];
  CHECK(artifacts.contains("failures.json"));
  CHECK(artifacts.contains("b200_s1/metrics.json"));
  for (const auto& [name, sha] : artifacts.items()) CHECK(sha == git_blob_sha1(slurp(dir / name)));
  fs::remove_all(dir);
}

TEST_CASE("a failing cell leaves the others plus a failure manifest") {
  const fs::path dir = scratch_dir("partial");
  fs::create_directories(dir);
  // A plain file where the cell directory should go makes that cell fail.
  std::ofstream(dir / "b200_s1") << "blocker\n";
  const json cfg = small_config(dir);
  const auto report = run_experiment(parse_experiment_config(cfg.dump()), cfg.dump());
  CHECK_FALSE(report.all_ok());
  REQUIRE(report.cells.size() == 2);
  CHECK(report.cells[0].ok);
  CHECK_FALSE(report.cells[1].ok);
  CHECK(fs::exists(dir / "b200_s0" / "metrics.json"));
  const json failures = json::parse(slurp(dir / "failures.json"));
  CHECK(failures["succeeded"] == json::array({"b200_s0"}));
  REQUIRE(failures["failed"].size() == 1);
  CHECK(failures["failed"][0]["cell"] == "b200_s1");
  CHECK_FALSE(failures["failed"][0]["error"].get<std::string>().empty());
  fs::remove_all(dir);
}

TEST_CASE("cli exit code is 0 only when every cell succeeds") {
  const fs::path dir = scratch_dir("cli");
  fs::create_directories(dir);
  const fs::path config = dir / "config.json";
  json cfg = small_config(dir / "run");
  cfg["seeds"] = {0};
  cfg["metrics"] = {"mean_error"};
  std::ofstream(config) << cfg.dump();
  CHECK(run_status(kCli + " run --config " + config.string() + " > /dev/null") == 0);
  CHECK(fs::exists(dir / "run" / "b200_s0" / "metrics.json"));

  fs::create_directories(dir / "blocked");
  std::ofstream(dir / "blocked" / "b200_s0") << "blocker\n";
  CHECK(run_status(kCli + " --out " + (dir / "blocked").string() + " run --config " + config.string() +
                   " > /dev/null 2>&1") != 0);

  std::ofstream(config) << R"({"schema_version": 1, "task": "gaussian_linear", "budgets": [10], "seeds": [0],
                               "colour": "blue"})";
  const fs::path err = dir / "stderr.txt";
  CHECK(run_status(kCli + " run --config " + config.string() + " > /dev/null 2> " + err.string()) != 0);
  CHECK(slurp(err).find("colour") != std::string::npos);
  fs::remove_all(dir);
}

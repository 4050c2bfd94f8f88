#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "npepfn/errors.hpp"
#include "npepfn/tsnpe.hpp"

namespace npepfn {

inline constexpr int kConfigSchemaVersion = 1;

enum class EngineKind { Npe, Tsnpe };

/// Parsed experiment config (JSON, schema version 1). Unknown keys are rejected.
///
/// {
///   "schema_version": 1,
///   "task": "gaussian_linear",
///   "budgets": [1000],
///   "seeds": [0],
///   "observations": 1,
///   "backend": "reference",
///   "engine": {"kind": "npe"}            // or "tsnpe" with rounds, alpha, ratio_size,
///                                         //    mode ("rejection" | "sir"), sir_k, restricted_c
///   "filter": {"n_filter": 10000},
///   "samples": 1000,
///   "order": "default",
///   "metrics": ["c2st", "mean_error", "energy", "predictive"],
///   "predictive_samples": 200,
///   "output": "runs/example",
///   "jobs": 1
/// }
struct ExperimentConfig {
  std::string task;
  std::vector<std::size_t> budgets;
  std::vector<std::uint64_t> seeds;
  std::size_t observations = 1;
  std::string backend = "reference";
  EngineKind engine = EngineKind::Npe;
  TsnpeConfig tsnpe{};
  FilterConfig filter{};
  std::size_t samples = 1000;
  std::string order = "default";
  std::vector<std::string> metrics;
  std::size_t predictive_samples = 200;
  std::string output;
  std::size_t jobs = 1;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Throws ConfigError naming the offending key.
ExperimentConfig parse_experiment_config(std::string_view json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct CellOutcome {
  std::string name;  // e.g. "b1000_s0"
  bool ok = false;
  std::string error;
};

struct ExperimentReport {
  std::vector<CellOutcome> cells;
  bool all_ok() const;
};

/// Runs every (budget, seed) cell into <output>/<cell>/ and writes
/// provenance.json plus failures.json at the top level. `config_text` is the
/// verbatim config, hashed into the provenance.
ExperimentReport run_experiment(const ExperimentConfig& config, std::string_view config_text);

/// git's blob id: SHA-1 over "blob <size>\0" + content, lowercase hex.
std::string git_blob_sha1(std::string_view content);

}  // namespace npepfn

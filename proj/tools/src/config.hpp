#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "odeflow/distill.hpp"
#include "odeflow/models.hpp"

namespace odeflow::cli {

/// Invalid configuration; the message names the offending key and, when it
/// can be located, the line in the config file.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input file that does not exist.
class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataPaths {
  std::string train;
  std::string eval;
};

struct AnalyzeConfig {
  std::size_t image = 0;         // eval sample used for the single-trajectory report
  double eps = 0.1;              // neighbourhood radius for the local Lipschitz estimate
  int lipschitz_samples = 8;
  int reference_factor = 64;     // reference resolution = factor * steps
  int lyapunov_steps = 256;
  double lyapunov_horizon = 4.0;
  std::size_t max_samples = 100; // eval samples in the per-class Lyapunov table
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model{};
  DataPaths data{};
  TrainConfig train{};
  DistillConfig distill{};
  AnalyzeConfig analyze{};
  std::string teacher;  // teacher checkpoint consumed by distill
  std::string out_dir = ".";
};

/// Defaults used when a key is absent. Training defaults are sized for a CPU.
RunConfig default_config();

/// Parses a JSON config. Absent keys keep their defaults; unknown keys, wrong
/// types and out-of-range values raise ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical JSON of the fully resolved config (defaults filled in).
std::string dump_config(const RunConfig& cfg);

/// FNV-1a 64 of the canonical dump, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

}  // namespace odeflow::cli

#pragma once

// Reproducible runs: benchmark creation, staged training, dataset generation,
// evaluation and reporting. Each command writes into a fresh run directory
// with the resolved config and a manifest of output digests.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "adabldm/harness.hpp"
#include "adabldm/pipeline.hpp"

namespace adabldm::commands {

namespace fs = std::filesystem;

struct ScheduleSection {
  int train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
};

struct DatasetSection {
  int count = 200;
  int retry_budget = 10;
  bool adapt = true;
  trimap::DefectMaskOptions mask;
};

/// Input artifacts. Each may name a run directory or the artifact directory inside it.
struct InputPaths {
  std::string benchmark;
  std::string checkpoint;
  std::string dataset;
  std::string evaluation;
};

struct RunConfig {
  std::uint64_t seed = 1;
  int workers = 1;
  /// desk, tiny or full (256 px images, 32x32 latent).
  std::string geometry = "desk";
  std::vector<harness::BenchmarkSpec> categories{harness::BenchmarkSpec{}};
  ScheduleSection schedule;
  pipeline::CodecTrainConfig codec;
  pipeline::DiffusionTrainConfig pretrain;
  pipeline::DiffusionTrainConfig control;
  pipeline::GenerationConfig generation;
  pipeline::AdaptConfig adaptation;
  DatasetSection dataset;
  harness::TrialConfig trials;
  /// Cut-paste baseline size; 0 uses the generated set size.
  int cut_paste_count = 0;
  InputPaths inputs;

  /// Throws ParameterError on inconsistent values.
  void validate() const;
  models::ModelGeometry model_geometry() const;
};

/// Missing keys keep their defaults; unknown keys and type mismatches throw UsageError.
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const fs::path& path);
/// Canonical, fully resolved form.
std::string config_to_json(const RunConfig& cfg, int indent = 2);
/// First 8 hex digits of the SHA-256 of the canonical config.
std::string config_hash(const RunConfig& cfg);

// Named substreams of the top-level seed.
std::uint64_t benchmark_seed(const RunConfig& cfg, const std::string& category);
std::uint64_t training_seed(const RunConfig& cfg, const std::string& category);
std::uint64_t model_seed(const RunConfig& cfg, const std::string& category);
std::uint64_t generation_seed(const RunConfig& cfg, const std::string& category);
std::uint64_t trials_seed(const RunConfig& cfg, const std::string& category);

struct RunOptions {
  /// Parent of the run directories; empty means $ADABLDM_RUN_ROOT or ./runs.
  fs::path run_root;
  /// Manifest of a previous run of the same command to replay and verify.
  std::optional<fs::path> replay;
  /// Progress lines on stderr.
  bool verbose = false;
};

struct CommandResult {
  fs::path run_dir;
  /// SHA-256 over every output file, in path order.
  std::string digest;
  /// Set on replay: whether the outputs matched the replayed manifest.
  std::optional<bool> replay_match;
};

fs::path resolve_run_root(const RunOptions& options);

CommandResult cmd_make_bench(const RunConfig& cfg, const RunOptions& options = {});
CommandResult cmd_train(const RunConfig& cfg, const RunOptions& options = {});
CommandResult cmd_generate(const RunConfig& cfg, const RunOptions& options = {});
CommandResult cmd_evaluate(const RunConfig& cfg, const RunOptions& options = {});
CommandResult cmd_report(const RunConfig& cfg, const RunOptions& options = {});

/// Dispatches by subcommand name; with options.replay set the config comes from the manifest.
CommandResult run_command(const std::string& command, const RunConfig& cfg, const RunOptions& options);
/// Resolved config stored in a manifest.
RunConfig manifest_config(const fs::path& manifest);

/// Exit status for an exception: 2 usage, 3 state, 1 anything else.
int exit_code_for(const std::exception& e);
/// One-line JSON error record.
std::string error_record(const std::string& command, const std::exception& e);

// Artifact readers shared with the acceptance suite and bindings.

/// Generated samples of one category directory (test/defect + ground_truth/defect).
std::vector<pipeline::DefectSample> load_generated(const fs::path& category_dir);
/// Hex SHA-256 of a byte string or file.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const fs::path& path);

}  // namespace adabldm::commands

#pragma once

// The five CLI commands. Each stage records a manifest (config hash plus
// output list) next to its outputs; a rerun with the same hash and intact
// outputs is skipped, and a rerun under a different hash is refused unless
// forced.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "nowcast/error.hpp"
#include "nowcast/experiment.hpp"

namespace nowcast {

/// Existing outputs belong to a different configuration.
class StaleOutputError : public UsageError {
 public:
  using UsageError::UsageError;
};

/// A failure inside one stage of a chained run, tagged with the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what, int exit_code)
      : Error("stage " + stage + " failed: " + what), stage_(std::move(stage)), exit_code_(exit_code) {}
  const std::string& stage() const noexcept { return stage_; }
  int exit_code() const noexcept { return exit_code_; }

 private:
  std::string stage_;
  int exit_code_;
};

struct CommandOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> k;
  std::optional<double> threshold;
  bool force = false;
};

/// Loads the config file and applies command-line overrides.
ExperimentConfig resolve_config(const CommandOptions& opts);

enum class StageStatus { ran, skipped };

StageStatus cmd_synth(const ExperimentConfig& cfg, bool force, std::ostream& log);
StageStatus cmd_prepare(const ExperimentConfig& cfg, bool force, std::ostream& log);
StageStatus cmd_train(const ExperimentConfig& cfg, bool force, std::ostream& log);
StageStatus cmd_eval(const ExperimentConfig& cfg, bool force, std::ostream& log);
void cmd_all(const ExperimentConfig& cfg, bool force, std::ostream& log);

/// Process exit status for an exception escaping a command.
int exit_code_for(const std::exception& e);

/// Runs a named command and returns the process exit status; errors are
/// reported on err.
int run_command(const std::string& name, const CommandOptions& opts, std::ostream& log, std::ostream& err);

/// Paths of the artifacts each stage writes.
std::filesystem::path event_path(const ExperimentConfig& cfg, std::size_t k);
std::filesystem::path sample_path(const ExperimentConfig& cfg, Split split);
std::filesystem::path training_log_path(const ExperimentConfig& cfg);

}  // namespace nowcast

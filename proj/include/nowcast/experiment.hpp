#pragma once

// Experiment configuration for the command-line driver: a YAML document with
// fixed sections, strict key checking and a canonical form whose hash tags
// every artifact.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "nowcast/model.hpp"
#include "nowcast/sample_pipeline.hpp"
#include "nowcast/storm_synth.hpp"

namespace nowcast {

struct PathConfig {
  /// Root for every relative path below.
  std::string out = "nowcast_run";
  std::string data_dir = "data";
  std::string sample_dir = "samples";
  std::string model_path = "model/model.nwm";
  std::string report_dir = "report";
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  PathConfig paths;
  std::size_t events = 7;
  SynthConfig synth;
  PipelineOptions pipeline;  // its seed is derived per stage, not read
  int oversample_k = 1;
  TrainConfig train;         // its seed is derived per stage, not read
  double threshold = 0.5;

  /// Throws ConfigError on unknown keys, wrong types or invalid values.
  static ExperimentConfig parse(const std::string& yaml_text);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Every setting in a fixed order. Paths are excluded so that moving a run
  /// does not change its identity.
  std::string canonical() const;

  void validate() const;

  /// Stage hashes chain: each covers its own section and everything upstream.
  std::uint64_t synth_hash() const;
  std::uint64_t prepare_hash() const;
  std::uint64_t train_hash() const;
  std::uint64_t eval_hash() const;
  /// Hash of the whole configuration (equals eval_hash).
  std::uint64_t hash() const { return eval_hash(); }

  std::filesystem::path resolve(const std::string& p) const;
  std::filesystem::path data_dir() const { return resolve(paths.data_dir); }
  std::filesystem::path sample_dir() const { return resolve(paths.sample_dir); }
  std::filesystem::path model_path() const { return resolve(paths.model_path); }
  std::filesystem::path report_dir() const { return resolve(paths.report_dir); }
};

/// Seed for one stage, derived from the global seed and the stage name.
std::uint64_t stage_seed(std::uint64_t global_seed, std::string_view stage);

/// Sixteen lowercase hex digits.
std::string hex64(std::uint64_t v);

}  // namespace nowcast

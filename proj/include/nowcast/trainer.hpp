#pragma once

// Mini-batch training of the CNN_LSTM and batched inference.

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "nowcast/model.hpp"
#include "nowcast/sample_pipeline.hpp"

namespace nowcast {

struct EpochLog {
  std::size_t epoch = 0;  // 0-based
  double loss = 0;        // mean cross-entropy per training instance
  std::optional<double> val_csi;
};

struct TrainResult {
  NowcastModel model;  // best-validation-CSI checkpoint
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Groups targets into runs of at most track_chunk consecutive frames of one
/// cell track; each inner list holds instance positions in frame order.
std::vector<std::vector<std::size_t>> track_chunks(const SampleSet& set, std::span<const Instance> instances,
                                                   std::size_t track_chunk);

/// Trains a fresh model. Validation CSI is taken at cfg.threshold after every
/// epoch; an undefined CSI ranks below any defined one. Throws DataError for
/// empty splits and DivergenceError for a non-finite batch loss.
TrainResult train(const SampleSet& train_set, const SampleSet& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Infer-mode class-1 probabilities for the given instances, in order.
std::vector<double> predict_instances(const NowcastModel& model, const SampleSet& set,
                                      std::span<const Instance> instances);

/// Probabilities for every target record of the set, in record order. Throws
/// ConfigError when the set was normalized over a different variable list.
std::vector<double> predict_batch(const NowcastModel& model, const SampleSet& set);

}  // namespace nowcast

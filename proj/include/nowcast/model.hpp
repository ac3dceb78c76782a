#pragma once

// CNN_LSTM nowcaster. One CNN (shared across time steps) maps each 6x18x18x20
// block to a 50-dim feature vector; a 3-step LSTM runs over the features of
// t-2, t-1, t and a linear layer + softmax classifies the final hidden state.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nowcast/optimizer.hpp"
#include "nowcast/sample_pipeline.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

struct ModelConfig {
  std::array<std::size_t, 4> conv_channels{80, 64, 48, 32};
  std::array<std::size_t, 4> kernels{5, 3, 3, 3};
  std::size_t fc_hidden = 128;
  std::size_t feature_dim = 50;
  std::size_t lstm_hidden = 64;

  /// Input channels seen by the first convolution: variables x levels.
  static constexpr std::size_t input_channels = kSampleVariables * kLevels;

  void validate() const;
  /// Spatial extent after each convolution and after pooling.
  std::vector<std::size_t> spatial_chain() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 1e-3;
  std::size_t patience = 5;
  /// Consecutive frames of one cell track kept together in a batch, so their
  /// shared history blocks go through the CNN once.
  std::size_t track_chunk = 4;
  double threshold = 0.5;
  std::uint64_t seed = 1;
  ModelConfig model;

  void validate() const;
};

enum class Mode { train, infer };

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class NowcastModel {
 public:
  NowcastModel() = default;
  NowcastModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Trainable parameters in a fixed order.
  std::vector<Tensor> parameters() const;
  std::vector<NamedTensor> named_parameters() const;
  std::size_t parameter_count() const;

  std::array<BatchNormState, 4>& bn_states() { return bn_; }
  const std::array<BatchNormState, 4>& bn_states() const { return bn_; }

  /// Frozen copy of the normalizer used to build the model's inputs.
  Normalizer normalizer;
  /// Training echo stored with the model.
  TrainConfig train_config;
  std::uint64_t provenance = 0;

  /// blocks [U,120,18,18] (or [120,18,18]) -> features [U,50] (or [50]).
  /// When trace is given, it receives the activation shape after every layer.
  /// Train mode updates the batch-norm running statistics; infer mode mutates nothing.
  Tensor cnn_forward(const Tensor& blocks, Mode mode, std::vector<Shape>* trace = nullptr) const;

  /// Three [B,50] (or [50]) feature tensors in chronological order -> hidden [B,H].
  Tensor lstm_forward(const Tensor& v1, const Tensor& v2, const Tensor& v3) const;

  /// Hidden state -> class logits [B,2].
  Tensor classify(const Tensor& hidden) const;

  /// Logits for B instances. blocks holds U unique blocks; steps[s][b] is the
  /// row of blocks used at history step s of instance b.
  Tensor forward_logits(const Tensor& blocks, const std::array<std::vector<std::size_t>, kHistorySteps>& steps,
                        Mode mode) const;

  /// Deep copy (parameters and batch-norm state), detached from any tape.
  NowcastModel clone() const;

 private:
  struct Conv {
    Tensor weight, gamma, beta;
  };
  struct Dense {
    Tensor weight, bias;
  };

  ModelConfig cfg_;
  std::array<Conv, 4> conv_;
  mutable std::array<BatchNormState, 4> bn_;
  Dense fc1_, fc7_;
  Tensor lstm_w_input_, lstm_w_hidden_, lstm_bias_;
  Dense classifier_;

  friend NowcastModel load_model(const std::string& path);
  friend NowcastModel decode_model(std::span<const std::uint8_t> bytes);
};

/// Reorders one (variable, y, x, z) block into (variable*20 + z, y, x) channels.
void block_to_channels(std::span<const float> block, std::span<double> out);

/// Builds a [U,120,18,18] input tensor from the given records of a set.
Tensor make_block_tensor(const SampleSet& set, std::span<const std::size_t> records);

/// Probability of class 1 for one instance given its three blocks.
double model_forward(const NowcastModel& model, std::span<const float> block_t2, std::span<const float> block_t1,
                     std::span<const float> block_t);

/// Model file: "NWM1" | u32 version | config echo | named sections (name,
/// shape, f64 values) | CRC32 of everything before it.
std::vector<std::uint8_t> encode_model(const NowcastModel& model);
NowcastModel decode_model(std::span<const std::uint8_t> bytes);
void save_model(const NowcastModel& model, const std::string& path);
NowcastModel load_model(const std::string& path);

}  // namespace nowcast

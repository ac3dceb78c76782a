#pragma once

#include <cstdint>
#include <vector>

#include "nowcast/tensor.hpp"

namespace nowcast {

enum class OptimizerKind { sgd, adam };

/// First-order optimizer over a fixed, ordered parameter list. Adam moments
/// are allocated on the first step and matched to parameters by position.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update to every parameter, then zeroes their gradients.
  /// Throws UsageError if a parameter carries no gradient.
  void step(std::vector<Tensor>& params);

  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  std::uint64_t steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_;
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace nowcast

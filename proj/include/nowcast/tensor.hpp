#pragma once

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle. Operations on tensors that require gradients
// record a node linking the result to its inputs; backward() walks those
// nodes in reverse topological order and accumulates gradients. Inside a
// NoGradGuard scope nothing is recorded.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace nowcast {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<const double> values() const;
  /// Mutable access for parameter updates and test perturbations. Writes do
  /// not invalidate gradients already recorded.
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  /// Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  /// Drops the gradient buffer entirely (has_grad() becomes false).
  void clear_grad();

  bool is_leaf() const;

  /// Deep copy of shape and values, detached from any tape.
  Tensor clone() const;

  /// Identity comparison of the underlying storage.
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;

  friend struct TensorAccess;
};

/// Disables tape recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- operations -----------------------------------------------------------

/// Valid (unpadded) stride-1 convolution. input is [C,H,W] or [B,C,H,W],
/// weight [O,C,k,k], bias [O] or undefined for no bias.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// input [N] or [B,N]; weight [M,N]; bias [M] or undefined.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

enum class Activation { relu, sigmoid, tanh, softmax };

/// Elementwise activation, or softmax normalized along the last axis.
Tensor activation(const Tensor& input, Activation mode);

inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::tanh); }
inline Tensor softmax(const Tensor& x) { return activation(x, Activation::softmax); }

enum class BatchNormMode { train, infer };

/// Running statistics for one batch-norm layer. Train-mode calls update
/// running = momentum * running + (1 - momentum) * batch (unbiased variance).
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// input [B,C,...]; statistics are per channel over the batch and all
/// trailing axes. gamma, beta have shape [C].
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  BatchNormMode mode);

/// 2x2 max pooling with stride 2. input [C,H,W] or [B,C,H,W] with even H, W.
/// Ties route the gradient to the first maximum in row-major scan order.
Tensor max_pool2d(const Tensor& input);

/// Mean over the batch of -log softmax(logits)[label]. logits [B,2], labels in {0,1}.
Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Sum of all elements as a scalar.
Tensor sum(const Tensor& x);
/// Same values, new shape with the same element count.
Tensor reshape(const Tensor& x, Shape shape);
/// Columns [begin, end) of a [B,N] tensor.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
/// Rows of x (first axis) picked by index; rows may repeat.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Reverse pass from a scalar on the tape. Every tensor reachable from loss
/// that requires a gradient receives d loss / d tensor, summed over all paths.
void backward(const Tensor& loss);

}  // namespace nowcast

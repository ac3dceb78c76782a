#include "nowcast/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "nowcast/error.hpp"
#include "nowcast/parallel.hpp"

namespace nowcast {

namespace detail {

struct TensorImpl;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the inputs that require gradients.
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

using detail::Node;
using detail::TensorImpl;

struct TensorAccess {
  static const std::shared_ptr<TensorImpl>& impl(const Tensor& t) { return t.impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> p) { return Tensor(std::move(p)); }
};

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

const std::shared_ptr<TensorImpl>& impl_of(const Tensor& t) {
  if (!t.defined()) throw UsageError("operation on an undefined tensor");
  return TensorAccess::impl(t);
}

bool wants_grad(const Tensor& t) { return t.defined() && TensorAccess::impl(t)->requires_grad; }

// Builds the result tensor and, when any input needs a gradient, the tape node.
// make_backward is only invoked when a node is recorded.
template <typename MakeBackward>
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   MakeBackward&& make_backward) {
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(shape);
  out->values = std::move(values);
  bool any = false;
  for (const auto& in : inputs) any = any || wants_grad(in);
  if (any && g_grad_enabled) {
    out->requires_grad = true;
    out->node = std::make_shared<Node>();
    for (const auto& in : inputs) {
      if (in.defined()) out->node->inputs.push_back(TensorAccess::impl(in));
    }
    out->node->backward = make_backward();
  }
  return TensorAccess::wrap(std::move(out));
}

// Gradient sink for an input, or nullptr when it does not take one.
double* grad_sink(const std::shared_ptr<TensorImpl>& p) {
  if (!p || !p->requires_grad) return nullptr;
  return p->ensure_grad().data();
}

[[noreturn]] void dim_error(const std::string& op, const std::string& detail) {
  throw DimensionError(op + ": " + detail);
}

void im2col(const double* in, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, double* col) {
  const std::size_t ho = h - k + 1, wo = w - k + 1;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = in + c * h * w;
    for (std::size_t dy = 0; dy < k; ++dy) {
      for (std::size_t dx = 0; dx < k; ++dx) {
        double* row = col + ((c * k + dy) * k + dx) * ho * wo;
        for (std::size_t y = 0; y < ho; ++y) {
          const double* src = plane + (y + dy) * w + dx;
          std::copy(src, src + wo, row + y * wo);
        }
      }
    }
  }
}

void col2im_add(const double* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, double* out) {
  const std::size_t ho = h - k + 1, wo = w - k + 1;
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = out + c * h * w;
    for (std::size_t dy = 0; dy < k; ++dy) {
      for (std::size_t dx = 0; dx < k; ++dx) {
        const double* row = col + ((c * k + dy) * k + dx) * ho * wo;
        for (std::size_t y = 0; y < ho; ++y) {
          double* dst = plane + (y + dy) * w + dx;
          const double* src = row + y * wo;
          for (std::size_t x = 0; x < wo; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

// Fixed-size chunking for reductions over the batch axis, so sums happen in
// the same order regardless of worker count.
constexpr std::size_t kReduceChunk = 8;

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(shape_size(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto p = std::make_shared<TensorImpl>();
  p->shape = std::move(shape);
  p->values = std::move(values);
  p->requires_grad = requires_grad;
  return Tensor(std::move(p));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_of(*this)->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::size() const { return impl_of(*this)->values.size(); }

std::span<const double> Tensor::values() const { return impl_of(*this)->values; }
std::span<double> Tensor::mutable_values() { return impl_of(*this)->values; }

double Tensor::item() const {
  if (size() != 1) throw UsageError("item() on a tensor of shape " + shape_str(shape()));
  return values()[0];
}

bool Tensor::requires_grad() const { return impl_of(*this)->requires_grad; }
void Tensor::set_requires_grad(bool on) { impl_of(*this)->requires_grad = on; }
bool Tensor::has_grad() const { return !impl_of(*this)->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_of(*this)->grad; }
std::span<double> Tensor::mutable_grad() { return impl_of(*this)->ensure_grad(); }

void Tensor::zero_grad() {
  auto& g = impl_of(*this)->grad;
  std::fill(g.begin(), g.end(), 0.0);
}

void Tensor::clear_grad() {
  auto& g = impl_of(*this)->grad;
  g.clear();
  g.shrink_to_fit();
}

bool Tensor::is_leaf() const { return impl_of(*this)->node == nullptr; }

Tensor Tensor::clone() const { return from(shape(), std::vector<double>(values().begin(), values().end())); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- conv2d ---------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const auto& in = impl_of(input);
  const auto& wt = impl_of(weight);
  const bool batched = in->shape.size() == 4;
  if (in->shape.size() != 3 && !batched) dim_error("conv2d", "input must be [C,H,W] or [B,C,H,W], got " + shape_str(in->shape));
  if (wt->shape.size() != 4) dim_error("conv2d", "weight must be [O,C,k,k], got " + shape_str(wt->shape));

  const std::size_t batch = batched ? in->shape[0] : 1;
  const std::size_t channels = in->shape[batched ? 1 : 0];
  const std::size_t h = in->shape[batched ? 2 : 1];
  const std::size_t w = in->shape[batched ? 3 : 2];
  const std::size_t out_ch = wt->shape[0];
  const std::size_t k = wt->shape[2];
  if (wt->shape[1] != channels) {
    dim_error("conv2d", "channel axis: input has " + std::to_string(channels) + ", weight expects " +
                            std::to_string(wt->shape[1]));
  }
  if (wt->shape[3] != k) dim_error("conv2d", "kernel axis: kernel must be square, got " + shape_str(wt->shape));
  if (k > h) dim_error("conv2d", "height axis: kernel " + std::to_string(k) + " exceeds height " + std::to_string(h));
  if (k > w) dim_error("conv2d", "width axis: kernel " + std::to_string(k) + " exceeds width " + std::to_string(w));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_ch)) {
    dim_error("conv2d", "bias axis: expected [" + std::to_string(out_ch) + "], got " + shape_str(bias.shape()));
  }

  const std::size_t ho = h - k + 1, wo = w - k + 1;
  const std::size_t hw = ho * wo;
  const std::size_t ckk = channels * k * k;
  const std::size_t in_stride = channels * h * w;
  const std::size_t out_stride = out_ch * hw;

  std::vector<double> out(batch * out_stride);
  const double* bias_ptr = bias.defined() ? bias.values().data() : nullptr;
  {
    ConstMatMap wm(wt->values.data(), out_ch, ckk);
    parallel_for(batch, [&](std::size_t b) {
      thread_local std::vector<double> col;
      col.resize(ckk * hw);
      im2col(in->values.data() + b * in_stride, channels, h, w, k, col.data());
      MatMap ob(out.data() + b * out_stride, out_ch, hw);
      ob.noalias() = wm * ConstMatMap(col.data(), ckk, hw);
      if (bias_ptr) {
        for (std::size_t o = 0; o < out_ch; ++o) ob.row(o).array() += bias_ptr[o];
      }
    });
  }

  Shape out_shape = batched ? Shape{batch, out_ch, ho, wo} : Shape{out_ch, ho, wo};
  return make_result(std::move(out_shape), std::move(out), {input, weight, bias}, [=, in = in, wt = wt,
                                                                                       bs = bias.defined() ? impl_of(bias) : nullptr]() {
    return [=](TensorImpl& self) {
      const double* gout = self.grad.data();
      double* gin = grad_sink(in);
      double* gw = grad_sink(wt);
      double* gb = grad_sink(bs);
      ConstMatMap wm(wt->values.data(), out_ch, ckk);

      if (gw || gb) {
        const std::size_t chunks = (batch + kReduceChunk - 1) / kReduceChunk;
        std::vector<std::vector<double>> part_w(gw ? chunks : 0), part_b(gb ? chunks : 0);
        parallel_for(chunks, [&](std::size_t ci) {
          std::vector<double> col(ckk * hw);
          if (gw) part_w[ci].assign(out_ch * ckk, 0.0);
          if (gb) part_b[ci].assign(out_ch, 0.0);
          const std::size_t end = std::min(batch, (ci + 1) * kReduceChunk);
          for (std::size_t b = ci * kReduceChunk; b < end; ++b) {
            ConstMatMap gb_mat(gout + b * out_stride, out_ch, hw);
            if (gw) {
              im2col(in->values.data() + b * in_stride, channels, h, w, k, col.data());
              MatMap(part_w[ci].data(), out_ch, ckk).noalias() += gb_mat * ConstMatMap(col.data(), ckk, hw).transpose();
            }
            if (gb) {
              for (std::size_t o = 0; o < out_ch; ++o) part_b[ci][o] += gb_mat.row(o).sum();
            }
          }
        });
        for (std::size_t ci = 0; ci < chunks; ++ci) {
          if (gw) {
            for (std::size_t i = 0; i < out_ch * ckk; ++i) gw[i] += part_w[ci][i];
          }
          if (gb) {
            for (std::size_t o = 0; o < out_ch; ++o) gb[o] += part_b[ci][o];
          }
        }
      }
      if (gin) {
        parallel_for(batch, [&](std::size_t b) {
          thread_local std::vector<double> dcol;
          dcol.resize(ckk * hw);
          MatMap(dcol.data(), ckk, hw).noalias() = wm.transpose() * ConstMatMap(gout + b * out_stride, out_ch, hw);
          col2im_add(dcol.data(), channels, h, w, k, gin + b * in_stride);
        });
      }
    };
  });
}

// ---- linear ---------------------------------------------------------------

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const auto& in = impl_of(input);
  const auto& wt = impl_of(weight);
  const bool batched = in->shape.size() == 2;
  if (in->shape.size() != 1 && !batched) dim_error("linear", "input must be [N] or [B,N], got " + shape_str(in->shape));
  if (wt->shape.size() != 2) dim_error("linear", "weight must be [M,N], got " + shape_str(wt->shape));
  const std::size_t rows = batched ? in->shape[0] : 1;
  const std::size_t n = in->shape.back();
  const std::size_t m = wt->shape[0];
  if (wt->shape[1] != n) {
    dim_error("linear", "inner axis: input has " + std::to_string(n) + ", weight expects " + std::to_string(wt->shape[1]));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != m)) {
    dim_error("linear", "bias axis: expected [" + std::to_string(m) + "], got " + shape_str(bias.shape()));
  }

  std::vector<double> out(rows * m);
  MatMap om(out.data(), rows, m);
  om.noalias() = ConstMatMap(in->values.data(), rows, n) * ConstMatMap(wt->values.data(), m, n).transpose();
  if (bias.defined()) {
    const auto b = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < m; ++j) out[r * m + j] += b[j];
    }
  }
  Shape shape = batched ? Shape{rows, m} : Shape{m};
  return make_result(std::move(shape), std::move(out), {input, weight, bias},
                     [=, in = in, wt = wt, bs = bias.defined() ? impl_of(bias) : nullptr]() {
                       return [=](TensorImpl& self) {
                         ConstMatMap gout(self.grad.data(), rows, m);
                         if (double* gin = grad_sink(in)) {
                           MatMap(gin, rows, n).noalias() += gout * ConstMatMap(wt->values.data(), m, n);
                         }
                         if (double* gw = grad_sink(wt)) {
                           MatMap(gw, m, n).noalias() += gout.transpose() * ConstMatMap(in->values.data(), rows, n);
                         }
                         if (double* gb = grad_sink(bs)) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < m; ++j) gb[j] += gout(r, j);
                           }
                         }
                       };
                     });
}

// ---- activations ----------------------------------------------------------

namespace {

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor activation(const Tensor& input, Activation mode) {
  const auto& in = impl_of(input);
  const std::size_t n = in->values.size();
  std::vector<double> out(n);
  const auto& x = in->values;

  switch (mode) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0 ? x[i] : 0.0;
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(x[i]);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
      break;
    case Activation::softmax: {
      if (in->shape.empty() || in->shape.back() < 1) dim_error("softmax", "needs a non-empty last axis");
      const std::size_t len = in->shape.back();
      for (std::size_t r = 0; r < n / len; ++r) {
        const double* xr = x.data() + r * len;
        double* yr = out.data() + r * len;
        const double mx = *std::max_element(xr, xr + len);
        double total = 0;
        for (std::size_t j = 0; j < len; ++j) total += (yr[j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < len; ++j) yr[j] /= total;
      }
      break;
    }
  }

  auto shape = in->shape;
  return make_result(std::move(shape), std::move(out), {input}, [in = in, mode]() {
    return [in, mode](TensorImpl& self) {
      double* gin = grad_sink(in);
      if (!gin) return;
      const auto& y = self.values;
      const auto& g = self.grad;
      const std::size_t n = y.size();
      switch (mode) {
        case Activation::relu:
          for (std::size_t i = 0; i < n; ++i) gin[i] += in->values[i] > 0 ? g[i] : 0.0;
          break;
        case Activation::sigmoid:
          for (std::size_t i = 0; i < n; ++i) gin[i] += g[i] * y[i] * (1.0 - y[i]);
          break;
        case Activation::tanh:
          for (std::size_t i = 0; i < n; ++i) gin[i] += g[i] * (1.0 - y[i] * y[i]);
          break;
        case Activation::softmax: {
          const std::size_t len = self.shape.back();
          for (std::size_t r = 0; r < n / len; ++r) {
            const std::size_t o = r * len;
            double dot = 0;
            for (std::size_t j = 0; j < len; ++j) dot += g[o + j] * y[o + j];
            for (std::size_t j = 0; j < len; ++j) gin[o + j] += y[o + j] * (g[o + j] - dot);
          }
          break;
        }
      }
    };
  });
}

// ---- batch norm -----------------------------------------------------------

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  BatchNormMode mode) {
  const auto& in = impl_of(input);
  if (in->shape.size() < 2) dim_error("batch_norm", "input must be [B,C,...], got " + shape_str(in->shape));
  const std::size_t batch = in->shape[0];
  const std::size_t channels = in->shape[1];
  const std::size_t inner = shape_size(in->shape) / (batch * channels);
  if (gamma.size() != channels || beta.size() != channels) {
    dim_error("batch_norm", "channel axis: gamma/beta must have " + std::to_string(channels) + " entries");
  }
  if (state.running_mean.size() != channels || state.running_var.size() != channels) {
    dim_error("batch_norm", "channel axis: running statistics sized for " + std::to_string(state.running_mean.size()) +
                                " channels, input has " + std::to_string(channels));
  }
  if (mode == BatchNormMode::train && batch < 2) {
    throw ConfigError("batch_norm: train mode needs a batch of at least 2, got " + std::to_string(batch));
  }

  const auto& x = in->values;
  const auto g = gamma.values();
  const auto bt = beta.values();
  const double count = static_cast<double>(batch * inner);
  std::vector<double> mean(channels), inv_std(channels);

  if (mode == BatchNormMode::train) {
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = x.data() + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
      }
      const double mu = s / count;
      double ss = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = x.data() + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / count;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = ss / (count - 1.0);
      state.running_mean[c] = state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mu;
      state.running_var[c] = state.momentum * state.running_var[c] + (1.0 - state.momentum) * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  std::vector<double> xhat(x.size()), out(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t o = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        xhat[o + i] = (x[o + i] - mean[c]) * inv_std[c];
        out[o + i] = g[c] * xhat[o + i] + bt[c];
      }
    }
  }

  auto shape = in->shape;
  return make_result(std::move(shape), std::move(out), {input, gamma, beta},
                     [&, in = in, gi = impl_of(gamma), bi = impl_of(beta)]() mutable {
                       return [in, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels, inner,
                               count, train = mode == BatchNormMode::train](TensorImpl& self) {
                         const auto& gout = self.grad;
                         double* gx = grad_sink(in);
                         double* gg = grad_sink(gi);
                         double* gbt = grad_sink(bi);
                         for (std::size_t c = 0; c < channels; ++c) {
                           double sum_g = 0, sum_gx = 0;
                           for (std::size_t b = 0; b < batch; ++b) {
                             const std::size_t o = (b * channels + c) * inner;
                             for (std::size_t i = 0; i < inner; ++i) {
                               sum_g += gout[o + i];
                               sum_gx += gout[o + i] * xhat[o + i];
                             }
                           }
                           if (gg) gg[c] += sum_gx;
                           if (gbt) gbt[c] += sum_g;
                           if (!gx) continue;
                           const double scale = gi->values[c] * inv_std[c];
                           for (std::size_t b = 0; b < batch; ++b) {
                             const std::size_t o = (b * channels + c) * inner;
                             for (std::size_t i = 0; i < inner; ++i) {
                               if (train) {
                                 gx[o + i] += scale * (gout[o + i] - sum_g / count - xhat[o + i] * sum_gx / count);
                               } else {
                                 gx[o + i] += scale * gout[o + i];
                               }
                             }
                           }
                         }
                       };
                     });
}

// ---- max pool -------------------------------------------------------------

Tensor max_pool2d(const Tensor& input) {
  const auto& in = impl_of(input);
  const bool batched = in->shape.size() == 4;
  if (in->shape.size() != 3 && !batched) dim_error("max_pool2d", "input must be [C,H,W] or [B,C,H,W], got " + shape_str(in->shape));
  const std::size_t h = in->shape[batched ? 2 : 1];
  const std::size_t w = in->shape[batched ? 3 : 2];
  if (h % 2) dim_error("max_pool2d", "height axis must be even, got " + std::to_string(h));
  if (w % 2) dim_error("max_pool2d", "width axis must be even, got " + std::to_string(w));
  const std::size_t planes = shape_size(in->shape) / (h * w);
  const std::size_t ho = h / 2, wo = w / 2;

  std::vector<double> out(planes * ho * wo);
  std::vector<std::size_t> arg(out.size());
  const auto& x = in->values;
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xo = 0; xo < wo; ++xo) {
        std::size_t best = p * h * w + (2 * y) * w + 2 * xo;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * h * w + (2 * y + dy) * w + 2 * xo + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (p * ho + y) * wo + xo;
        out[o] = x[best];
        arg[o] = best;
      }
    }
  }

  Shape shape = in->shape;
  shape[shape.size() - 2] = ho;
  shape.back() = wo;
  return make_result(std::move(shape), std::move(out), {input}, [&, in = in]() mutable {
    return [in, arg = std::move(arg)](TensorImpl& self) {
      double* gin = grad_sink(in);
      if (!gin) return;
      for (std::size_t o = 0; o < arg.size(); ++o) gin[arg[o]] += self.grad[o];
    };
  });
}

// ---- loss -----------------------------------------------------------------

Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels) {
  const auto& in = impl_of(logits);
  if (in->shape.size() != 2 || in->shape[1] != 2) {
    dim_error("cross_entropy_loss", "logits must be [B,2], got " + shape_str(in->shape));
  }
  const std::size_t batch = in->shape[0];
  if (labels.size() != batch) {
    dim_error("cross_entropy_loss", "batch axis: " + std::to_string(batch) + " logit rows vs " +
                                        std::to_string(labels.size()) + " labels");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] != 0 && labels[b] != 1) {
      throw DataError("cross_entropy_loss: label " + std::to_string(labels[b]) + " at row " + std::to_string(b) +
                      " is outside {0,1}");
    }
  }

  std::vector<double> prob(batch * 2);
  double total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = in->values.data() + 2 * b;
    const double mx = std::max(z[0], z[1]);
    const double lse = mx + std::log(std::exp(z[0] - mx) + std::exp(z[1] - mx));
    total += lse - z[labels[b]];
    prob[2 * b] = std::exp(z[0] - lse);
    prob[2 * b + 1] = std::exp(z[1] - lse);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result({1}, {total / static_cast<double>(batch)}, {logits},
                     [&, in = in]() mutable {
                       return [in, prob = std::move(prob), lab = std::move(lab), batch](TensorImpl& self) {
                         double* gin = grad_sink(in);
                         if (!gin) return;
                         const double scale = self.grad[0] / static_cast<double>(batch);
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (int c = 0; c < 2; ++c) {
                             gin[2 * b + c] += scale * (prob[2 * b + c] - (lab[b] == c ? 1.0 : 0.0));
                           }
                         }
                       };
                     });
}

// ---- structural ops -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& pa = impl_of(a);
  const auto& pb = impl_of(b);
  if (pa->shape != pb->shape) dim_error("add", shape_str(pa->shape) + " vs " + shape_str(pb->shape));
  std::vector<double> out(pa->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->values[i] + pb->values[i];
  auto shape = pa->shape;
  return make_result(std::move(shape), std::move(out), {a, b}, [pa = pa, pb = pb]() {
    return [pa, pb](TensorImpl& self) {
      for (const auto& p : {pa, pb}) {
        if (double* g = grad_sink(p)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto& pa = impl_of(a);
  const auto& pb = impl_of(b);
  if (pa->shape != pb->shape) dim_error("mul", shape_str(pa->shape) + " vs " + shape_str(pb->shape));
  std::vector<double> out(pa->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->values[i] * pb->values[i];
  auto shape = pa->shape;
  return make_result(std::move(shape), std::move(out), {a, b}, [pa = pa, pb = pb]() {
    return [pa, pb](TensorImpl& self) {
      if (double* g = grad_sink(pa)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->values[i];
      }
      if (double* g = grad_sink(pb)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->values[i];
      }
    };
  });
}

Tensor sum(const Tensor& x) {
  const auto& p = impl_of(x);
  double total = 0;
  for (double v : p->values) total += v;
  return make_result({1}, {total}, {x}, [p = p]() {
    return [p](TensorImpl& self) {
      if (double* g = grad_sink(p)) {
        for (std::size_t i = 0; i < p->values.size(); ++i) g[i] += self.grad[0];
      }
    };
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  const auto& p = impl_of(x);
  if (shape_size(shape) != p->values.size()) {
    dim_error("reshape", "cannot view " + shape_str(p->shape) + " as " + shape_str(shape));
  }
  return make_result(std::move(shape), p->values, {x}, [p = p]() {
    return [p](TensorImpl& self) {
      if (double* g = grad_sink(p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    };
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  const auto& p = impl_of(x);
  if (p->shape.size() != 2) dim_error("slice_cols", "input must be [B,N], got " + shape_str(p->shape));
  const std::size_t rows = p->shape[0], cols = p->shape[1];
  if (begin >= end || end > cols) {
    dim_error("slice_cols", "column range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                                std::to_string(cols));
  }
  const std::size_t width = end - begin;
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(p->values.data() + r * cols + begin, width, out.data() + r * width);
  }
  return make_result({rows, width}, std::move(out), {x}, [=, p = p]() {
    return [=](TensorImpl& self) {
      if (double* g = grad_sink(p)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < width; ++j) g[r * cols + begin + j] += self.grad[r * width + j];
        }
      }
    };
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const auto& p = impl_of(x);
  if (p->shape.empty()) dim_error("gather_rows", "input has no row axis");
  if (rows.empty()) dim_error("gather_rows", "no rows requested");
  const std::size_t n = p->shape[0];
  const std::size_t stride = p->values.size() / n;
  std::vector<double> out(rows.size() * stride);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) dim_error("gather_rows", "row " + std::to_string(rows[i]) + " outside " + std::to_string(n));
    std::copy_n(p->values.data() + rows[i] * stride, stride, out.data() + i * stride);
  }
  Shape shape = p->shape;
  shape[0] = rows.size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(std::move(shape), std::move(out), {x}, [&, p = p]() mutable {
    return [p, idx = std::move(idx), stride](TensorImpl& self) {
      if (double* g = grad_sink(p)) {
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t j = 0; j < stride; ++j) g[idx[i] * stride + j] += self.grad[i * stride + j];
        }
      }
    };
  });
}

// ---- backward -------------------------------------------------------------

void backward(const Tensor& loss) {
  const auto& root = impl_of(loss);
  if (root->values.size() != 1) throw UsageError("backward needs a scalar loss, got shape " + shape_str(root->shape));
  if (!root->requires_grad) throw UsageError("backward: loss is not on the tape");

  // Iterative post-order DFS gives a topological order (inputs before consumers).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      TensorImpl* child = node->node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (TensorImpl* t : order) {
    if (t->node) t->grad.assign(t->values.size(), 0.0);
  }
  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->node) t->node->backward(*t);
  }
  // Interior gradients are scratch; only leaves keep theirs.
  for (TensorImpl* t : order) {
    if (t->node && t != root.get()) {
      t->grad.clear();
      t->grad.shrink_to_fit();
    }
  }
}

}  // namespace nowcast

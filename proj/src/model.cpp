#include "nowcast/model.hpp"

#include <cmath>
#include <random>

#include "nowcast/error.hpp"

namespace nowcast {

void ModelConfig::validate() const {
  for (std::size_t i = 0; i < 4; ++i) {
    if (conv_channels[i] == 0) throw ConfigError("conv channel counts must be positive");
    if (kernels[i] == 0) throw ConfigError("kernel sizes must be positive");
  }
  if (fc_hidden == 0 || feature_dim == 0) throw ConfigError("fully connected widths must be positive");
  if (lstm_hidden < 2) throw ConfigError("LSTM hidden size must be at least 2");
  const auto chain = spatial_chain();
  if (chain.back() == 0) throw ConfigError("kernel plan leaves no spatial extent");
}

std::vector<std::size_t> ModelConfig::spatial_chain() const {
  std::vector<std::size_t> chain{kWindowPixels};
  std::size_t s = kWindowPixels;
  for (std::size_t k : kernels) {
    s = s + 1 > k ? s - k + 1 : 0;
    chain.push_back(s);
  }
  chain.push_back(s / 2);
  return chain;
}

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0 || patience == 0 || track_chunk == 0) {
    throw ConfigError("epochs, batch size, patience and track chunk must be positive");
  }
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (!(threshold >= 0 && threshold <= 1)) throw ConfigError("threshold must lie in [0, 1]");
  model.validate();
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

NowcastModel::NowcastModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);

  std::size_t in_ch = ModelConfig::input_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t k = cfg.kernels[i], out = cfg.conv_channels[i];
    const double fan_in = static_cast<double>(in_ch * k * k);
    // Kaiming-uniform: ReLU follows every convolution.
    conv_[i].weight = uniform_tensor({out, in_ch, k, k}, std::sqrt(6.0 / fan_in), rng);
    conv_[i].gamma = Tensor::full({out}, 1.0, true);
    conv_[i].beta = Tensor::zeros({out}, true);
    bn_[i] = BatchNormState(out);
    in_ch = out;
  }
  const std::size_t pooled = cfg.spatial_chain().back();
  const std::size_t flat = in_ch * pooled * pooled;
  fc1_.weight = uniform_tensor({cfg.fc_hidden, flat}, std::sqrt(6.0 / static_cast<double>(flat)), rng);
  fc1_.bias = Tensor::zeros({cfg.fc_hidden}, true);
  fc7_.weight = uniform_tensor({cfg.feature_dim, cfg.fc_hidden}, std::sqrt(1.0 / static_cast<double>(cfg.fc_hidden)), rng);
  fc7_.bias = Tensor::zeros({cfg.feature_dim}, true);

  const std::size_t h = cfg.lstm_hidden;
  lstm_w_input_ = uniform_tensor({4 * h, cfg.feature_dim}, std::sqrt(1.0 / static_cast<double>(cfg.feature_dim)), rng);
  lstm_w_hidden_ = uniform_tensor({4 * h, h}, std::sqrt(1.0 / static_cast<double>(h)), rng);
  std::vector<double> bias(4 * h, 0.0);
  // Gate order i, f, g, o; forget gate starts open.
  for (std::size_t j = h; j < 2 * h; ++j) bias[j] = 1.0;
  lstm_bias_ = Tensor::from({4 * h}, std::move(bias), true);

  classifier_.weight = uniform_tensor({2, h}, std::sqrt(1.0 / static_cast<double>(h)), rng);
  classifier_.bias = Tensor::zeros({2}, true);
}

std::vector<NamedTensor> NowcastModel::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string n = std::to_string(i + 1);
    out.push_back({"conv" + n + ".weight", conv_[i].weight});
    out.push_back({"bn" + n + ".gamma", conv_[i].gamma});
    out.push_back({"bn" + n + ".beta", conv_[i].beta});
  }
  out.push_back({"fc1.weight", fc1_.weight});
  out.push_back({"fc1.bias", fc1_.bias});
  out.push_back({"fc7.weight", fc7_.weight});
  out.push_back({"fc7.bias", fc7_.bias});
  out.push_back({"lstm.w_input", lstm_w_input_});
  out.push_back({"lstm.w_hidden", lstm_w_hidden_});
  out.push_back({"lstm.bias", lstm_bias_});
  out.push_back({"classifier.weight", classifier_.weight});
  out.push_back({"classifier.bias", classifier_.bias});
  return out;
}

std::vector<Tensor> NowcastModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

std::size_t NowcastModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.size();
  return n;
}

Tensor NowcastModel::cnn_forward(const Tensor& blocks, Mode mode, std::vector<Shape>* trace) const {
  const bool single = blocks.rank() == 3;
  if (!single && blocks.rank() != 4) {
    throw DimensionError("cnn_forward: blocks must be [120,18,18] or [U,120,18,18], got " + shape_str(blocks.shape()));
  }
  const auto& s = blocks.shape();
  const std::size_t off = single ? 0 : 1;
  if (s[off] != ModelConfig::input_channels || s[off + 1] != kWindowPixels || s[off + 2] != kWindowPixels) {
    throw DimensionError("cnn_forward: block must be 120x18x18 (6 variables x 20 levels), got " + shape_str(s));
  }
  if (mode == Mode::train && single) throw ConfigError("cnn_forward: train mode needs a batch of blocks");

  const auto chain = cfg_.spatial_chain();
  auto check = [&](const Tensor& x, std::size_t layer, std::size_t channels) {
    const auto& sh = x.shape();
    const std::size_t h = sh[sh.size() - 2], w = sh.back(), c = sh[sh.size() - 3];
    if (h != chain[layer] || w != chain[layer] || c != channels) {
      throw DimensionError("cnn_forward: layer " + std::to_string(layer) + " produced " + shape_str(sh) +
                           ", expected " + std::to_string(channels) + "x" + std::to_string(chain[layer]) + "x" +
                           std::to_string(chain[layer]));
    }
    if (trace) trace->push_back(sh);
  };

  Tensor x = single ? reshape(blocks, {1, s[0], s[1], s[2]}) : blocks;
  check(x, 0, ModelConfig::input_channels);
  const auto bn_mode = mode == Mode::train ? BatchNormMode::train : BatchNormMode::infer;
  for (std::size_t i = 0; i < 4; ++i) {
    x = conv2d(x, conv_[i].weight, Tensor());
    check(x, i + 1, cfg_.conv_channels[i]);
    x = relu(batch_norm(x, conv_[i].gamma, conv_[i].beta, bn_[i], bn_mode));
  }
  x = max_pool2d(x);
  check(x, 5, cfg_.conv_channels[3]);
  const std::size_t u = x.dim(0);
  x = reshape(x, {u, x.size() / u});
  x = relu(linear(x, fc1_.weight, fc1_.bias));
  x = linear(x, fc7_.weight, fc7_.bias);
  if (trace) trace->push_back(x.shape());
  return single ? reshape(x, {cfg_.feature_dim}) : x;
}

Tensor NowcastModel::lstm_forward(const Tensor& v1, const Tensor& v2, const Tensor& v3) const {
  const std::size_t h = cfg_.lstm_hidden;
  const bool single = v1.rank() == 1;
  Tensor c, hidden;
  for (const Tensor* v : {&v1, &v2, &v3}) {
    if (v->rank() != v1.rank() || v->shape().back() != cfg_.feature_dim || (!single && v->dim(0) != v1.dim(0))) {
      throw DimensionError("lstm_forward: expected " + std::to_string(cfg_.feature_dim) + "-dim inputs of equal batch, got " +
                           shape_str(v->shape()));
    }
    Tensor x = single ? reshape(*v, {1, cfg_.feature_dim}) : *v;
    Tensor gates = linear(x, lstm_w_input_, lstm_bias_);
    if (hidden.defined()) gates = add(gates, linear(hidden, lstm_w_hidden_, Tensor()));
    Tensor i = sigmoid(slice_cols(gates, 0, h));
    Tensor f = sigmoid(slice_cols(gates, h, 2 * h));
    Tensor g = tanh(slice_cols(gates, 2 * h, 3 * h));
    Tensor o = sigmoid(slice_cols(gates, 3 * h, 4 * h));
    c = c.defined() ? add(mul(f, c), mul(i, g)) : mul(i, g);
    hidden = mul(o, tanh(c));
  }
  return single ? reshape(hidden, {h}) : hidden;
}

Tensor NowcastModel::classify(const Tensor& hidden) const {
  Tensor x = hidden.rank() == 1 ? reshape(hidden, {1, hidden.dim(0)}) : hidden;
  return linear(x, classifier_.weight, classifier_.bias);
}

Tensor NowcastModel::forward_logits(const Tensor& blocks,
                                    const std::array<std::vector<std::size_t>, kHistorySteps>& steps, Mode mode) const {
  for (const auto& s : steps) {
    if (s.size() != steps[0].size() || s.empty()) throw DimensionError("forward_logits: step index lists differ in length");
  }
  Tensor features = cnn_forward(blocks, mode);
  Tensor v1 = gather_rows(features, steps[0]);
  Tensor v2 = gather_rows(features, steps[1]);
  Tensor v3 = gather_rows(features, steps[2]);
  return classify(lstm_forward(v1, v2, v3));
}

NowcastModel NowcastModel::clone() const {
  NowcastModel m;
  m.cfg_ = cfg_;
  for (std::size_t i = 0; i < 4; ++i) {
    m.conv_[i] = {conv_[i].weight.clone(), conv_[i].gamma.clone(), conv_[i].beta.clone()};
  }
  m.bn_ = bn_;
  m.fc1_ = {fc1_.weight.clone(), fc1_.bias.clone()};
  m.fc7_ = {fc7_.weight.clone(), fc7_.bias.clone()};
  m.lstm_w_input_ = lstm_w_input_.clone();
  m.lstm_w_hidden_ = lstm_w_hidden_.clone();
  m.lstm_bias_ = lstm_bias_.clone();
  m.classifier_ = {classifier_.weight.clone(), classifier_.bias.clone()};
  for (auto& p : m.parameters()) p.set_requires_grad(true);
  m.normalizer = normalizer;
  m.train_config = train_config;
  m.provenance = provenance;
  return m;
}

void block_to_channels(std::span<const float> block, std::span<double> out) {
  if (block.size() != kBlockValues || out.size() != kBlockValues) {
    throw DimensionError("block must hold " + std::to_string(kBlockValues) + " values, got " + std::to_string(block.size()));
  }
  constexpr std::size_t plane = kWindowPixels * kWindowPixels;
  for (std::size_t v = 0; v < kSampleVariables; ++v) {
    for (std::size_t y = 0; y < kWindowPixels; ++y) {
      for (std::size_t x = 0; x < kWindowPixels; ++x) {
        const float* src = block.data() + block_index(v, y, x, 0);
        for (std::size_t z = 0; z < kLevels; ++z) out[(v * kLevels + z) * plane + y * kWindowPixels + x] = src[z];
      }
    }
  }
}

Tensor make_block_tensor(const SampleSet& set, std::span<const std::size_t> records) {
  std::vector<double> data(records.size() * kBlockValues);
  for (std::size_t i = 0; i < records.size(); ++i) {
    block_to_channels(set.samples.at(records[i]).values, std::span<double>(data).subspan(i * kBlockValues, kBlockValues));
  }
  return Tensor::from({records.size(), ModelConfig::input_channels, kWindowPixels, kWindowPixels}, std::move(data));
}

double model_forward(const NowcastModel& model, std::span<const float> block_t2, std::span<const float> block_t1,
                     std::span<const float> block_t) {
  NoGradGuard no_grad;
  std::vector<double> data(3 * kBlockValues);
  const std::span<const float> blocks[] = {block_t2, block_t1, block_t};
  for (std::size_t i = 0; i < 3; ++i) {
    block_to_channels(blocks[i], std::span<double>(data).subspan(i * kBlockValues, kBlockValues));
  }
  Tensor input = Tensor::from({3, ModelConfig::input_channels, kWindowPixels, kWindowPixels}, std::move(data));
  const Tensor logits = model.forward_logits(input, {{{0}, {1}, {2}}}, Mode::infer);
  return softmax(logits).values()[1];
}

}  // namespace nowcast

#pragma once

// Brute-force reference implementations used by the unit and acceptance
// tests. They are deliberately naive and share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nowcast/model.hpp"
#include "nowcast/storm_synth.hpp"
#include "nowcast/tensor.hpp"

namespace oracle {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// out[o,y,x] = bias[o] + sum_{c,dy,dx} w[o,c,dy,dx] * in[c,y+dy,x+dx]
inline std::vector<double> conv2d(const std::vector<double>& in, std::size_t c, std::size_t h, std::size_t w,
                                  const std::vector<double>& weight, std::size_t o, std::size_t k,
                                  const std::vector<double>& bias) {
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  std::vector<double> out(o * oh * ow);
  for (std::size_t oc = 0; oc < o; ++oc) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = bias.empty() ? 0.0 : bias[oc];
        for (std::size_t ic = 0; ic < c; ++ic) {
          for (std::size_t dy = 0; dy < k; ++dy) {
            for (std::size_t dx = 0; dx < k; ++dx) {
              acc += weight[((oc * c + ic) * k + dy) * k + dx] * in[(ic * h + y + dy) * w + x + dx];
            }
          }
        }
        out[(oc * oh + y) * ow + x] = acc;
      }
    }
  }
  return out;
}

inline std::vector<double> linear(const std::vector<double>& in, const std::vector<double>& weight, std::size_t m,
                                  const std::vector<double>& bias) {
  const std::size_t n = in.size();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = bias.empty() ? 0.0 : bias[i];
    for (std::size_t j = 0; j < n; ++j) acc += weight[i * n + j] * in[j];
    out[i] = acc;
  }
  return out;
}

inline std::vector<double> max_pool(const std::vector<double>& in, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> out(c * (h / 2) * (w / 2));
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h / 2; ++y) {
      for (std::size_t x = 0; x < w / 2; ++x) {
        double m = in[(ch * h + 2 * y) * w + 2 * x];
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, in[(ch * h + 2 * y + dy) * w + 2 * x + dx]);
        }
        out[(ch * (h / 2) + y) * (w / 2) + x] = m;
      }
    }
  }
  return out;
}

// Mann-Whitney statistic over all positive/negative pairs, ties counting one half.
inline double auc_pairwise(std::span<const double> preds, std::span<const int> labels) {
  double wins = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < preds.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (preds[i] > preds[j]) {
        wins += 1.0;
      } else if (preds[i] == preds[j]) {
        wins += 0.5;
      }
    }
  }
  return wins / static_cast<double>(pairs);
}

// Composite maximum of R over a 6x6 region, scanning every voxel.
inline double region_max(const nowcast::GridSequence& g, std::size_t t, std::size_t y0, std::size_t x0) {
  double m = -1e300;
  for (std::size_t z = 0; z < g.levels(); ++z) {
    for (std::size_t y = y0; y < y0 + 6; ++y) {
      for (std::size_t x = x0; x < x0 + 6; ++x) m = std::max(m, double{g.at(t, nowcast::GridVar::R, z, y, x)});
    }
  }
  return m;
}

inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

/// Largest relative error between analytic and central-difference gradients
/// of f with respect to the listed entries of p (f must rebuild its tape).
inline double fd_check(nowcast::Tensor p, const std::function<nowcast::Tensor()>& f, std::span<const std::size_t> entries,
                       double step = 1e-4) {
  p.clear_grad();
  nowcast::Tensor loss = f();
  nowcast::backward(loss);
  const std::vector<double> analytic(p.grad().begin(), p.grad().end());
  double worst = 0;
  for (std::size_t i : entries) {
    const double keep = p.values()[i];
    p.mutable_values()[i] = keep + step;
    const double up = f().item();
    p.mutable_values()[i] = keep - step;
    const double down = f().item();
    p.mutable_values()[i] = keep;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2 * step)));
  }
  return worst;
}

inline std::vector<std::size_t> all_entries(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

/// Shrunken model used for the full-model gradient check.
inline nowcast::ModelConfig tiny_model_config() {
  nowcast::ModelConfig cfg;
  cfg.conv_channels = {8, 8, 8, 8};
  cfg.fc_hidden = 16;
  cfg.lstm_hidden = 8;
  return cfg;
}

struct GroupError {
  std::string name;
  std::size_t checked = 0;
  std::size_t screened = 0;  // entries whose difference quotient straddled a kink
  double max_rel = 0;
};

/// Central differences at `step` against the analytic gradient of f for the
/// given entries of p. An entry is screened out when the quotient at step
/// and at step / 10 disagree, i.e. a ReLU or max-pool kink lies inside the
/// interval; the screen never looks at the analytic value.
inline void fd_screened(nowcast::Tensor p, const std::function<nowcast::Tensor()>& f, std::span<const std::size_t> entries,
                        double step, GroupError& out) {
  p.clear_grad();
  nowcast::backward(f());
  const std::vector<double> analytic(p.grad().begin(), p.grad().end());
  auto quotient = [&](std::size_t i, double h) {
    const double keep = p.values()[i];
    p.mutable_values()[i] = keep + h;
    const double up = f().item();
    p.mutable_values()[i] = keep - h;
    const double down = f().item();
    p.mutable_values()[i] = keep;
    return (up - down) / (2 * h);
  };
  for (std::size_t i : entries) {
    const double coarse = quotient(i, step), fine = quotient(i, step / 10);
    if (relative_error(coarse, fine) > 1e-5) {
      ++out.screened;
      continue;
    }
    ++out.checked;
    out.max_rel = std::max(out.max_rel, relative_error(analytic[i], coarse));
  }
}

/// Cross-entropy of two instances sharing history blocks, differentiated with
/// respect to every parameter group. Groups up to `full_limit` entries are
/// checked exhaustively, larger ones at `samples` random entries.
inline std::vector<GroupError> model_gradient_check(std::uint64_t seed, std::size_t samples = 24,
                                                    std::size_t full_limit = 64, double step = 1e-4) {
  using namespace nowcast;
  std::mt19937_64 rng(seed);
  NowcastModel model(tiny_model_config(), seed);
  // Perturb biases and batch-norm affine terms away from their initial
  // constants so that every group carries a generic gradient.
  for (auto& p : model.named_parameters()) {
    if (p.name.find("weight") == std::string::npos && p.name.find("w_") == std::string::npos) {
      auto v = p.tensor.mutable_values();
      for (auto& x : v) x += std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
    }
  }
  const std::size_t u = 4;
  const Tensor blocks = Tensor::from({u, ModelConfig::input_channels, 18, 18},
                                     random_values(u * ModelConfig::input_channels * 18 * 18, rng));
  const std::array<std::vector<std::size_t>, 3> steps{{{0, 1}, {1, 2}, {2, 3}}};
  const std::vector<int> labels{0, 1};
  auto loss = [&]() { return cross_entropy_loss(model.forward_logits(blocks, steps, Mode::train), labels); };

  std::vector<GroupError> out;
  for (auto& p : model.named_parameters()) {
    std::vector<std::size_t> entries;
    if (p.tensor.size() <= full_limit) {
      entries = all_entries(p.tensor.size());
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, p.tensor.size() - 1);
      for (std::size_t i = 0; i < samples; ++i) entries.push_back(pick(rng));
    }
    for (auto& q : model.parameters()) q.clear_grad();
    GroupError g{p.name};
    fd_screened(p.tensor, loss, entries, step, g);
    out.push_back(g);
  }
  return out;
}

}  // namespace oracle

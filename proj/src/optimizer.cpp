#include "nowcast/optimizer.hpp"

#include <cmath>
#include <string>

#include "nowcast/error.hpp"

namespace nowcast {

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, double beta1, double beta2, double eps)
    : kind_(kind), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
}

void Optimizer::step(std::vector<Tensor>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw UsageError("optimizer step: parameter " + std::to_string(i) + " has no gradient");
  }
  if (kind_ == OptimizerKind::adam && m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
  if (kind_ == OptimizerKind::adam && m_.size() != params.size()) {
    throw UsageError("optimizer step: parameter list changed size between steps");
  }
  ++t_;

  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_values();
    auto g = params[i].grad();
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr_ * g[j];
    } else {
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.size() != w.size()) throw UsageError("optimizer step: parameter " + std::to_string(i) + " changed shape");
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      }
    }
    params[i].zero_grad();
  }
}

}  // namespace nowcast

#include "memlong/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "memlong/errors.hpp"

namespace memlong {

double AdamOptimizer::grad_norm(const std::vector<NamedTensor>& params) {
  double sq = 0.0;
  for (const NamedTensor& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

double AdamOptimizer::clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (!std::isfinite(norm)) throw NumericalError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const float factor = static_cast<float>(max_norm / (norm + 1e-6));
    for (const NamedTensor& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (float& g : p.tensor.ensure_grad()) g *= factor;
    }
  }
  return norm;
}

void AdamOptimizer::step(const std::vector<NamedTensor>& params, double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const float step_size = static_cast<float>(lr / c1);
  const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  const float eps = static_cast<float>(config_.adam_eps);
  const float decay = static_cast<float>(lr * config_.weight_decay);
  const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
  for (const NamedTensor& p : params) {
    Tensor t = p.tensor;
    auto w = t.data();
    Moments& mo = moments_[p.name];
    if (mo.m.size() != w.size()) {
      mo.m.assign(w.size(), 0.0f);
      mo.v.assign(w.size(), 0.0f);
    }
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    for (size_t i = 0; i < w.size(); ++i) {
      mo.m[i] = fb1 * mo.m[i] + (1.0f - fb1) * g[i];
      mo.v[i] = fb2 * mo.v[i] + (1.0f - fb2) * g[i] * g[i];
      const float denom = std::sqrt(mo.v[i]) * inv_sqrt_c2 + eps;
      w[i] -= step_size * mo.m[i] / denom + decay * w[i];
    }
  }
}

double learning_rate_at(const TrainConfig& config, int64_t step) {
  const double base = config.lr;
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  const int64_t decay_steps = std::max<int64_t>(1, config.steps - config.warmup_steps);
  const double progress =
      std::clamp(static_cast<double>(step - config.warmup_steps) / static_cast<double>(decay_steps), 0.0, 1.0);
  return base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace memlong

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "memlong/config.hpp"
#include "memlong/model.hpp"

namespace memlong {

// Adam with decoupled weight decay. Moments are keyed by parameter name, so
// the state survives changes in which parameters are trainable.
class AdamOptimizer {
 public:
  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
  };

  explicit AdamOptimizer(const TrainConfig& config) : config_(config) {}

  // Global L2 norm of the gradients of `params` (missing gradients count as 0).
  static double grad_norm(const std::vector<NamedTensor>& params);
  // Scales gradients so their global norm is at most max_norm; returns the
  // norm before clipping. Throws NumericalError on a non-finite norm.
  static double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm);

  // One update of every parameter in `params` with learning rate `lr`.
  void step(const std::vector<NamedTensor>& params, double lr);

  int64_t steps_taken() const { return t_; }
  void set_steps_taken(int64_t t) { t_ = t; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  const TrainConfig& config() const { return config_; }

 private:
  TrainConfig config_;
  int64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

// Linear warmup to the base rate, then cosine decay to 10% of it at
// config.steps.
double learning_rate_at(const TrainConfig& config, int64_t step);

}  // namespace memlong

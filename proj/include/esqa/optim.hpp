#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "esqa/tensor.hpp"

namespace esqa {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// First/second moments for one parameter.
struct MomentState {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  AdamWConfig config;
  long step = 0;
  std::vector<MomentState> moments;
};

// One AdamW update over value/gradient spans. Decay is decoupled:
// p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
// `step` is the already-incremented step count used for bias correction.
void adamw_update(std::span<double> param, std::span<const double> grad, MomentState& moments,
                  const AdamWConfig& config, long step, double lr);

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config = {});

  // Applies one update to every parameter that has a gradient. Parameters
  // with no gradient recorded this step are treated as having zero gradient.
  void step(double lr);
  void zero_grad();

  const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  OptimizerState state_;
};

// Global L2 norm of the gradients; rescales them in place when above max_norm.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

struct LrSchedule {
  double peak_lr = 3e-4;
  double min_lr = 0.0;
  long warmup_steps = 0;
  long cycle_length = 1000;
  double restart_multiplier = 1.0;
};

// Linear warmup from 0 to peak, then cosine decay to min_lr within each cycle;
// cycles restart at peak and grow by restart_multiplier.
double lr_at(const LrSchedule& schedule, long step);

}  // namespace esqa

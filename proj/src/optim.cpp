#include "esqa/optim.hpp"

#include <cmath>
#include <numbers>

#include "esqa/error.hpp"

namespace esqa {

void adamw_update(std::span<double> param, std::span<const double> grad, MomentState& moments,
                  const AdamWConfig& config, long step, double lr) {
  if (grad.size() != param.size() || moments.m.size() != param.size() ||
      moments.v.size() != param.size()) {
    throw ShapeError("adamw: parameter, gradient and moment sizes disagree");
  }
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    moments.m[i] = config.beta1 * moments.m[i] + (1.0 - config.beta1) * g;
    moments.v[i] = config.beta2 * moments.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = moments.m[i] / c1;
    const double v_hat = moments.v[i] / c2;
    param[i] -= lr * (m_hat / (std::sqrt(v_hat) + config.eps) + config.weight_decay * param[i]);
  }
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config) : params_(std::move(params)) {
  state_.config = config;
  state_.moments.reserve(params_.size());
  for (const auto& p : params_) {
    state_.moments.push_back({std::vector<double>(p.size(), 0.0), std::vector<double>(p.size(), 0.0)});
  }
}

void AdamW::step(double lr) {
  ++state_.step;
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    std::span<const double> g = p.grad();
    if (!p.has_grad()) {
      zeros.assign(p.size(), 0.0);
      g = zeros;
    }
    adamw_update(p.data_mut(), g, state_.moments[i], state_.config, state_.step, lr);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      auto& g = p.node()->grad;
      for (auto& x : g) x *= s;
    }
  }
  return norm;
}

double lr_at(const LrSchedule& s, long step) {
  if (step < 0) step = 0;
  if (s.warmup_steps > 0 && step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  double tau = static_cast<double>(step - s.warmup_steps);
  double cycle = static_cast<double>(std::max<long>(s.cycle_length, 1));
  const double mult = std::max(s.restart_multiplier, 1.0);
  while (tau >= cycle) {
    tau -= cycle;
    cycle *= mult;
  }
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * tau / cycle));
}

}  // namespace esqa

#pragma once

// AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule.

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <span>
#include <string>

#include "femae/autodiff.hpp"
#include "femae/errors.hpp"
#include "femae/tensor.hpp"

namespace femae {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-2;
};

/// First/second moments keyed by parameter name, plus the number of steps taken.
template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

/// One AdamW update over every trainable parameter. Frozen parameters are left untouched.
template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, AdamState<T>& state, double lr, const AdamConfig& cfg) {
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    if (p->grad.shape() != p->value.shape()) {
      throw UsageError("adamw_step: gradient of '" + p->name + "' has shape " + shape_str(p->grad.shape()) +
                       ", parameter has " + shape_str(p->value.shape()));
    }
    auto mit = state.m.try_emplace(p->name, p->value.shape()).first;
    auto vit = state.v.try_emplace(p->name, p->value.shape()).first;
    if (mit->second.shape() != p->value.shape() || vit->second.shape() != p->value.shape()) {
      throw UsageError("adamw_step: optimizer state for '" + p->name + "' has the wrong shape");
    }
    auto w = p->value.data();
    auto g = p->grad.data();
    auto m = mit->second.data();
    auto v = vit->second.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      double wi = static_cast<double>(w[i]);
      wi -= lr * cfg.weight_decay * wi;
      wi -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
      w[i] = static_cast<T>(wi);
    }
  }
}

/// Linear warmup from 0 to base_lr, then cosine decay to base_lr / 100 at total_steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  if (warmup_steps >= total_steps && total_steps > 0) {
    throw ConfigError("warmup_steps must be smaller than the total step count");
  }
  const double floor = base_lr * 1e-2;
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return floor;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return floor + 0.5 * (base_lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace femae

// Copyright 2026 The UBM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef UBM_NN_OPTIM_HPP
#define UBM_NN_OPTIM_HPP

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "ubm/common.hpp"
#include "ubm/nn/tensor.hpp"

namespace ubm::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

/// Moment estimates keyed by parameter name, plus the step counter.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::size_t t = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

/// One bias-corrected Adam update over `params` using their current
/// gradients. Weight decay, when non-zero, is decoupled (AdamW).
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, double lr) {
  if (lr < 0.0) throw Error("adam_step: negative learning rate");
  const auto& c = state.config;
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  const T b1 = T(c.beta1), b2 = T(c.beta2);
  for (Parameter<T>* p : params) {
    auto& m = state.m[p->name];
    auto& v = state.v[p->name];
    if (m.empty()) m = Tensor<T>::zeros_like(p->value);
    if (v.empty()) v = Tensor<T>::zeros_like(p->value);
    if (!m.same_shape(p->value) || !v.same_shape(p->value))
      throw DimensionError("adam_step: moment shape mismatch for '" + p->name + "'");
    auto& w = p->value;
    const auto& g = p->grad;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      double step = mhat / (std::sqrt(vhat) + c.epsilon);
      if (c.weight_decay != 0.0) step += c.weight_decay * static_cast<double>(w[i]);
      w[i] -= T(lr * step);
    }
  }
}

struct ScheduleConfig {
  std::size_t total_steps = 1;
  double warmup_fraction = 0.10;
  double peak_lr = 3e-5;

  void validate() const {
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
      throw ValidationError("warmup_fraction", "must lie in (0, 1)");
    if (!(peak_lr > 0.0)) throw ValidationError("peak_lr", "must be positive");
  }
};

/// Linear warmup from 0 to peak over the first warmup_fraction of steps,
/// then linear decay to 0 at total_steps. Steps past the end yield 0.
inline double lr_at(std::size_t step, const ScheduleConfig& cfg) {
  cfg.validate();
  if (step > cfg.total_steps) {
    warn("lr_at: step " + std::to_string(step) + " beyond total_steps " + std::to_string(cfg.total_steps));
    return 0.0;
  }
  const double total = static_cast<double>(cfg.total_steps);
  const double warm = cfg.warmup_fraction * total;
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.peak_lr * s / warm;
  if (total <= warm) return cfg.peak_lr;
  return cfg.peak_lr * (total - s) / (total - warm);
}

}  // namespace ubm::nn

#endif  // UBM_NN_OPTIM_HPP

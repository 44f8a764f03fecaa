#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>

#include "gun/params.hpp"

namespace gun {

// Classic (non-Nesterov) momentum state, one velocity buffer per parameter.
struct OptimState {
  std::map<std::string, Tensor<double>> velocity;
  double momentum = 0.9;
  double base_lr = 0.001;
  std::size_t epoch = 0;

  static OptimState for_params(const ParamStore& params, double momentum,
                               double base_lr) {
    OptimState s;
    s.momentum = momentum;
    s.base_lr = base_lr;
    for (const auto& [name, t] : params.params()) {
      s.velocity.emplace(name, Tensor<double>::zeros_like(t));
    }
    return s;
  }
};

// v <- mu * v + g ; w <- w - lr * v
inline void sgd_momentum_step(ParamStore& params,
                              const std::map<std::string, Tensor<double>>& grads,
                              OptimState& state, double lr) {
  if (!(lr >= 0.0)) throw ValidationError("sgd_momentum_step: lr must be non-negative");
  for (auto& [name, w] : params.params()) {
    auto g = grads.find(name);
    if (g == grads.end()) {
      throw ValidationError("sgd_momentum_step: no gradient for '" + name + "'");
    }
    auto [vit, inserted] = state.velocity.try_emplace(name, Tensor<double>::zeros_like(w));
    auto& v = vit->second;
    if (g->second.shape() != w.shape() || v.shape() != w.shape()) {
      throw ShapeError("sgd_momentum_step: shape mismatch for '" + name + "': param " +
                       to_string(w.shape()) + ", grad " + to_string(g->second.shape()));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = state.momentum * v[i] + g->second[i];
      w[i] -= lr * v[i];
    }
  }
}

// Step policy: base_lr * 10^-floor(epoch / step_epochs).
inline double step_lr(std::size_t epoch, double base_lr, std::size_t step_epochs = 100) {
  if (step_epochs == 0) throw ValidationError("step_lr: step_epochs must be positive");
  const auto drops = static_cast<int>(epoch / step_epochs);
  return base_lr * std::pow(10.0, -drops);
}

}  // namespace gun

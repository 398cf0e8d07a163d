#pragma once

// Adam with bias correction.

#include <cmath>
#include <cstdint>
#include <vector>

#include "dynast/config.hpp"
#include "dynast/numerics.hpp"

namespace dynast {

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor> m, v;  // one per parameter, store order
};

class Adam {
 public:
  Adam(const TrainConfig& cfg, const ParameterStore& store) : cfg_(cfg) {
    for (const auto& p : store) {
      state_.m.emplace_back(p.var.shape());
      state_.v.emplace_back(p.var.shape());
    }
  }

  Adam(const TrainConfig& cfg, AdamState state) : cfg_(cfg), state_(std::move(state)) {}

  // grads[i] pairs with the i-th parameter of `store`; an empty tensor means no gradient.
  void step(const ParameterStore& store, const std::vector<Tensor>& grads) {
    if (grads.size() != store.size() || state_.m.size() != store.size()) {
      throw ShapeError("Adam::step: " + std::to_string(grads.size()) + " gradients for " +
                       std::to_string(store.size()) + " parameters");
    }
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (grads[i].empty()) continue;
      Tensor& w = store.params()[i].var.mutable_value();
      Tensor& m = state_.m[i];
      Tensor& v = state_.v[i];
      for (std::size_t e = 0; e < w.size(); ++e) {
        const double g = grads[i][e];
        m[e] = cfg_.beta1 * m[e] + (1.0 - cfg_.beta1) * g;
        v[e] = cfg_.beta2 * v[e] + (1.0 - cfg_.beta2) * g * g;
        w[e] -= cfg_.lr * (m[e] / c1) / (std::sqrt(v[e] / c2) + cfg_.adam_eps);
      }
    }
  }

  const AdamState& state() const { return state_; }

 private:
  TrainConfig cfg_;
  AdamState state_;
};

}  // namespace dynast

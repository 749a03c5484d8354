#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ipnet/errors.hpp"

namespace ipnet {

enum class OptKind { rmsprop, adam };

/// First/second-moment buffers for one parameter vector.
/// rmsprop: decay 0.99, eps 1e-8. adam: β = (0.9, 0.999), eps 1e-8.
struct MomentState {
  std::vector<double> m;  // first moment (adam only)
  std::vector<double> v;  // second moment
  long step = 0;

  void ensure_size(std::size_t n) {
    if (v.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
      step = 0;
    }
  }
};

inline void adam_update(std::span<double> param, std::span<const double> grad,
                        MomentState& state, double lr, double beta1 = 0.9,
                        double beta2 = 0.999, double eps = 1e-8) {
  if (param.size() != grad.size()) {
    throw ConfigError("adam_update: param/grad size mismatch");
  }
  state.ensure_size(param.size());
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

inline void rmsprop_update(std::span<double> param, std::span<const double> grad,
                           MomentState& state, double lr, double decay = 0.99,
                           double eps = 1e-8) {
  if (param.size() != grad.size()) {
    throw ConfigError("rmsprop_update: param/grad size mismatch");
  }
  state.ensure_size(param.size());
  state.step += 1;
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.v[i] = decay * state.v[i] + (1.0 - decay) * grad[i] * grad[i];
    param[i] -= lr * grad[i] / (std::sqrt(state.v[i]) + eps);
  }
}

}  // namespace ipnet

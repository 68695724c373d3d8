#pragma once

#include <cmath>
#include <cstdint>

#include "r2i/params.hpp"

namespace r2i {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment accumulators keyed like the parameters they track.
template <class T>
struct AdamState {
  ParamSet<T> m;
  ParamSet<T> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update. A missing gradient entry is treated as zero.
template <class T>
void adam_step(ParamSet<T>& params, const Gradients<T>& grads, AdamState<T>& state, const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw std::out_of_range("adam_step: gradient for unknown parameter " + name);
    require_same_shape(params.at(name), g, "adam_step");
  }
  for (const auto& [name, p] : params) {
    if (!state.m.contains(name)) {
      state.m.add(name, BasicTensor<T>(p.shape()));
      state.v.add(name, BasicTensor<T>(p.shape()));
    }
    require_same_shape(state.m.at(name), p, "adam_step");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (auto& [name, p] : params) {
    auto& m = state.m.at(name);
    auto& v = state.v.at(name);
    auto it = grads.find(name);
    const T* g = it == grads.end() ? nullptr : it->second.ptr();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T gi = g ? g[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const double mhat = double(m[i]) / bc1;
      const double vhat = double(v[i]) / bc2;
      p[i] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace r2i

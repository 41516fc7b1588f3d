#pragma once

// Adam with decoupled weight decay, bias-corrected moments, global-norm
// gradient clipping, and checkpoint round-tripping of optimizer state.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "swindet/checkpoint.hpp"
#include "swindet/tensor.hpp"

namespace swindet {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<T>> m, v;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(std::vector<std::pair<std::string, Tensor<T>>>& params, double max_norm) {
  double sq = 0;
  for (auto& [name, p] : params)
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& [name, p] : params)
      for (T& g : p.grad()) g *= scale;
  }
  return norm;
}

template <typename T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>>>& params, AdamState<T>& state,
               const AdamConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    std::vector<T>& val = p.value();
    const std::vector<T>& grad = p.grad();
    std::vector<T>& m = state.m[name];
    std::vector<T>& v = state.v[name];
    if (m.empty()) m.assign(val.size(), T(0));
    if (v.empty()) v.assign(val.size(), T(0));
    if (m.size() != val.size() || grad.size() != val.size())
      throw usage_error("adam_step: state size mismatch for " + name);
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1 - cfg.beta1) * g;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps) +
                            cfg.weight_decay * static_cast<double>(val[i]);
      val[i] = static_cast<T>(static_cast<double>(val[i]) - cfg.lr * update);
    }
  }
}

template <typename T>
void adam_state_to_checkpoint(const AdamState<T>& state, Checkpoint& ckpt) {
  for (const auto& [name, m] : state.m)
    ckpt.put("opt.m." + name, Shape{static_cast<std::int64_t>(m.size())}, m);
  for (const auto& [name, v] : state.v)
    ckpt.put("opt.v." + name, Shape{static_cast<std::int64_t>(v.size())}, v);
  ckpt.meta["opt_step"] = state.step;
}

template <typename T>
AdamState<T> adam_state_from_checkpoint(const Checkpoint& ckpt) {
  AdamState<T> state;
  if (ckpt.meta.contains("opt_step")) state.step = ckpt.meta.at("opt_step").get<std::int64_t>();
  for (const std::string& name : ckpt.names()) {
    if (name.rfind("opt.m.", 0) == 0)
      state.m[name.substr(6)] = ckpt.template get<T>(name).second;
    else if (name.rfind("opt.v.", 0) == 0)
      state.v[name.substr(6)] = ckpt.template get<T>(name).second;
  }
  return state;
}

}  // namespace swindet

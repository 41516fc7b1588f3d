#pragma once

// Finite-difference verification of backward passes. The loss closure must
// rebuild the graph from the current parameter values on every call, since
// perturbation works by editing the shared value buffers in place.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "swindet/tensor.hpp"

namespace swindet {

template <typename T>
struct GradCheckReport {
  T max_rel_err = 0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  T worst_analytic = 0;
  T worst_numeric = 0;
  std::int64_t checked = 0;
};

// Central differences with h = eps * max(1, |x|); relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-4). The denominator
// floor reflects what central differences can resolve: with loss values of
// order one and h ~ 1e-6, the difference quotient carries ~1e-10 of absolute
// noise, so gradients far below 1e-4 are effectively compared absolutely.
// max_entries_per_tensor == 0 checks every entry; otherwise entries are
// taken at an even stride so large tensors stay affordable.
template <typename T, typename LossFn>
GradCheckReport<T> grad_check(LossFn&& loss_fn, std::vector<std::pair<std::string, Tensor<T>>> params,
                              T eps = T(1e-6), std::int64_t max_entries_per_tensor = 0) {
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) throw usage_error("grad_check: parameter " + name + " has no grad");
    p.zero_grad();
  }
  Tensor<T> loss = loss_fn();
  loss.backward();
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, p] : params) analytic.push_back(p.grad());

  GradCheckReport<T> rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].second.value();
    const std::int64_t n = static_cast<std::int64_t>(vals.size());
    const std::int64_t stride =
        (max_entries_per_tensor <= 0 || n <= max_entries_per_tensor)
            ? 1
            : (n + max_entries_per_tensor - 1) / max_entries_per_tensor;
    for (std::int64_t i = 0; i < n; i += stride) {
      const T x = vals[i];
      const T h = eps * std::max(T(1), std::fabs(x));
      vals[i] = x + h;
      const T lp = loss_fn().item();
      vals[i] = x - h;
      const T lm = loss_fn().item();
      vals[i] = x;
      const T cd = (lp - lm) / (2 * h);
      const T an = analytic[pi][i];
      const T denom = std::max({std::fabs(an), std::fabs(cd), T(1e-4)});
      const T rel = std::fabs(an - cd) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = params[pi].first;
        rep.worst_index = i;
        rep.worst_analytic = an;
        rep.worst_numeric = cd;
      }
    }
  }
  return rep;
}

}  // namespace swindet

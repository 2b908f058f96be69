#pragma once

#include <cmath>
#include <vector>

#include "fewshot/graph.hpp"

namespace fewshot {

// Relative error as used everywhere in the gradient suite:
// |analytic - numeric| / max(1, |numeric|), maximized over coordinates.
template <typename T>
T grad_rel_err(T analytic, T numeric) {
  return std::abs(analytic - numeric) / std::max(T(1), std::abs(numeric));
}

// Central-difference check of d(loss)/d(input) for a scalar-valued builder.
// `build` is called with a fresh tape for every evaluation, so it must
// derive everything from the given input node (plus captured constants).
// Returns the max relative error over all input coordinates.
template <typename T, typename BuildFn>
T finite_diff_check(BuildFn&& build, const Tensor<T>& point, T eps) {
  Tensor<T> analytic(point.shape());
  {
    Graph<T> g;
    Var x = g.input(point, true);
    Var loss = build(g, x);
    g.backward(loss);
    if (g.grad(x).numel() != 0) analytic = g.grad(x);
  }
  auto eval_at = [&](const Tensor<T>& pt) -> T {
    Graph<T> g;
    Var x = g.input(pt, false);
    Var loss = build(g, x);
    if (g.value(loss).numel() != 1) throw ContractError("finite_diff_check: non-scalar loss");
    return g.value(loss)[0];
  };
  T max_err = T(0);
  Tensor<T> pt = point;
  for (size_t i = 0; i < pt.numel(); ++i) {
    const T saved = pt[i];
    pt[i] = saved + eps;
    const T fp = eval_at(pt);
    pt[i] = saved - eps;
    const T fm = eval_at(pt);
    pt[i] = saved;
    const T numeric = (fp - fm) / (T(2) * eps);
    max_err = std::max(max_err, grad_rel_err(analytic[i], numeric));
  }
  return max_err;
}

// Same idea for model parameters: `build` constructs the scalar loss from
// the current parameter values (Graph::param snapshots them), so perturbing
// Parameter::value and rebuilding evaluates the perturbed loss.
// Checks every coordinate of every listed parameter.
template <typename T, typename BuildFn>
T finite_diff_check_params(BuildFn&& build, const std::vector<Parameter<T>*>& params, T eps) {
  for (auto* p : params) p->zero_grad();
  std::vector<Tensor<T>> analytic;
  {
    Graph<T> g;
    Var loss = build(g);
    g.backward(loss);
    for (auto* p : params) analytic.push_back(p->grad);
  }
  auto eval = [&]() -> T {
    Graph<T> g;
    Var loss = build(g);
    if (g.value(loss).numel() != 1)
      throw ContractError("finite_diff_check_params: non-scalar loss");
    return g.value(loss)[0];
  };
  T max_err = T(0);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& v = params[pi]->value;
    for (size_t i = 0; i < v.numel(); ++i) {
      const T saved = v[i];
      v[i] = saved + eps;
      const T fp = eval();
      v[i] = saved - eps;
      const T fm = eval();
      v[i] = saved;
      const T numeric = (fp - fm) / (T(2) * eps);
      max_err = std::max(max_err, grad_rel_err(analytic[pi][i], numeric));
    }
  }
  return max_err;
}

}  // namespace fewshot

// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dualedit/autograd.hpp"
#include "dualedit/tensor.hpp"

namespace dualedit::testing {

using ScalarFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

struct GradComparison {
  double max_abs = 0.0;  // largest |analytic - numeric|
  double max_rel = 0.0;  // largest |a - n| / max(|a|, |n|) over entries with a nonzero side
  double scale = 0.0;    // largest |numeric| seen
};

// Compares backprop gradients of a scalar function with central differences.
inline GradComparison gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-6) {
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(ad::parameter(t));
  ad::Var y = f(vars);
  ad::backward(y);
  GradComparison out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = vars[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<ad::Var> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          probe.push_back(ad::constant(std::move(t)));
        }
        ad::NoGradGuard no_grad;
        return f(probe).item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      const double diff = std::abs(numeric - analytic[i]);
      out.max_abs = std::max(out.max_abs, diff);
      out.scale = std::max(out.scale, std::abs(numeric));
      const double denom = std::max(std::abs(numeric), std::abs(analytic[i]));
      if (denom > 0.0) out.max_rel = std::max(out.max_rel, diff / denom);
    }
  }
  return out;
}

// Projects a tensor-valued output onto fixed weights so it can be gradchecked.
inline ad::Var project(const ad::Var& y, const Tensor& weights) {
  return ad::sum(ad::mul(y, ad::constant(weights.reshaped(y.shape()))));
}

}  // namespace dualedit::testing

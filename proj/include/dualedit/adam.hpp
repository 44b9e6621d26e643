// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "dualedit/autograd.hpp"

namespace dualedit {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adaptive-moment optimizer over a fixed list of leaf variables.
class Adam {
 public:
  Adam(std::vector<ad::Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (!params_[k].has_grad()) continue;
      const Tensor g = params_[k].grad();
      Tensor& w = params_[k].mutable_value();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] + cfg_.weight_decay * w[i];
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
        w[i] -= cfg_.learning_rate * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + cfg_.eps);
      }
    }
  }

  int steps_taken() const { return t_; }
  const std::vector<ad::Var>& params() const { return params_; }

 private:
  std::vector<ad::Var> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  int t_ = 0;
};

}  // namespace dualedit

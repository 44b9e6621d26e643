// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "dualedit/autograd.hpp"
#include "dualedit/error.hpp"
#include "dualedit/tensor.hpp"

namespace dualedit {

// Timestep value standing for "fully denoised"; alpha_bar there is 1.
inline constexpr int kCleanTimestep = -1;

struct ScheduleSpec {
  int num_train_steps = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  int inference_steps = 50;
};

/// Cumulative signal levels of a discrete diffusion process plus the
/// strictly decreasing grid of timesteps visited at inference.
///
/// Sampling steps are numbered 1..S in denoising order: step 1 runs at the
/// noisiest grid timestep and step S lands on the clean latent.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(const ScheduleSpec& spec) {
    if (spec.num_train_steps < 2) throw InvalidArgument("schedule needs at least 2 training steps");
    if (!(spec.beta_start > 0.0) || !(spec.beta_end < 1.0) || spec.beta_start >= spec.beta_end) {
      throw InvalidArgument("schedule betas must satisfy 0 < beta_start < beta_end < 1");
    }
    std::vector<double> abar(spec.num_train_steps);
    double prod = 1.0;
    for (int i = 0; i < spec.num_train_steps; ++i) {
      const double beta =
          spec.beta_start + (spec.beta_end - spec.beta_start) * i / static_cast<double>(spec.num_train_steps - 1);
      prod *= 1.0 - beta;
      abar[i] = prod;
    }
    NoiseSchedule s(spec.num_train_steps, std::move(abar), uniform_grid(spec.num_train_steps, spec.inference_steps));
    s.spec_ = spec;
    return s;
  }

  NoiseSchedule(int num_train_steps, std::vector<double> alphas_cumprod, std::vector<int> inference_timesteps)
      : num_train_steps_(num_train_steps),
        alphas_cumprod_(std::move(alphas_cumprod)),
        timesteps_(std::move(inference_timesteps)) {
    spec_.num_train_steps = num_train_steps;
    spec_.inference_steps = static_cast<int>(timesteps_.size());
    validate();
  }

  static std::vector<int> uniform_grid(int num_train_steps, int steps) {
    if (steps < 0 || steps > num_train_steps) throw InvalidArgument("inference steps must lie in [0, num_train_steps]");
    std::vector<int> grid;
    if (steps == 0) return grid;
    const int ratio = num_train_steps / steps;
    const int offset = ratio > 1 ? 1 : 0;
    for (int k = steps - 1; k >= 0; --k) grid.push_back(k * ratio + offset);
    return grid;
  }

  int num_train_steps() const { return num_train_steps_; }
  int num_inference_steps() const { return static_cast<int>(timesteps_.size()); }
  const std::vector<double>& alphas_cumprod() const { return alphas_cumprod_; }
  const std::vector<int>& inference_timesteps() const { return timesteps_; }
  const ScheduleSpec& spec() const { return spec_; }

  double alpha_bar(int t) const {
    if (t == kCleanTimestep) return 1.0;
    if (t < 0 || t >= num_train_steps_) throw InvalidArgument("timestep " + std::to_string(t) + " out of range");
    return alphas_cumprod_[t];
  }

  // Grid timestep of sampling step s in [1, S].
  int timestep_of(int step) const {
    check_step(step);
    return timesteps_[step - 1];
  }
  // Timestep the sampler lands on after step s (kCleanTimestep after the last).
  int prev_timestep_of(int step) const {
    check_step(step);
    return step == num_inference_steps() ? kCleanTimestep : timesteps_[step];
  }

  std::string id() const {
    std::ostringstream os;
    os.precision(17);
    os << "linear:" << spec_.num_train_steps << ':' << spec_.beta_start << ':' << spec_.beta_end << ':'
       << num_inference_steps();
    return os.str();
  }

 private:
  void check_step(int step) const {
    if (step < 1 || step > num_inference_steps()) {
      throw InvalidArgument("sampling step " + std::to_string(step) + " outside [1, " +
                            std::to_string(num_inference_steps()) + "]");
    }
  }

  void validate() const {
    if (num_train_steps_ <= 0 || static_cast<int>(alphas_cumprod_.size()) != num_train_steps_) {
      throw InvalidArgument("alphas_cumprod length must equal num_train_steps");
    }
    for (int i = 0; i < num_train_steps_; ++i) {
      const double a = alphas_cumprod_[i];
      if (!(a > 0.0 && a <= 1.0)) throw InvalidArgument("alpha_bar values must lie in (0, 1]");
      if (i > 0 && !(a < alphas_cumprod_[i - 1])) throw InvalidArgument("alpha_bar must be strictly decreasing");
    }
    if (!(alphas_cumprod_.front() > 0.99)) throw InvalidArgument("alpha_bar at the first step must exceed 0.99");
    if (!(alphas_cumprod_.back() < 0.05)) throw InvalidArgument("alpha_bar at the last step must be below 0.05");
    for (std::size_t i = 0; i < timesteps_.size(); ++i) {
      if (timesteps_[i] < 0 || timesteps_[i] >= num_train_steps_) {
        throw InvalidArgument("inference timestep out of range");
      }
      if (i > 0 && timesteps_[i] >= timesteps_[i - 1]) {
        throw InvalidArgument("inference timesteps must be strictly decreasing");
      }
    }
  }

  int num_train_steps_;
  std::vector<double> alphas_cumprod_;
  std::vector<int> timesteps_;
  ScheduleSpec spec_;
};

/// A latent with its trajectory index (0 = clean, S = fully noised).
struct Latent {
  Tensor data;
  int step_tag = 0;

  bool finite() const { return data.all_finite(); }
};

struct StepCoefficients {
  double k1 = 1.0;  // multiplies the current latent
  double k2 = 0.0;  // multiplies the predicted noise
};

// Deterministic (sigma = 0) DDIM coefficients for moving from noise level
// abar_t down to abar_prev.
inline StepCoefficients step_coefficients(double abar_t, double abar_prev) {
  if (!(abar_t > 0.0 && abar_t <= 1.0 && abar_prev > 0.0 && abar_prev <= 1.0)) {
    throw InvalidArgument("alpha_bar values must lie in (0, 1]");
  }
  StepCoefficients c;
  c.k1 = std::sqrt(abar_prev / abar_t);
  c.k2 = std::sqrt(1.0 - abar_prev) - std::sqrt(abar_prev * (1.0 - abar_t) / abar_t);
  return c;
}

inline StepCoefficients step_coefficients(int t, int t_prev, const NoiseSchedule& sched) {
  if (t_prev >= t) {
    throw InvalidArgument("t_prev (" + std::to_string(t_prev) + ") must be earlier in noise than t (" +
                          std::to_string(t) + ")");
  }
  return step_coefficients(sched.alpha_bar(t), sched.alpha_bar(t_prev));
}

inline StepCoefficients step_coefficients_for(int step, const NoiseSchedule& sched) {
  return step_coefficients(sched.timestep_of(step), sched.prev_timestep_of(step), sched);
}

// a*x + b*y for both plain tensors and graph variables.
inline Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
  x.require_same_shape(y, "axpby");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}
inline ad::Var axpby(double a, const ad::Var& x, double b, const ad::Var& y) { return ad::lin_comb(a, x, b, y); }

namespace detail {
inline const Tensor& values_of(const Tensor& t) { return t; }
inline const Tensor& values_of(const ad::Var& v) { return v.value(); }
}  // namespace detail

template <class T>
T ddim_step(const T& z_t, const T& eps_pred, const StepCoefficients& c) {
  if (!detail::values_of(eps_pred).all_finite()) throw NumericFailure("ddim_step: non-finite noise prediction");
  return axpby(c.k1, z_t, c.k2, eps_pred);
}

template <class T>
T ddim_invert_step(const T& z_prev, const T& eps_pred, const StepCoefficients& c) {
  if (c.k1 == 0.0) throw InvalidArgument("ddim_invert_step: k1 must be nonzero");
  if (!detail::values_of(eps_pred).all_finite()) throw NumericFailure("ddim_invert_step: non-finite noise prediction");
  return axpby(1.0 / c.k1, z_prev, -c.k2 / c.k1, eps_pred);
}

inline Latent ddim_step(const Latent& z_t, const Tensor& eps_pred, const StepCoefficients& c) {
  return Latent{ddim_step(z_t.data, eps_pred, c), z_t.step_tag - 1};
}

inline Latent ddim_invert_step(const Latent& z_prev, const Tensor& eps_pred, const StepCoefficients& c) {
  return Latent{ddim_invert_step(z_prev.data, eps_pred, c), z_prev.step_tag + 1};
}

inline Tensor forward_noise(const Tensor& z0, double abar, const Tensor& eps) {
  if (z0.shape() != eps.shape()) {
    throw InvalidArgument("forward_noise: shape mismatch " + shape_str(z0.shape()) + " vs " + shape_str(eps.shape()));
  }
  return axpby(std::sqrt(abar), z0, std::sqrt(1.0 - abar), eps);
}

inline Latent forward_noise(const Latent& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  return Latent{forward_noise(z0.data, sched.alpha_bar(t), eps), z0.step_tag};
}

}  // namespace dualedit

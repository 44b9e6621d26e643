// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dualedit/autograd.hpp"
#include "dualedit/error.hpp"
#include "dualedit/scheduler.hpp"
#include "dualedit/tensor.hpp"

namespace dualedit {

/// Prompt conditioning handed to a noise predictor. The null condition is a
/// fixed all-zero array of the backend's caption length.
struct TextCondition {
  Tensor embedding;  // [tokens, dim]
  bool is_null = false;
};

/// One self-attention layer of a backend, with the frozen projections used by
/// the source branch and target-branch clones that an edit may tune.
struct SelfAttentionSite {
  int layer_index = 0;
  int head_count = 1;
  int key_dim = 0;
  ad::Var w_q, w_k, w_v;
  ad::Var w_q_t, w_k_t, w_v_t;

  // Fresh clone leaves holding copies of the frozen values, not trainable.
  void reset_clones() {
    w_q_t = ad::constant(w_q.value());
    w_k_t = ad::constant(w_k.value());
    w_v_t = ad::constant(w_v.value());
  }

  bool clones_equal_frozen() const {
    return w_q_t.value() == w_q.value() && w_k_t.value() == w_k.value() && w_v_t.value() == w_v.value();
  }
};

namespace detail {

inline ad::Var column_block(const ad::Var& m, int begin, int end) {
  return ad::transpose(ad::slice0(ad::transpose(m), begin, end));
}

}  // namespace detail

// softmax(Q K^T / sqrt(d_head)) V, heads split along the feature axis.
inline ad::Var scaled_dot_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, int heads = 1) {
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw ConfigError("attention feature shapes disagree: Q" + shape_str(q.shape()) + " K" + shape_str(k.shape()) +
                      " V" + shape_str(v.shape()));
  }
  if (heads <= 1) {
    const double s = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    return ad::matmul(ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), s)), v);
  }
  const int dq = q.dim(1) / heads, dv = v.dim(1) / heads;
  ad::Var out;
  for (int h = 0; h < heads; ++h) {
    ad::Var head = scaled_dot_attention(detail::column_block(q, h * dq, (h + 1) * dq),
                                        detail::column_block(k, h * dq, (h + 1) * dq),
                                        detail::column_block(v, h * dv, (h + 1) * dv), 1);
    out = out.defined() ? ad::transpose(ad::concat0(ad::transpose(out), ad::transpose(head))) : head;
  }
  return out;
}

// Plain self-attention over hidden states x[L, C] with the given projections.
inline ad::Var self_attention(const ad::Var& x, const ad::Var& w_q, const ad::Var& w_k, const ad::Var& w_v,
                              int heads = 1) {
  return scaled_dot_attention(ad::matmul(x, w_q), ad::matmul(x, w_k), ad::matmul(x, w_v), heads);
}

inline ad::Var vanilla_attention(const SelfAttentionSite& site, const ad::Var& x) {
  return self_attention(x, site.w_q, site.w_k, site.w_v, site.head_count);
}

using AttentionHook = std::function<ad::Var(const SelfAttentionSite&, const ad::Var& hidden)>;

/// Per-site interception of self-attention. A site without an entry runs
/// vanilla attention with its frozen projections.
struct AttentionHooks {
  std::map<int, AttentionHook> by_site;

  bool empty() const { return by_site.empty(); }
  const AttentionHook* find(int site) const {
    auto it = by_site.find(site);
    return it == by_site.end() ? nullptr : &it->second;
  }
};

/// Noise-prediction backend with an enumerable, stable list of self-attention
/// sites. Implementations override forward(); callers go through predict(),
/// which validates hooks and counts calls.
class DenoiserBackend {
 public:
  virtual ~DenoiserBackend() = default;

  virtual Shape latent_shape() const = 0;
  virtual std::vector<SelfAttentionSite>& sites() = 0;
  virtual const std::vector<SelfAttentionSite>& sites() const = 0;
  virtual TextCondition null_condition() const = 0;

  ad::Var predict(const ad::Var& z, int t, const TextCondition& cond, const AttentionHooks* hooks = nullptr) {
    if (hooks) validate_hooks(*hooks);
    if (z.shape() != latent_shape()) {
      throw InvalidArgument("latent shape " + shape_str(z.shape()) + " does not match backend " +
                            shape_str(latent_shape()));
    }
    ++forward_calls_;
    return forward(z, t, cond, hooks);
  }

  void validate_hooks(const AttentionHooks& hooks) const {
    const int n = static_cast<int>(sites().size());
    for (const auto& [site, fn] : hooks.by_site) {
      if (site < 0 || site >= n) {
        throw ConfigError("attention hook references unknown site " + std::to_string(site) + " (backend has " +
                          std::to_string(n) + ")");
      }
      if (!fn) throw ConfigError("attention hook for site " + std::to_string(site) + " is empty");
    }
  }

  std::size_t forward_calls() const { return forward_calls_; }
  void reset_forward_calls() { forward_calls_ = 0; }

  void reset_clones() {
    for (auto& s : sites()) s.reset_clones();
  }

  // Every frozen projection of every site, for isolation checksums.
  std::uint64_t frozen_checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& s : sites()) {
      h = checksum(s.w_q.value(), h);
      h = checksum(s.w_k.value(), h);
      h = checksum(s.w_v.value(), h);
    }
    return h;
  }

 protected:
  virtual ad::Var forward(const ad::Var& z, int t, const TextCondition& cond, const AttentionHooks* hooks) = 0;

 private:
  std::size_t forward_calls_ = 0;
};

// Single evaluation without graph recording.
inline Tensor predict_noise(DenoiserBackend& backend, const Latent& z, int t, const TextCondition& cond,
                            const AttentionHooks* hooks = nullptr) {
  if (!z.finite()) throw InvalidArgument("predict_noise: latent has non-finite entries");
  ad::NoGradGuard no_grad;
  return backend.predict(ad::constant(z.data), t, cond, hooks).value();
}

inline Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale) {
  return axpby(1.0, eps_uncond, scale, eps_cond - eps_uncond);
}

inline ad::Var cfg_combine(const ad::Var& eps_uncond, const ad::Var& eps_cond, double scale) {
  return ad::lin_comb(1.0, eps_uncond, scale, ad::sub(eps_cond, eps_uncond));
}

/// eps(z) = A vec(z). No attention sites; used where gradients must be
/// derivable by hand.
class LinearDenoiser final : public DenoiserBackend {
 public:
  LinearDenoiser(Shape latent_shape, Tensor a) : shape_(std::move(latent_shape)), a_(ad::parameter(std::move(a))) {
    const int n = static_cast<int>(shape_size(shape_));
    if (a_.value().rank() != 2 || a_.dim(0) != n || a_.dim(1) != n) {
      throw InvalidArgument("LinearDenoiser: matrix must be [n, n] with n = latent size");
    }
  }

  Shape latent_shape() const override { return shape_; }
  std::vector<SelfAttentionSite>& sites() override { return sites_; }
  const std::vector<SelfAttentionSite>& sites() const override { return sites_; }
  TextCondition null_condition() const override { return {Tensor(Shape{1, 1}), true}; }

  ad::Var& matrix() { return a_; }

 protected:
  ad::Var forward(const ad::Var& z, int, const TextCondition&, const AttentionHooks*) override {
    const int n = static_cast<int>(z.size());
    return ad::reshape(ad::matmul(a_, ad::reshape(z, {n, 1})), shape_);
  }

 private:
  Shape shape_;
  ad::Var a_;
  std::vector<SelfAttentionSite> sites_;
};

}  // namespace dualedit

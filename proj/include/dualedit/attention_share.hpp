// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "dualedit/autograd.hpp"
#include "dualedit/denoiser.hpp"
#include "dualedit/error.hpp"
#include "dualedit/inversion.hpp"
#include "dualedit/share_config.hpp"

namespace dualedit {

/// Editing-branch attention at a shared site. Q_SHARE attends with the source
/// queries over the live keys/values; KV_SHARE attends with live queries over
/// the source keys/values. Live projections use the site's clone matrices.
inline ad::Var attend_shared(const ad::Var& x, const SourceFeatures& src, const SelfAttentionSite& site,
                             ShareMode mode) {
  const Shape expected{x.dim(0), site.key_dim};
  for (const Tensor* t : {&src.q, &src.k, &src.v}) {
    if (t->shape() != expected) {
      throw ConfigError("cached feature " + shape_str(t->shape()) + " does not match live " + shape_str(expected) +
                        " at site " + std::to_string(site.layer_index));
    }
  }
  if (mode == ShareMode::QShare) {
    return scaled_dot_attention(ad::constant(src.q), ad::matmul(x, site.w_k_t), ad::matmul(x, site.w_v_t),
                                site.head_count);
  }
  return scaled_dot_attention(ad::matmul(x, site.w_q_t), ad::constant(src.k), ad::constant(src.v), site.head_count);
}

// Self-attention of the editing branch at a site that is not sharing.
inline ad::Var clone_attention(const SelfAttentionSite& site, const ad::Var& x) {
  return self_attention(x, site.w_q_t, site.w_k_t, site.w_v_t, site.head_count);
}

/// Resets every clone to its frozen value and marks the mode's clones
/// trainable: keys/values for Q_SHARE, queries for KV_SHARE. Returns them.
inline std::vector<ad::Var> apply_trainability(DenoiserBackend& backend, ShareMode mode) {
  std::vector<ad::Var> trainable;
  for (auto& site : backend.sites()) {
    site.reset_clones();
    if (mode == ShareMode::QShare) {
      site.w_k_t.set_requires_grad(true);
      site.w_v_t.set_requires_grad(true);
      trainable.push_back(site.w_k_t);
      trainable.push_back(site.w_v_t);
    } else {
      site.w_q_t.set_requires_grad(true);
      trainable.push_back(site.w_q_t);
    }
  }
  return trainable;
}

/// Editing-branch interception for every site and step: attend_shared inside
/// the share grid, clone self-attention elsewhere.
class ShareHooks {
 public:
  ShareHooks(const DenoiserBackend& backend, ShareConfig cfg, const SourceFeatureCache& cache)
      : cfg_(std::move(cfg)), cache_(&cache), site_count_(static_cast<int>(backend.sites().size())) {
    for (const auto& [step, layer] : cfg_.grid()) {
      if (!cache.contains(step, layer)) {
        throw ConfigError("feature cache is missing step " + std::to_string(step) + ", site " + std::to_string(layer));
      }
    }
  }

  const ShareConfig& config() const { return cfg_; }

  AttentionHooks at_step(int step) const {
    AttentionHooks hooks;
    for (int layer = 0; layer < site_count_; ++layer) {
      if (cfg_.active(step, layer)) {
        const SourceFeatures* src = &cache_->at(step, layer);
        const ShareMode mode = cfg_.mode;
        hooks.by_site[layer] = [src, mode](const SelfAttentionSite& site, const ad::Var& x) {
          return attend_shared(x, *src, site, mode);
        };
      } else {
        hooks.by_site[layer] = clone_attention;
      }
    }
    return hooks;
  }

 private:
  ShareConfig cfg_;
  const SourceFeatureCache* cache_;
  int site_count_;
};

inline ShareHooks install_share_hooks(const DenoiserBackend& backend, const ShareConfig& cfg,
                                      const SourceFeatureCache& cache) {
  return ShareHooks(backend, cfg, cache);
}

}  // namespace dualedit

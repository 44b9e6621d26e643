// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dualedit/archive.hpp"
#include "dualedit/autograd.hpp"
#include "dualedit/denoiser.hpp"
#include "dualedit/error.hpp"
#include "dualedit/scheduler.hpp"
#include "dualedit/share_config.hpp"

namespace dualedit {

/// Classifier-free-guided noise estimate. A null prompt needs one pass
/// (guidance of a prediction against itself is the prediction); otherwise
/// the unconditional and conditional passes are combined.
inline ad::Var guided_noise(DenoiserBackend& backend, const ad::Var& z, int t, const TextCondition& cond,
                            double cfg_scale, bool use_cfg, const AttentionHooks* hooks) {
  if (cond.is_null || !use_cfg) {
    ad::Var e = backend.predict(z, t, cond, hooks);
    return cond.is_null && use_cfg ? cfg_combine(e, e, cfg_scale) : e;
  }
  ad::Var e_u = backend.predict(z, t, backend.null_condition(), hooks);
  ad::Var e_c = backend.predict(z, t, cond, hooks);
  return cfg_combine(e_u, e_c, cfg_scale);
}

/// Pivotal latents z_0*..z_S* of a DDIM inversion; latents[k] has step_tag k.
struct InversionTrajectory {
  std::vector<Latent> latents;
  TextCondition prompt;
  double cfg_scale = 7.5;
  std::string schedule_id;

  int steps() const { return static_cast<int>(latents.size()) - 1; }
  const Latent& source() const { return latents.front(); }
  const Latent& noised() const { return latents.back(); }
};

// The inversion moves latents[k] -> latents[k+1] with the noise predicted at
// latents[k] and the grid timestep of sampling step S-k.
inline int inversion_step_for(int k, int steps) { return steps - k; }

inline InversionTrajectory invert(const Latent& z0, const TextCondition& cond, DenoiserBackend& backend,
                                  const NoiseSchedule& sched, double cfg_scale = 7.5) {
  if (!z0.finite()) throw InversionFailure(0, "source latent has non-finite entries");
  InversionTrajectory traj;
  traj.prompt = cond;
  traj.cfg_scale = cfg_scale;
  traj.schedule_id = sched.id();
  traj.latents.push_back(Latent{z0.data, 0});
  const int steps = sched.num_inference_steps();
  ad::NoGradGuard no_grad;
  for (int k = 0; k < steps; ++k) {
    const int s = inversion_step_for(k, steps);
    const Latent& cur = traj.latents.back();
    const Tensor eps =
        guided_noise(backend, ad::constant(cur.data), sched.timestep_of(s), cond, cfg_scale, true, nullptr).value();
    if (!eps.all_finite()) throw InversionFailure(k + 1, "non-finite noise prediction");
    Latent next = ddim_invert_step(cur, eps, step_coefficients_for(s, sched));
    if (!next.finite()) throw InversionFailure(k + 1, "non-finite latent");
    traj.latents.push_back(std::move(next));
  }
  return traj;
}

struct SourceFeatures {
  Tensor q, k, v;  // [tokens, key_dim]
};

/// Source-branch Q/K/V per (sampling step, site) plus the reconstructed clean
/// latent. Read-only once finalized.
class SourceFeatureCache {
 public:
  void insert(int step, int layer, SourceFeatures f) {
    require_mutable();
    entries_[{step, layer}] = std::move(f);
  }
  void set_clean_latent(Tensor z) {
    require_mutable();
    clean_ = std::move(z);
  }
  void finalize() { finalized_ = true; }
  bool finalized() const { return finalized_; }

  bool contains(int step, int layer) const { return entries_.count({step, layer}) != 0; }
  const SourceFeatures& at(int step, int layer) const {
    auto it = entries_.find({step, layer});
    if (it == entries_.end()) {
      throw ConfigError("feature cache has no entry for step " + std::to_string(step) + ", site " +
                        std::to_string(layer));
    }
    return it->second;
  }
  const Tensor& clean_latent() const { return clean_; }
  std::size_t size() const { return entries_.size(); }

  FeatureGrid keys() const {
    FeatureGrid g;
    for (const auto& [key, f] : entries_) g.insert(key);
    return g;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [key, f] : entries_) {
      h = dualedit::checksum(Tensor(Shape{2}, {double(key.first), double(key.second)}), h);
      h = dualedit::checksum(f.q, h);
      h = dualedit::checksum(f.k, h);
      h = dualedit::checksum(f.v, h);
    }
    return dualedit::checksum(clean_, h);
  }

  ArrayArchive to_archive() const {
    ArrayArchive a;
    a.header = {{"format", "dualedit.feature_cache"}, {"version", 1}};
    for (const auto& [key, f] : entries_) {
      const std::string p = "s" + std::to_string(key.first) + ".l" + std::to_string(key.second) + ".";
      a.arrays[p + "q"] = f.q;
      a.arrays[p + "k"] = f.k;
      a.arrays[p + "v"] = f.v;
    }
    a.arrays["clean_latent"] = clean_;
    return a;
  }

  static SourceFeatureCache from_archive(const ArrayArchive& a) {
    if (a.header.value("format", "") != "dualedit.feature_cache") throw IoError("archive is not a feature cache");
    SourceFeatureCache c;
    for (const auto& [name, t] : a.arrays) {
      if (name == "clean_latent") {
        c.clean_ = t;
        continue;
      }
      int step = 0, layer = 0;
      char which = 0;
      if (std::sscanf(name.c_str(), "s%d.l%d.%c", &step, &layer, &which) != 3) {
        throw IoError("unexpected feature cache entry '" + name + "'");
      }
      SourceFeatures& f = c.entries_[{step, layer}];
      (which == 'q' ? f.q : which == 'k' ? f.k : f.v) = t;
    }
    c.finalized_ = true;
    return c;
  }

 private:
  void require_mutable() const {
    if (finalized_) throw ConfigError("feature cache is read-only after the reconstruction pass");
  }

  std::map<std::pair<int, int>, SourceFeatures> entries_;
  Tensor clean_;
  bool finalized_ = false;
};

struct Reconstruction {
  Latent recon;
  SourceFeatureCache cache;
};

/// Reconstruction sweep with every denoiser input forced onto the pivotal
/// trajectory. Step s feeds the latent the inversion evaluated at the same
/// timestep, so each noise estimate and every recorded feature equals the
/// inversion's; the chain state is forced to the trajectory as well.
inline Reconstruction reconstruct_with_substitution(const InversionTrajectory& traj, const ShareConfig& share,
                                                    DenoiserBackend& backend, const NoiseSchedule& sched) {
  const int steps = sched.num_inference_steps();
  if (traj.schedule_id != sched.id()) {
    throw ConfigError("trajectory was built with schedule '" + traj.schedule_id + "', not '" + sched.id() + "'");
  }
  if (traj.steps() != steps) {
    throw ConfigError("trajectory has " + std::to_string(traj.steps()) + " steps, schedule has " +
                      std::to_string(steps));
  }
  share.validate(static_cast<int>(backend.sites().size()), steps);

  Reconstruction out;
  ad::NoGradGuard no_grad;
  Latent z = traj.source();
  int current_step = 0;
  AttentionHooks recorders;
  for (int layer : share.shared_layers) {
    recorders.by_site[layer] = [&out, &current_step](const SelfAttentionSite& site, const ad::Var& x) {
      ad::Var q = ad::matmul(x, site.w_q), k = ad::matmul(x, site.w_k), v = ad::matmul(x, site.w_v);
      out.cache.insert(current_step, site.layer_index, {q.value(), k.value(), v.value()});
      return scaled_dot_attention(q, k, v, site.head_count);
    };
  }
  for (int s = 1; s <= steps; ++s) {
    current_step = s;
    const int tag = steps - s;
    const bool record = s >= share.first_step && s <= share.last_step && !recorders.empty();
    const Tensor eps = guided_noise(backend, ad::constant(traj.latents[tag].data), sched.timestep_of(s), traj.prompt,
                                    traj.cfg_scale, true, record ? &recorders : nullptr)
                           .value();
    z = ddim_step(traj.latents[tag + 1], eps, step_coefficients_for(s, sched));
  }
  out.recon = z;
  out.cache.set_clean_latent(z.data);
  out.cache.finalize();
  if (out.cache.keys() != share.grid()) throw ConfigError("feature cache does not cover the share grid");
  return out;
}

}  // namespace dualedit

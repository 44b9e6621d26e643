// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dualedit/adam.hpp"
#include "dualedit/attention_share.hpp"
#include "dualedit/autograd.hpp"
#include "dualedit/codec.hpp"
#include "dualedit/denoiser.hpp"
#include "dualedit/embedder.hpp"
#include "dualedit/error.hpp"
#include "dualedit/inversion.hpp"
#include "dualedit/rng.hpp"
#include "dualedit/scheduler.hpp"
#include "dualedit/toy_data.hpp"

namespace dualedit {

// ------------------------------------------------------------------ gateways

enum class GatewayStrategy { Random, FormerHalf, LatterHalf, StratifiedIntervals };

inline constexpr GatewayStrategy kAllStrategies[] = {GatewayStrategy::Random, GatewayStrategy::FormerHalf,
                                                     GatewayStrategy::LatterHalf,
                                                     GatewayStrategy::StratifiedIntervals};

inline std::string_view to_string(GatewayStrategy s) {
  switch (s) {
    case GatewayStrategy::Random: return "random";
    case GatewayStrategy::FormerHalf: return "former";
    case GatewayStrategy::LatterHalf: return "latter";
    case GatewayStrategy::StratifiedIntervals: return "stratified";
  }
  return "?";
}

inline GatewayStrategy parse_strategy(std::string_view s) {
  for (GatewayStrategy g : kAllStrategies)
    if (to_string(g) == s) return g;
  throw ConfigError("unknown gateway strategy '" + std::string(s) + "' (random|former|latter|stratified)");
}

struct GatewaySchedule {
  std::set<int> steps;  // sampling steps in [1, S]
  GatewayStrategy strategy = GatewayStrategy::Random;
  std::uint64_t rng_seed = 0;

  bool contains(int step) const { return steps.count(step) != 0; }
  std::size_t size() const { return steps.size(); }
};

namespace detail {

// k distinct values drawn uniformly from [lo, hi].
inline std::vector<int> draw_without_replacement(int lo, int hi, int k, Rng& rng) {
  std::vector<int> pool(static_cast<std::size_t>(std::max(0, hi - lo + 1)));
  std::iota(pool.begin(), pool.end(), lo);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace detail

/// Steps 1..S run from highest to lowest noise. The former half is
/// [1, floor(S/2)], the latter half the rest. A half that is smaller than n is
/// taken whole and topped up uniformly from the other half.
inline GatewaySchedule select_gateways(GatewayStrategy strategy, int steps, int n, std::uint64_t seed) {
  if (n < 0 || n > steps) {
    throw InvalidArgument("gateway count " + std::to_string(n) + " must lie in [0, " + std::to_string(steps) + "]");
  }
  GatewaySchedule g;
  g.strategy = strategy;
  g.rng_seed = seed;
  Rng rng = make_rng(seed, 0x6A7E);
  const int half = steps / 2;
  auto from_half = [&](int lo, int hi, int olo, int ohi) {
    const int width = hi - lo + 1;
    for (int s : detail::draw_without_replacement(lo, hi, std::min(n, width), rng)) g.steps.insert(s);
    if (n > width)
      for (int s : detail::draw_without_replacement(olo, ohi, n - width, rng)) g.steps.insert(s);
  };
  switch (strategy) {
    case GatewayStrategy::Random:
      for (int s : detail::draw_without_replacement(1, steps, n, rng)) g.steps.insert(s);
      break;
    case GatewayStrategy::FormerHalf:
      from_half(1, half, half + 1, steps);
      break;
    case GatewayStrategy::LatterHalf:
      from_half(half + 1, steps, 1, half);
      break;
    case GatewayStrategy::StratifiedIntervals:
      for (int b = 0; b < n; ++b) {
        const int lo = 1 + static_cast<int>(static_cast<long long>(b) * steps / n);
        const int hi = static_cast<int>(static_cast<long long>(b + 1) * steps / n);
        g.steps.insert(std::uniform_int_distribution<int>(lo, hi)(rng));
      }
      break;
  }
  return g;
}

inline GatewaySchedule all_gateways(int steps) {
  GatewaySchedule g;
  for (int s = 1; s <= steps; ++s) g.steps.insert(s);
  return g;
}

// ------------------------------------------------------------------ rollout

struct RolloutStats {
  std::size_t retained_graphs = 0;       // denoiser evaluations kept for differentiation
  std::size_t activation_bytes = 0;      // bytes held by those evaluations' graphs
  std::size_t peak_graph_bytes = 0;      // peak of all live graph bytes during the rollout
  std::size_t forward_calls = 0;
};

struct RolloutOptions {
  double cfg_scale = 7.5;
  bool use_cfg = true;
  bool keep_full_graph = false;  // disables stop-gradient everywhere (reference rollout)
};

using StepHooks = std::function<AttentionHooks(int step)>;

/// Editing-branch sampling from z_T. At gateway steps the noise term keeps its
/// graph; elsewhere k2*eps enters as a constant, so parameter gradients reach
/// the loss only through gateway noise terms while the k1 latent chain stays
/// differentiable throughout.
inline ad::Var sample_with_gateways(const ad::Var& z_T, const TextCondition& target, const StepHooks& hooks,
                                    const GatewaySchedule& gw, DenoiserBackend& backend, const NoiseSchedule& sched,
                                    const RolloutOptions& opt = {}, RolloutStats* stats = nullptr) {
  const int steps = sched.num_inference_steps();
  for (int s : gw.steps)
    if (s < 1 || s > steps) throw InvalidArgument("gateway step " + std::to_string(s) + " outside the schedule");
  RolloutStats local;
  auto& gs = ad::graph_stats();
  const std::size_t live_before = gs.live_bytes;
  const std::size_t calls_before = backend.forward_calls();
  gs.reset_peak();
  ad::Var z = z_T;
  for (int s = 1; s <= steps; ++s) {
    const int t = sched.timestep_of(s);
    const StepCoefficients c = step_coefficients_for(s, sched);
    const AttentionHooks h = hooks ? hooks(s) : AttentionHooks{};
    const AttentionHooks* hp = h.empty() ? nullptr : &h;
    if (opt.keep_full_graph || gw.contains(s)) {
      const std::size_t before = gs.live_bytes;
      ad::Var eps = guided_noise(backend, z, t, target, opt.cfg_scale, opt.use_cfg, hp);
      if (ad::grad_enabled()) {
        ++local.retained_graphs;
        local.activation_bytes += gs.live_bytes - before;
      }
      if (!eps.value().all_finite()) throw RolloutFailure(s, local.retained_graphs, "non-finite noise prediction");
      z = ddim_step(z, eps, c);
    } else {
      Tensor eps;
      {
        ad::NoGradGuard no_grad;
        eps = guided_noise(backend, z, t, target, opt.cfg_scale, opt.use_cfg, hp).value();
      }
      if (!eps.all_finite()) throw RolloutFailure(s, local.retained_graphs, "non-finite noise prediction");
      z = ad::lin_comb(c.k1, z, 1.0, ad::constant(c.k2 * eps));
    }
    if (!z.value().all_finite()) throw RolloutFailure(s, local.retained_graphs, "non-finite latent");
  }
  local.peak_graph_bytes = gs.peak_bytes > live_before ? gs.peak_bytes - live_before : 0;
  local.forward_calls = backend.forward_calls() - calls_before;
  if (stats) *stats = local;
  return z;
}

// ------------------------------------------------------------------ losses

inline ad::Var clip_loss(const ad::Var& image_emb, const ad::Var& text_emb) {
  return ad::add_scalar(ad::scale(ad::dot(ad::l2_normalize(image_emb), ad::l2_normalize(text_emb)), -1.0), 1.0);
}

inline double clip_loss(const Tensor& image_emb, const Tensor& text_emb) {
  ad::NoGradGuard no_grad;
  return clip_loss(ad::constant(image_emb), ad::constant(text_emb)).item();
}

inline ad::Var reg_loss(const ad::Var& z0_t, const Tensor& z0_s) {
  if (z0_t.shape() != z0_s.shape()) throw InvalidArgument("reg_loss: latent shapes differ");
  return ad::sum_squares(ad::sub(z0_t, ad::constant(z0_s)));
}

inline double reg_loss(const Tensor& z0_t, const Tensor& z0_s) {
  ad::NoGradGuard no_grad;
  return reg_loss(ad::constant(z0_t), z0_s).item();
}

// ------------------------------------------------------------------ optimisation

struct OptimizationConfig {
  int loops = 3;
  int gateways = 5;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lambda = 1.0;
  double cfg_scale = 7.5;
  bool use_cfg = true;
  GatewayStrategy strategy = GatewayStrategy::Random;
  std::uint64_t seed = 0;

  void validate(int steps) const {
    if (loops < 0) throw InvalidArgument("loops must be >= 0");
    if (gateways < 0 || gateways > steps) {
      throw InvalidArgument("gateways per loop must lie in [0, " + std::to_string(steps) + "]");
    }
    if (!(lambda >= 0.0)) throw InvalidArgument("lambda must be >= 0");
    if (lambda > 10.0) throw InvalidArgument("lambda must be <= 10");
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  }
};

/// Per-task defaults: learning rate and reconstruction strength, plus the
/// sharing mode the task's preservation need calls for.
struct TaskDefaults {
  double learning_rate;
  double lambda;
  ShareMode mode;
};

inline TaskDefaults task_defaults(toy::TaskCategory t) {
  using toy::TaskCategory;
  switch (t) {
    case TaskCategory::ObjectReplacement: return {5e-4, 0.5, ShareMode::QShare};
    case TaskCategory::AttributeManipulation: return {1e-4, 1.0, ShareMode::QShare};
    case TaskCategory::StyleTransfer: return {1e-4, 0.5, ShareMode::QShare};
    case TaskCategory::PoseChange: return {1e-3, 5.5, ShareMode::KVShare};
    case TaskCategory::ShapeChange: return {7.5e-4, 0.75, ShareMode::KVShare};
  }
  return {1e-4, 1.0, ShareMode::QShare};
}

struct LossBreakdown {
  double l_clip = 0.0;
  double l_reg = 0.0;
  double total = 0.0;
  int loop_index = 0;
};

struct LoopRecord {
  LossBreakdown loss;
  GatewaySchedule gateways;
  RolloutStats stats;
  Tensor latent;  // this loop's rollout, before its parameter update
  Tensor image;
  double seconds = 0.0;
};

struct EditResult {
  std::vector<LoopRecord> loops;
  Tensor final_latent;
  Tensor final_image;
};

class OptimizationAborted : public NumericFailure {
 public:
  OptimizationAborted(int loop, std::vector<LoopRecord> history)
      : NumericFailure("edit optimisation produced a non-finite loss in loop " + std::to_string(loop)),
        history_(std::move(history)) {}
  const std::vector<LoopRecord>& history() const { return history_; }

 private:
  std::vector<LoopRecord> history_;
};

struct EditInputs {
  DenoiserBackend* backend = nullptr;
  const NoiseSchedule* schedule = nullptr;
  const TextImageEmbedder* embedder = nullptr;
  const ToyCodec* codec = nullptr;
};

/// N loops of: fresh gateway draw, gateway-restricted rollout from z_T*,
/// decode, total = clip + lambda*reg, backward, one Adam update of the
/// mode's clone matrices. The final image is a plain rollout after the last
/// update. Clones are reset on entry.
inline EditResult optimize_edit(const InversionTrajectory& traj, const SourceFeatureCache& cache,
                                const ShareConfig& share, const TextCondition& target,
                                const std::vector<int>& target_tokens, const OptimizationConfig& cfg,
                                const EditInputs& in) {
  DenoiserBackend& backend = *in.backend;
  const NoiseSchedule& sched = *in.schedule;
  const int steps = sched.num_inference_steps();
  cfg.validate(steps);
  share.validate(static_cast<int>(backend.sites().size()), steps);
  if (traj.steps() != steps || traj.schedule_id != sched.id()) {
    throw ConfigError("trajectory does not match the sampling schedule");
  }
  const ShareHooks share_hooks = install_share_hooks(backend, share, cache);
  const StepHooks hooks = [&share_hooks](int s) { return share_hooks.at_step(s); };
  std::vector<ad::Var> params = apply_trainability(backend, share.mode);
  if (params.empty() && cfg.loops > 0) throw ConfigError("no trainable projections for this share mode");
  Adam opt(params, {cfg.learning_rate, cfg.beta1, cfg.beta2});
  const ad::Var text = ad::constant(in.embedder->embed_text(target_tokens));
  const ad::Var z_T = ad::constant(traj.noised().data);
  const RolloutOptions ro{cfg.cfg_scale, cfg.use_cfg, false};

  EditResult result;
  for (int loop = 1; loop <= cfg.loops; ++loop) {
    const auto t0 = std::chrono::steady_clock::now();
    LoopRecord rec;
    rec.gateways = select_gateways(cfg.strategy, steps, cfg.gateways, derive_seed(cfg.seed, loop));
    ad::Var z0 = sample_with_gateways(z_T, target, hooks, rec.gateways, backend, sched, ro, &rec.stats);
    ad::Var image = in.codec->decode(z0);
    ad::Var l_clip = clip_loss(in.embedder->embed_image(image), text);
    ad::Var l_reg = reg_loss(z0, cache.clean_latent());
    ad::Var total = ad::lin_comb(1.0, l_clip, cfg.lambda, l_reg);
    rec.loss = {l_clip.item(), l_reg.item(), total.item(), loop};
    rec.latent = z0.value();
    rec.image = image.value();
    if (!std::isfinite(rec.loss.total)) {
      result.loops.push_back(std::move(rec));
      apply_trainability(backend, share.mode);
      throw OptimizationAborted(loop, std::move(result.loops));
    }
    opt.zero_grad();
    ad::backward(total);
    opt.step();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.loops.push_back(std::move(rec));
  }
  {
    ad::NoGradGuard no_grad;
    const Tensor z0 = sample_with_gateways(z_T, target, hooks, GatewaySchedule{}, backend, sched, ro).value();
    result.final_latent = z0;
    result.final_image = in.codec->decode(z0);
  }
  return result;
}

}  // namespace dualedit

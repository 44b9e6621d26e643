// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualedit/adam.hpp"
#include "dualedit/archive.hpp"
#include "dualedit/autograd.hpp"
#include "dualedit/denoiser.hpp"
#include "dualedit/rng.hpp"
#include "dualedit/scheduler.hpp"

namespace dualedit {

struct ToyUNetConfig {
  int latent_channels = 4;
  int resolution = 16;
  int outer_channels = 16;  // width at full resolution
  int inner_channels = 32;  // width at 1/2 and 1/4 resolution; attention width
  int text_dim = 32;
  int vocab_size = 20;
  int caption_tokens = 5;
  int time_dim = 32;
  int time_hidden = 64;

  nlohmann::json to_json() const {
    return {{"latent_channels", latent_channels}, {"resolution", resolution},   {"outer_channels", outer_channels},
            {"inner_channels", inner_channels},   {"text_dim", text_dim},       {"vocab_size", vocab_size},
            {"caption_tokens", caption_tokens},   {"time_dim", time_dim},       {"time_hidden", time_hidden}};
  }
  static ToyUNetConfig from_json(const nlohmann::json& j) {
    ToyUNetConfig c;
    c.latent_channels = j.at("latent_channels");
    c.resolution = j.at("resolution");
    c.outer_channels = j.at("outer_channels");
    c.inner_channels = j.at("inner_channels");
    c.text_dim = j.at("text_dim");
    c.vocab_size = j.at("vocab_size");
    c.caption_tokens = j.at("caption_tokens");
    c.time_dim = j.at("time_dim");
    c.time_hidden = j.at("time_hidden");
    return c;
  }
};

/// Small conv U-Net over [4,16,16] latents with eight self-attention sites:
/// two at 8x8 on the way down, four at 4x4, two at 8x8 on the way up. Every
/// attention block also cross-attends to the caption embedding.
class ToyUNet final : public DenoiserBackend {
 public:
  static constexpr int kSiteCount = 8;
  static constexpr const char* kFormat = "dualedit.toy_unet";

  ToyUNet(ToyUNetConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
    if (cfg_.resolution % 4) throw InvalidArgument("ToyUNet resolution must be divisible by 4");
    Rng rng = make_rng(init_seed, 0xD3A015);
    const int co = cfg_.outer_channels, ci = cfg_.inner_channels, lc = cfg_.latent_channels;
    auto normal = [&](Shape s, double stddev) { add_param_tensor(Tensor::randn(std::move(s), rng, stddev)); };
    auto conv = [&](const std::string& name, int out, int in, double gain) {
      next_name_ = name + ".w";
      normal({out, in * 9}, gain / std::sqrt(in * 9.0));
      next_name_ = name + ".b";
      add_param_tensor(Tensor(Shape{out}));
    };
    next_name_ = "tok_emb";
    normal({cfg_.vocab_size, cfg_.text_dim}, 1.0);
    next_name_ = "time.w";
    normal({cfg_.time_dim, cfg_.time_hidden}, 1.0 / std::sqrt(cfg_.time_dim));
    next_name_ = "time.b";
    add_param_tensor(Tensor(Shape{cfg_.time_hidden}));
    const int tproj_width[4] = {co, ci, ci, ci};
    for (int k = 0; k < 4; ++k) {
      next_name_ = "tproj" + std::to_string(k) + ".w";
      normal({cfg_.time_hidden, tproj_width[k]}, 0.5 / std::sqrt(cfg_.time_hidden));
      next_name_ = "tproj" + std::to_string(k) + ".b";
      add_param_tensor(Tensor(Shape{tproj_width[k]}));
    }
    conv("conv_in", co, lc, 1.0);
    conv("down1", ci, co, 1.4);
    conv("down2", ci, ci, 1.4);
    conv("up1", ci, 2 * ci, 1.4);
    conv("up0", co, ci + co, 1.4);
    conv("conv_out", lc, co, 0.5);
    const double s = 1.0 / std::sqrt(static_cast<double>(ci));
    for (int k = 0; k < kSiteCount; ++k) {
      const std::string p = "site" + std::to_string(k) + ".";
      for (const char* m : {"wq", "wk", "wv"}) {
        next_name_ = p + m;
        normal({ci, ci}, s);
      }
      next_name_ = p + "wo";
      normal({ci, ci}, 0.5 * s);
      next_name_ = p + "cq";
      normal({ci, ci}, s);
      next_name_ = p + "ck";
      normal({cfg_.text_dim, ci}, 1.0 / std::sqrt(cfg_.text_dim));
      next_name_ = p + "cv";
      normal({cfg_.text_dim, ci}, 1.0 / std::sqrt(cfg_.text_dim));
      next_name_ = p + "co";
      normal({ci, ci}, 0.5 * s);
    }
    bind_sites();
    set_training(false);
  }

  const ToyUNetConfig& config() const { return cfg_; }
  Shape latent_shape() const override { return {cfg_.latent_channels, cfg_.resolution, cfg_.resolution}; }
  std::vector<SelfAttentionSite>& sites() override { return sites_; }
  const std::vector<SelfAttentionSite>& sites() const override { return sites_; }

  TextCondition null_condition() const override {
    return {Tensor(Shape{cfg_.caption_tokens, cfg_.text_dim}), true};
  }

  TextCondition condition(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw InvalidArgument("condition needs at least one token");
    ad::NoGradGuard no_grad;
    return {ad::gather_rows(param("tok_emb"), tokens).value(), false};
  }

  // Frozen base weights become trainable (denoiser training) or constant (editing).
  void set_training(bool on) {
    for (auto& [name, v] : params_) v.set_requires_grad(on);
  }

  std::vector<ad::Var> parameter_list() const {
    std::vector<ad::Var> out;
    for (const auto& [name, v] : params_) out.push_back(v);
    return out;
  }
  const std::vector<std::pair<std::string, ad::Var>>& named_parameters() const { return params_; }

  const ad::Var& param(const std::string& name) const {
    for (const auto& [n, v] : params_)
      if (n == name) return v;
    throw InvalidArgument("ToyUNet has no parameter '" + name + "'");
  }

  std::map<std::string, Tensor> state() const {
    std::map<std::string, Tensor> s;
    for (const auto& [n, v] : params_) s.emplace(n, v.value());
    return s;
  }

  void load_state(const std::map<std::string, Tensor>& s) {
    for (auto& [n, v] : params_) {
      auto it = s.find(n);
      if (it == s.end()) throw IoError("checkpoint is missing parameter '" + n + "'");
      if (it->second.shape() != v.shape()) throw IoError("checkpoint parameter '" + n + "' has the wrong shape");
      v.mutable_value() = it->second;
    }
    for (auto& site : sites_) site.reset_clones();
  }

  ToyUNet clone() const {
    ToyUNet copy(cfg_, 0);
    copy.load_state(state());
    return copy;
  }

  void save(const std::filesystem::path& path, const std::string& schedule_id) const {
    ArrayArchive a;
    a.header = {{"format", kFormat}, {"version", 1}, {"architecture", cfg_.to_json()}, {"schedule_id", schedule_id}};
    a.arrays = state();
    a.save(path);
  }

  static ToyUNet load(const std::filesystem::path& path, std::string* schedule_id = nullptr) {
    ArrayArchive a = ArrayArchive::load(path);
    if (a.header.value("format", "") != kFormat) throw IoError(path.string() + " is not a toy denoiser checkpoint");
    ToyUNet model(ToyUNetConfig::from_json(a.header.at("architecture")), 0);
    model.load_state(a.arrays);
    if (schedule_id) *schedule_id = a.header.value("schedule_id", "");
    return model;
  }

  // Forward pass with a caller-supplied (possibly trainable) caption embedding.
  ad::Var forward_embedded(const ad::Var& z, int t, const ad::Var& cond, bool cond_is_null,
                           const AttentionHooks* hooks) const {
    if (!cond_is_null && cond.dim(1) != cfg_.text_dim) {
      throw ConfigError("caption embedding width " + std::to_string(cond.dim(1)) + " != " +
                        std::to_string(cfg_.text_dim));
    }
    const ad::Var temb = time_embedding(t);
    auto tproj = [&](int k) {
      const std::string p = "tproj" + std::to_string(k);
      ad::Var v = ad::add_row_bias(ad::matmul(temb, param(p + ".w")), param(p + ".b"));
      return ad::reshape(v, {v.dim(1)});
    };
    auto conv = [&](const ad::Var& x, const std::string& name, int stride = 1) {
      return ad::conv3x3(x, param(name + ".w"), param(name + ".b"), stride);
    };
    auto block = [&](int site, const ad::Var& h) { return attention_block(site, h, cond, cond_is_null, hooks); };

    ad::Var h0 = ad::silu(ad::add_channel_bias(conv(z, "conv_in"), tproj(0)));
    ad::Var h1 = ad::silu(ad::add_channel_bias(conv(h0, "down1", 2), tproj(1)));
    h1 = block(1, block(0, h1));
    ad::Var h2 = ad::silu(ad::add_channel_bias(conv(h1, "down2", 2), tproj(2)));
    for (int s = 2; s <= 5; ++s) h2 = block(s, h2);
    ad::Var u1 = ad::silu(ad::add_channel_bias(conv(ad::concat0(ad::upsample2x(h2), h1), "up1"), tproj(3)));
    u1 = block(7, block(6, u1));
    ad::Var u0 = ad::silu(conv(ad::concat0(ad::upsample2x(u1), h0), "up0"));
    return conv(u0, "conv_out");
  }

 protected:
  ad::Var forward(const ad::Var& z, int t, const TextCondition& cond, const AttentionHooks* hooks) override {
    return forward_embedded(z, t, ad::constant(cond.embedding), cond.is_null, hooks);
  }

 private:
  void add_param_tensor(Tensor t) { params_.emplace_back(next_name_, ad::parameter(std::move(t))); }

  void bind_sites() {
    sites_.clear();
    for (int k = 0; k < kSiteCount; ++k) {
      const std::string p = "site" + std::to_string(k) + ".";
      SelfAttentionSite s;
      s.layer_index = k;
      s.head_count = 1;
      s.key_dim = cfg_.inner_channels;
      s.w_q = param(p + "wq");
      s.w_k = param(p + "wk");
      s.w_v = param(p + "wv");
      s.reset_clones();
      sites_.push_back(std::move(s));
    }
  }

  ad::Var time_embedding(int t) const {
    const int half = cfg_.time_dim / 2;
    Tensor e(Shape{1, cfg_.time_dim});
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      e[i] = std::sin(t * freq);
      e[half + i] = std::cos(t * freq);
    }
    return ad::silu(ad::add_row_bias(ad::matmul(ad::constant(std::move(e)), param("time.w")), param("time.b")));
  }

  ad::Var attention_block(int site_index, const ad::Var& h, const ad::Var& cond, bool cond_is_null,
                          const AttentionHooks* hooks) const {
    const int c = h.dim(0), l = h.dim(1) * h.dim(2);
    const std::string p = "site" + std::to_string(site_index) + ".";
    const SelfAttentionSite& site = sites_[site_index];
    ad::Var tokens = ad::transpose(ad::reshape(h, {c, l}));
    ad::Var x = ad::layer_norm_rows(tokens);
    const AttentionHook* hook = hooks ? hooks->find(site_index) : nullptr;
    ad::Var a = hook ? (*hook)(site, x) : vanilla_attention(site, x);
    if (a.shape() != x.shape()) {
      throw ConfigError("attention hook at site " + std::to_string(site_index) + " returned " + shape_str(a.shape()) +
                        ", expected " + shape_str(x.shape()));
    }
    tokens = tokens + ad::matmul(a, param(p + "wo"));
    if (!cond_is_null) {
      ad::Var x2 = ad::layer_norm_rows(tokens);
      ad::Var cross = scaled_dot_attention(ad::matmul(x2, param(p + "cq")), ad::matmul(cond, param(p + "ck")),
                                           ad::matmul(cond, param(p + "cv")));
      tokens = tokens + ad::matmul(cross, param(p + "co"));
    }
    return ad::reshape(ad::transpose(tokens), {c, h.dim(1), h.dim(2)});
  }

  ToyUNetConfig cfg_;
  std::vector<std::pair<std::string, ad::Var>> params_;
  std::vector<SelfAttentionSite> sites_;
  std::string next_name_;
};

// ------------------------------------------------------------------ training

struct DenoiserSample {
  Tensor latent;            // clean latent
  std::vector<int> tokens;  // caption tokens
};

struct DenoiserTrainConfig {
  int steps = 1500;
  int batch_size = 4;
  double learning_rate = 2e-3;
  double uncond_prob = 0.15;  // caption dropout so the null condition is meaningful
  std::uint64_t seed = 0;
};

class TrainingFailure : public NumericFailure {
 public:
  TrainingFailure(int step, std::map<std::string, Tensor> last_good, std::vector<double> curve)
      : NumericFailure("training diverged at step " + std::to_string(step)),
        step_(step),
        last_good_(std::move(last_good)),
        curve_(std::move(curve)) {}
  int step() const { return step_; }
  const std::map<std::string, Tensor>& last_good_checkpoint() const { return last_good_; }
  const std::vector<double>& curve() const { return curve_; }

 private:
  int step_;
  std::map<std::string, Tensor> last_good_;
  std::vector<double> curve_;
};

namespace detail {

inline ad::Var noise_mse(const ToyUNet& model, const DenoiserSample& s, int t, const Tensor& eps,
                         const NoiseSchedule& sched, bool drop_caption) {
  const Tensor xt = forward_noise(s.latent, sched.alpha_bar(t), eps);
  ad::Var cond = drop_caption ? ad::constant(model.null_condition().embedding)
                              : ad::gather_rows(model.param("tok_emb"), s.tokens);
  ad::Var pred = model.forward_embedded(ad::constant(xt), t, cond, drop_caption, nullptr);
  return ad::scale(ad::sum_squares(ad::sub(pred, ad::constant(eps))), 1.0 / static_cast<double>(eps.size()));
}

}  // namespace detail

/// Minimises E||eps - eps_theta(x_t, t, c)||^2 over uniform t and Gaussian eps.
/// Returns the per-step mean batch loss. On a non-finite loss the model is
/// rolled back to the last finite checkpoint and TrainingFailure is thrown.
inline std::vector<double> train_toy_denoiser(ToyUNet& model, std::span<const DenoiserSample> data,
                                              const NoiseSchedule& sched, const DenoiserTrainConfig& cfg) {
  if (data.empty()) throw InvalidArgument("train_toy_denoiser: empty dataset");
  Rng rng = make_rng(cfg.seed, 0x7EA1);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<int> pick_t(0, sched.num_train_steps() - 1);
  std::bernoulli_distribution drop(cfg.uncond_prob);
  model.set_training(true);
  Adam opt(model.parameter_list(), {cfg.learning_rate});
  std::vector<double> curve;
  auto last_good = model.state();
  for (int step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const DenoiserSample& s = data[pick(rng)];
      const int t = pick_t(rng);
      const Tensor eps = Tensor::randn(s.latent.shape(), rng);
      ad::Var loss = detail::noise_mse(model, s, t, eps, sched, drop(rng));
      ad::backward(ad::scale(loss, 1.0 / cfg.batch_size));
      batch_loss += loss.item() / cfg.batch_size;
    }
    if (!std::isfinite(batch_loss)) {
      model.load_state(last_good);
      model.set_training(false);
      throw TrainingFailure(step, std::move(last_good), std::move(curve));
    }
    opt.step();
    curve.push_back(batch_loss);
    if (step % 50 == 0) last_good = model.state();
  }
  model.set_training(false);
  model.reset_clones();
  return curve;
}

/// Mean per-element noise-prediction error on a fixed evaluation batch
/// (deterministic in eval_seed). If fixed_t >= 0 every sample uses that step.
inline double denoiser_eval_loss(const ToyUNet& model, std::span<const DenoiserSample> data,
                                 const NoiseSchedule& sched, std::uint64_t eval_seed, int samples, int fixed_t = -1) {
  Rng rng = make_rng(eval_seed, 0xE7A1);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_int_distribution<int> pick_t(0, sched.num_train_steps() - 1);
  ad::NoGradGuard no_grad;
  double total = 0.0;
  for (int i = 0; i < samples; ++i) {
    const DenoiserSample& s = data[pick(rng)];
    const int t = fixed_t >= 0 ? fixed_t : pick_t(rng);
    const Tensor eps = Tensor::randn(s.latent.shape(), rng);
    total += detail::noise_mse(model, s, t, eps, sched, false).item();
  }
  return total / samples;
}

}  // namespace dualedit

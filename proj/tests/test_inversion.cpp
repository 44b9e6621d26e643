// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "dualedit/codec.hpp"
#include "dualedit/inversion.hpp"
#include "dualedit/toy_data.hpp"
#include "dualedit/toy_denoiser.hpp"
#include "support/recording_backend.hpp"

namespace dualedit {
namespace {

using testing::RecordingBackend;

class InversionTest : public ::testing::Test {
 protected:
  ToyUNet model{ToyUNetConfig{}, 3};
  NoiseSchedule sched = NoiseSchedule::linear({1000, 0.00085, 0.012, 10});
  Latent z0 = ToyCodec{}.encode(
      toy::render({toy::ShapeKind::Circle, toy::Color::Green, toy::SizeKind::Large, 4, toy::Background::Plain}, 2));
  ShareConfig share = ShareConfig::defaults(ShareMode::QShare, 8, 10);
};

TEST_F(InversionTest, ZeroStepScheduleReturnsSource) {
  const NoiseSchedule empty(sched.num_train_steps(), sched.alphas_cumprod(), {});
  const auto traj = invert(z0, model.null_condition(), model, empty);
  ASSERT_EQ(traj.latents.size(), 1u);
  EXPECT_EQ(traj.source().data, z0.data);
  EXPECT_EQ(traj.steps(), 0);
}

TEST_F(InversionTest, TrajectoryShapeTagsAndDeterminism) {
  const auto a = invert(z0, model.null_condition(), model, sched);
  const auto b = invert(z0, model.null_condition(), model, sched);
  ASSERT_EQ(a.latents.size(), 11u);
  EXPECT_EQ(a.source().data, z0.data);
  for (int k = 0; k <= 10; ++k) {
    EXPECT_EQ(a.latents[k].step_tag, k);
    EXPECT_TRUE(a.latents[k].finite());
    EXPECT_EQ(a.latents[k].data, b.latents[k].data);
  }
  EXPECT_EQ(a.schedule_id, sched.id());
  EXPECT_DOUBLE_EQ(a.cfg_scale, 7.5);
  EXPECT_TRUE(a.prompt.is_null);
}

TEST_F(InversionTest, EachStepIsAnInvertStepAtTheMirroredTimestep) {
  const auto traj = invert(z0, model.null_condition(), model, sched);
  for (int k = 0; k < 10; ++k) {
    const int s = 10 - k;
    const Tensor eps = predict_noise(model, traj.latents[k], sched.timestep_of(s), model.null_condition());
    const Tensor expect = ddim_invert_step(traj.latents[k].data, eps, step_coefficients_for(s, sched));
    EXPECT_EQ(traj.latents[k + 1].data, expect) << "k=" << k;
  }
}

TEST_F(InversionTest, NonFiniteSourceIsInversionFailure) {
  Latent bad = z0;
  bad.data[3] = std::nan("");
  EXPECT_THROW(invert(bad, model.null_condition(), model, sched), InversionFailure);
}

TEST_F(InversionTest, ExactlySForwardCallsPerPass) {
  model.reset_forward_calls();
  const auto traj = invert(z0, model.null_condition(), model, sched);
  EXPECT_EQ(model.forward_calls(), 10u);
  model.reset_forward_calls();
  reconstruct_with_substitution(traj, share, model, sched);
  EXPECT_EQ(model.forward_calls(), 10u);
}

TEST_F(InversionTest, ReconstructionReturnsSourceLatent) {
  const auto traj = invert(z0, model.null_condition(), model, sched);
  const auto r = reconstruct_with_substitution(traj, share, model, sched);
  EXPECT_EQ(r.recon.step_tag, 0);
  EXPECT_LE(max_abs_diff(r.recon.data, z0.data), 1e-5);
  EXPECT_EQ(r.cache.clean_latent(), r.recon.data);
}

TEST_F(InversionTest, SubstitutedInputsAreTheTrajectoryLatents) {
  RecordingBackend rec(model);
  const auto traj = invert(z0, model.null_condition(), rec, sched);
  const auto inversion_calls = rec.calls;
  rec.calls.clear();
  reconstruct_with_substitution(traj, share, rec, sched);
  ASSERT_EQ(rec.calls.size(), 10u);
  for (int s = 1; s <= 10; ++s) {
    const auto& call = rec.calls[s - 1];
    EXPECT_EQ(call.z, traj.latents[10 - s].data) << "step " << s;
    EXPECT_EQ(call.t, sched.timestep_of(s));
    EXPECT_EQ(call.z, inversion_calls[10 - s].z);
    EXPECT_EQ(call.t, inversion_calls[10 - s].t);
  }
}

TEST_F(InversionTest, CacheKeysEqualShareGrid) {
  const auto traj = invert(z0, model.null_condition(), model, sched);
  for (const ShareConfig& cfg :
       {share, ShareConfig{ShareMode::KVShare, {0, 7}, 3, 6}, ShareConfig{ShareMode::QShare, {}, 1, 10},
        ShareConfig{ShareMode::QShare, {2}, 8, 7}}) {
    const auto r = reconstruct_with_substitution(traj, cfg, model, sched);
    EXPECT_EQ(r.cache.keys(), cfg.grid());
    EXPECT_LE(max_abs_diff(r.recon.data, z0.data), 1e-5);
  }
  EXPECT_EQ(share.grid().size(), 4u * (10 - 1));
}

TEST_F(InversionTest, CacheIsImmutableAfterPass) {
  const auto traj = invert(z0, model.null_condition(), model, sched);
  auto r = reconstruct_with_substitution(traj, share, model, sched);
  EXPECT_TRUE(r.cache.finalized());
  EXPECT_THROW(r.cache.insert(5, 4, {}), ConfigError);
  EXPECT_THROW(r.cache.set_clean_latent(Tensor({1})), ConfigError);
  EXPECT_THROW(r.cache.at(1, 4), ConfigError);
}

TEST_F(InversionTest, CachedQueriesMatchIndependentRecompute) {
  const auto traj = invert(z0, model.null_condition(), model, sched);
  const auto r = reconstruct_with_substitution(traj, share, model, sched);
  for (const auto& [step, layer] : std::vector<std::pair<int, int>>{{5, 4}, {10, 7}, {7, 6}}) {
    Tensor hidden;
    AttentionHooks capture;
    capture.by_site[layer] = [&hidden](const SelfAttentionSite& site, const ad::Var& x) {
      hidden = x.value();
      return vanilla_attention(site, x);
    };
    predict_noise(model, traj.latents[10 - step], sched.timestep_of(step), model.null_condition(), &capture);
    const Tensor& w = model.sites()[layer].w_q.value();
    const Tensor& q = r.cache.at(step, layer).q;
    ASSERT_EQ(q.dim(0), hidden.dim(0));
    for (int i = 0; i < hidden.dim(0); ++i)
      for (int j = 0; j < w.dim(1); ++j) {
        double acc = 0.0;
        for (int c = 0; c < hidden.dim(1); ++c) acc += hidden.at(i, c) * w.at(c, j);
        EXPECT_NEAR(q.at(i, j), acc, 1e-12);
      }
  }
}

TEST_F(InversionTest, RecordingDoesNotChangeNoiseEstimates) {
  const auto traj = invert(z0, model.null_condition(), model, sched);
  const auto with = reconstruct_with_substitution(traj, share, model, sched);
  const auto without = reconstruct_with_substitution(traj, ShareConfig{ShareMode::QShare, {}, 1, 10}, model, sched);
  EXPECT_EQ(with.recon.data, without.recon.data);
}

TEST_F(InversionTest, ScheduleMismatchIsConfigError) {
  const auto traj = invert(z0, model.null_condition(), model, sched);
  const NoiseSchedule other = NoiseSchedule::linear({1000, 0.00085, 0.012, 12});
  EXPECT_THROW(reconstruct_with_substitution(traj, share, model, other), ConfigError);
  InversionTrajectory truncated = traj;
  truncated.latents.pop_back();
  EXPECT_THROW(reconstruct_with_substitution(truncated, share, model, sched), ConfigError);
  ShareConfig bad = share;
  bad.shared_layers.push_back(9);
  EXPECT_THROW(reconstruct_with_substitution(traj, bad, model, sched), ConfigError);
}

TEST_F(InversionTest, CacheArchiveRoundTrip) {
  const auto traj = invert(z0, model.null_condition(), model, sched);
  const auto r = reconstruct_with_substitution(traj, share, model, sched);
  const auto path = std::filesystem::temp_directory_path() / "dualedit_cache.dea";
  r.cache.to_archive().save(path);
  const auto back = SourceFeatureCache::from_archive(ArrayArchive::load(path));
  EXPECT_EQ(back.checksum(), r.cache.checksum());
  EXPECT_EQ(back.keys(), r.cache.keys());
  EXPECT_TRUE(back.finalized());
  std::filesystem::remove(path);
}

TEST(GuidedNoise, NullPromptIsSinglePassAndUnchangedByScale) {
  ToyUNet model(ToyUNetConfig{}, 4);
  Rng rng = make_rng(1);
  const ad::Var z = ad::constant(Tensor::randn({4, 16, 16}, rng));
  ad::NoGradGuard no_grad;
  model.reset_forward_calls();
  const Tensor a = guided_noise(model, z, 400, model.null_condition(), 7.5, true, nullptr).value();
  EXPECT_EQ(model.forward_calls(), 1u);
  EXPECT_EQ(a, model.predict(z, 400, model.null_condition()).value());
  const TextCondition c = model.condition({1, 3, 7, 13, 19});
  model.reset_forward_calls();
  const Tensor g = guided_noise(model, z, 400, c, 7.5, true, nullptr).value();
  EXPECT_EQ(model.forward_calls(), 2u);
  const Tensor u = model.predict(z, 400, model.null_condition()).value();
  const Tensor e = model.predict(z, 400, c).value();
  EXPECT_EQ(g, cfg_combine(u, e, 7.5));
  EXPECT_EQ(guided_noise(model, z, 400, c, 7.5, false, nullptr).value(), e);
}

}  // namespace
}  // namespace dualedit

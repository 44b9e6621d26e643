// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
//
//   acceptance [--work-dir DIR] [--only 1,3,9]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dualedit/dualedit.hpp"
#include "support/models.hpp"

namespace dualedit {
namespace {

namespace fs = std::filesystem;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

Tensor randn(Shape s, std::uint64_t seed, double std = 1.0) {
  Rng rng = make_rng(seed);
  return Tensor::randn(std::move(s), rng, std);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Sampling schedule with the default levels and S inference steps.
NoiseSchedule schedule_with(int steps) {
  ScheduleSpec spec;
  spec.inference_steps = steps;
  return NoiseSchedule::linear(spec);
}

// ------------------------------------------------------------------ 1

Verdict faithful_inversion(Models& m) {
  Rng rng = make_rng(2024, 1);
  const ShareConfig share = resolve(RunConfig{}, 8).share;
  double worst_err = 0.0, worst_time = 0.0;
  for (int i = 0; i < 20; ++i) {
    const toy::ToyScene scene = toy::random_scene(rng);
    const Latent z0 = m.codec.encode(toy::render(scene, rng()));
    const auto t0 = std::chrono::steady_clock::now();
    const InversionTrajectory traj = invert(z0, m.denoiser.null_condition(), m.denoiser, m.schedule);
    const Reconstruction r = reconstruct_with_substitution(traj, share, m.denoiser, m.schedule);
    worst_time = std::max(worst_time, seconds_since(t0));
    worst_err = std::max(worst_err, max_abs_diff(r.recon.data, z0.data));
  }
  return {worst_err <= 1e-5 && worst_time < 10.0,
          "20 images, max |recon - source| = " + fmt(worst_err) + ", slowest " + fmt(worst_time, 3) + " s"};
}

// ------------------------------------------------------------------ 2

// Rollout loss used by the gradient checks.
ad::Var probe_loss(const ad::Var& z0, const Tensor& probe) { return ad::dot(z0, ad::constant(probe)); }

std::vector<Tensor> grads_of(const std::vector<ad::Var>& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.grad());
  return out;
}

Verdict gateway_soundness(Models& m) {
  const NoiseSchedule sched = schedule_with(4);
  const toy::EditTriplet trip = toy::make_triplet(toy::TaskCategory::AttributeManipulation, 0, 5);
  const TextCondition target = m.denoiser.condition(trip.target_caption().tokens);
  const InversionTrajectory traj =
      invert(m.codec.encode(trip.image()), m.denoiser.null_condition(), m.denoiser, sched);
  const Tensor probe = randn(traj.noised().data.shape(), 99);
  std::ostringstream detail;

  // (a) no gateways: every trainable gradient is exactly zero.
  bool a_ok = true;
  for (ShareMode mode : {ShareMode::QShare, ShareMode::KVShare}) {
    const ShareConfig share = ShareConfig::defaults(mode, 8, 4);
    const Reconstruction rec = reconstruct_with_substitution(traj, share, m.denoiser, sched);
    const ShareHooks hooks(m.denoiser, share, rec.cache);
    const auto params = apply_trainability(m.denoiser, mode);
    ad::Var zt = ad::parameter(traj.noised().data);
    ad::Var z0 = sample_with_gateways(zt, target, [&](int s) { return hooks.at_step(s); }, GatewaySchedule{},
                                      m.denoiser, sched);
    ad::backward(probe_loss(z0, probe));
    for (const Tensor& g : grads_of(params)) a_ok = a_ok && squared_norm(g) == 0.0;
  }
  detail << "(a) zero-gradient " << (a_ok ? "ok" : "VIOLATED");

  // (b) all gateways against a hand-written full-graph rollout.
  double b_worst = 0.0;
  for (ShareMode mode : {ShareMode::QShare, ShareMode::KVShare}) {
    const ShareConfig share{mode, {0, 1, 2, 3, 4, 5, 6, 7}, 1, 4};
    const Reconstruction rec = reconstruct_with_substitution(traj, share, m.denoiser, sched);
    const ShareHooks hooks(m.denoiser, share, rec.cache);
    auto params = apply_trainability(m.denoiser, mode);
    ad::Var z0 = sample_with_gateways(ad::constant(traj.noised().data), target,
                                      [&](int s) { return hooks.at_step(s); }, all_gateways(4), m.denoiser, sched);
    ad::backward(probe_loss(z0, probe));
    const auto gated = grads_of(params);
    for (auto& p : params) p.zero_grad();

    ad::Var z = ad::constant(traj.noised().data);
    const auto& ts = sched.inference_timesteps();
    for (int s = 1; s <= 4; ++s) {
      const AttentionHooks h = hooks.at_step(s);
      const double at = sched.alphas_cumprod()[ts[s - 1]];
      const double ap = s == 4 ? 1.0 : sched.alphas_cumprod()[ts[s]];
      ad::Var eu = m.denoiser.predict(z, ts[s - 1], m.denoiser.null_condition(), &h);
      ad::Var ec = m.denoiser.predict(z, ts[s - 1], target, &h);
      ad::Var eps = ad::add(eu, ad::scale(ad::sub(ec, eu), 7.5));
      z = ad::add(ad::scale(z, std::sqrt(ap / at)), ad::scale(eps, std::sqrt(1 - ap) - std::sqrt(ap * (1 - at) / at)));
    }
    ad::backward(probe_loss(z, probe));
    const auto full = grads_of(params);
    for (std::size_t i = 0; i < full.size(); ++i) {
      const double scale = std::sqrt(squared_norm(full[i]));
      b_worst = std::max(b_worst, scale > 0 ? max_abs_diff(full[i], gated[i]) / scale : 1.0);
    }
  }
  m.denoiser.reset_clones();
  const bool b_ok = b_worst <= 1e-6;
  detail << "; (b) full-graph rel err " << fmt(b_worst);

  // (c) two-step linear denoiser, only step 1 a gateway.
  const NoiseSchedule two = schedule_with(2);
  const int n = 4;
  LinearDenoiser lin({n}, randn({n, n}, 1, 0.3));
  const Tensor z2 = randn({n}, 2), c = randn({n}, 3);
  GatewaySchedule gw;
  gw.steps = {1};
  ad::Var z0 = sample_with_gateways(ad::constant(z2), lin.null_condition(), nullptr, gw, lin, two, {7.5, false, false});
  ad::backward(ad::dot(z0, ad::constant(c)));
  const int t1 = two.inference_timesteps()[0], t2 = two.inference_timesteps()[1];
  const double a1 = two.alphas_cumprod()[t1], a2 = two.alphas_cumprod()[t2];
  const double k2a = std::sqrt(1 - a2) - std::sqrt(a2 * (1 - a1) / a1);
  const double k1b = std::sqrt(1.0 / a2);
  double c_worst = 0.0;
  const Tensor g = lin.matrix().grad();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) c_worst = std::max(c_worst, std::abs(g.at(i, j) - k2a * k1b * c[i] * z2[j]));
  const bool c_ok = c_worst <= 1e-8;
  detail << "; (c) linear analytic abs err " << fmt(c_worst);
  return {a_ok && b_ok && c_ok, detail.str()};
}

// ------------------------------------------------------------------ 3

// Gradient of the total editing loss with respect to single clone entries,
// checked against central differences of a surrogate in which every
// non-gateway noise term is frozen at its value from the unperturbed rollout.
Verdict finite_differences(Models& m) {
  const int steps = 10;
  const NoiseSchedule sched = schedule_with(steps);
  const toy::EditTriplet trip = toy::make_triplet(toy::TaskCategory::AttributeManipulation, 3, 11);
  const std::vector<int> tokens = trip.target_caption().tokens;
  const TextCondition target = m.denoiser.condition(tokens);
  const InversionTrajectory traj =
      invert(m.codec.encode(trip.image()), m.denoiser.null_condition(), m.denoiser, sched);
  const ShareConfig share = ShareConfig::defaults(ShareMode::QShare, 8, steps);
  const Reconstruction rec = reconstruct_with_substitution(traj, share, m.denoiser, sched);
  const ShareHooks hooks(m.denoiser, share, rec.cache);
  const GatewaySchedule gw = select_gateways(GatewayStrategy::Random, steps, 3, 7);
  const double lambda = 1.0, cfg = 7.5;
  const Tensor text = m.embedder.embed_text(tokens);
  const Tensor clean = rec.cache.clean_latent();

  std::vector<ad::Var> params = apply_trainability(m.denoiser, ShareMode::QShare);
  // Nudge the clones off their frozen values so the probe is generic.
  for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_value() += randn(params[i].shape(), 500 + i, 0.01);

  ad::Var z0 = sample_with_gateways(ad::constant(traj.noised().data), target, [&](int s) { return hooks.at_step(s); },
                                    gw, m.denoiser, sched, {cfg, true, false});
  ad::Var total = ad::lin_comb(1.0, clip_loss(m.embedder.embed_image(m.codec.decode(z0)), ad::constant(text)), lambda,
                               reg_loss(z0, clean));
  ad::backward(total);
  const std::vector<Tensor> grads = grads_of(params);

  // Unperturbed non-gateway noise estimates, recorded once.
  const auto& ts = sched.inference_timesteps();
  auto alpha = [&](int s) { return s > steps ? 1.0 : sched.alphas_cumprod()[ts[s - 1]]; };
  auto noise = [&](const Tensor& z, int s) {
    ad::NoGradGuard no_grad;
    const AttentionHooks h = hooks.at_step(s);
    const Tensor eu = m.denoiser.predict(ad::constant(z), ts[s - 1], m.denoiser.null_condition(), &h).value();
    const Tensor ec = m.denoiser.predict(ad::constant(z), ts[s - 1], target, &h).value();
    Tensor e = eu;
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = eu[i] + cfg * (ec[i] - eu[i]);
    return e;
  };
  std::vector<Tensor> frozen(steps + 1);
  {
    Tensor z = traj.noised().data;
    for (int s = 1; s <= steps; ++s) {
      frozen[s] = noise(z, s);
      const double at = alpha(s), ap = alpha(s + 1);
      const double k1 = std::sqrt(ap / at), k2 = std::sqrt(1 - ap) - std::sqrt(ap * (1 - at) / at);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = k1 * z[i] + k2 * frozen[s][i];
    }
  }
  auto surrogate = [&]() {
    Tensor z = traj.noised().data;
    for (int s = 1; s <= steps; ++s) {
      const Tensor e = gw.contains(s) ? noise(z, s) : frozen[s];
      const double at = alpha(s), ap = alpha(s + 1);
      const double k1 = std::sqrt(ap / at), k2 = std::sqrt(1 - ap) - std::sqrt(ap * (1 - at) / at);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = k1 * z[i] + k2 * e[i];
    }
    ad::NoGradGuard no_grad;
    const Tensor emb = m.embedder.embed_image(m.codec.decode(z));
    double dot = 0.0, ne = 0.0, nt = 0.0, reg = 0.0;
    for (std::size_t i = 0; i < emb.size(); ++i) {
      dot += emb[i] * text[i];
      ne += emb[i] * emb[i];
      nt += text[i] * text[i];
    }
    for (std::size_t i = 0; i < z.size(); ++i) reg += (z[i] - clean[i]) * (z[i] - clean[i]);
    return 1.0 - dot / std::sqrt(ne * nt) + lambda * reg;
  };

  Rng rng = make_rng(31337);
  double worst = 0.0;
  const double h = 1e-4;
  for (int probe = 0; probe < 10; ++probe) {
    const std::size_t p = std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, params[p].size() - 1)(rng);
    double& w = params[p].mutable_value()[k];
    const double w0 = w;
    w = w0 + h;
    const double up = surrogate();
    w = w0 - h;
    const double down = surrogate();
    w = w0;
    const double numeric = (up - down) / (2 * h), analytic = grads[p][k];
    const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-300});
    worst = std::max(worst, rel);
  }
  m.denoiser.reset_clones();
  return {worst <= 1e-3, "10 probes, gateways " + std::to_string(gw.size()) + "/" + std::to_string(steps) +
                             ", worst relative error " + fmt(worst)};
}

// ------------------------------------------------------------------ 4

Verdict memory_contract(Models& m) {
  const toy::EditTriplet trip = toy::make_triplet(toy::TaskCategory::AttributeManipulation, 1, 5);
  const TextCondition target = m.denoiser.condition(trip.target_caption().tokens);
  const Tensor z_T = randn(m.denoiser.latent_shape(), 4);
  apply_trainability(m.denoiser, ShareMode::QShare);
  const StepHooks clones = [](int) {
    AttentionHooks h;
    for (int k = 0; k < 8; ++k) h.by_site[k] = clone_attention;
    return h;
  };
  bool ok = true;
  std::ostringstream detail;
  detail << "S=50 retained/proxy:";
  std::size_t last = 0;
  for (int n : {1, 3, 5, 10}) {
    RolloutStats stats;
    const auto gw = select_gateways(GatewayStrategy::Random, 50, n, 40 + n);
    sample_with_gateways(ad::constant(z_T), target, clones, gw, m.denoiser, m.schedule, {}, &stats);
    ok = ok && stats.retained_graphs == static_cast<std::size_t>(n) && stats.activation_bytes > last;
    last = stats.activation_bytes;
    detail << ' ' << n << "->" << stats.retained_graphs << '/' << stats.activation_bytes;
  }
  detail << "; no-gateway peak bytes for S=10,25,50:";
  std::set<std::size_t> peaks;
  for (int steps : {10, 25, 50}) {
    RolloutStats stats;
    sample_with_gateways(ad::constant(z_T), target, clones, GatewaySchedule{}, m.denoiser, schedule_with(steps), {},
                         &stats);
    ok = ok && stats.retained_graphs == 0;
    peaks.insert(stats.peak_graph_bytes);
    detail << ' ' << stats.peak_graph_bytes;
  }
  m.denoiser.reset_clones();
  return {ok && peaks.size() == 1, detail.str()};
}

// ------------------------------------------------------------------ 5

Verdict attention_identity(Models& m) {
  const int steps = 10;
  const NoiseSchedule sched = schedule_with(steps);
  const toy::EditTriplet trip = toy::make_triplet(toy::TaskCategory::PoseChange, 2, 5);
  const InversionTrajectory traj =
      invert(m.codec.encode(trip.image()), m.denoiser.null_condition(), m.denoiser, sched);
  const ShareConfig all{ShareMode::QShare, {0, 1, 2, 3, 4, 5, 6, 7}, 1, steps};
  const Reconstruction rec = reconstruct_with_substitution(traj, all, m.denoiser, sched);
  m.denoiser.reset_clones();
  double worst = 0.0;
  int checked = 0;
  for (int step = 1; step <= steps; ++step)
    for (int layer : all.shared_layers) {
      Tensor hidden;
      AttentionHooks capture;
      capture.by_site[layer] = [&hidden](const SelfAttentionSite& site, const ad::Var& x) {
        hidden = x.value();
        return vanilla_attention(site, x);
      };
      predict_noise(m.denoiser, traj.latents[steps - step], sched.timestep_of(step), m.denoiser.null_condition(),
                    &capture);
      const auto& site = m.denoiser.sites()[layer];
      ad::NoGradGuard no_grad;
      const Tensor vanilla = vanilla_attention(site, ad::constant(hidden)).value();
      for (ShareMode mode : {ShareMode::QShare, ShareMode::KVShare}) {
        const Tensor shared = attend_shared(ad::constant(hidden), rec.cache.at(step, layer), site, mode).value();
        worst = std::max(worst, max_abs_diff(shared, vanilla));
        ++checked;
      }
    }
  return {worst <= 1e-6, std::to_string(checked) + " (step, layer, mode) cases, max abs diff " + fmt(worst)};
}

// ------------------------------------------------------------------ 6

Verdict edit_effectiveness(Models& m) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig c = testing::trained_config();
  int aligned = 0, descending = 0;
  std::ostringstream cases;
  for (int id = 0; id < 10; ++id) {
    const toy::EditTriplet trip = toy::make_triplet(toy::TaskCategory::AttributeManipulation, id, 600);
    ResolvedEdit r = resolve(c, trip.category, 8);
    r.opt.seed = derive_seed(600, id);
    const auto tokens = trip.target_caption().tokens;
    const PreparedSource src = prepare_source(m, trip.image(), r.share, r.opt.cfg_scale);
    r.opt.loops = 0;
    const EditOutcome direct = edit_prepared(m, src, tokens, r);
    r.opt.loops = 5;
    const EditOutcome tuned = edit_prepared(m, src, tokens, r);
    const bool a = tuned.metrics.alignment_score > direct.metrics.alignment_score;
    const bool l = tuned.result.loops.back().loss.total <= tuned.result.loops.front().loss.total;
    aligned += a;
    descending += l;
    cases << ' ' << (a ? 'A' : 'a') << (l ? 'L' : 'l');
  }
  const double secs = seconds_since(t0);
  return {aligned >= 8 && descending >= 8 && secs < 300.0,
          "alignment improved " + std::to_string(aligned) + "/10, loss non-increasing " + std::to_string(descending) +
              "/10, " + fmt(secs, 3) + " s; per case:" + cases.str()};
}

// ------------------------------------------------------------------ 7

Verdict fidelity_tradeoff(Models& m) {
  RunConfig c = testing::trained_config();
  const toy::EditTriplet trip = toy::make_triplet(toy::TaskCategory::PoseChange, 0, 700);
  ResolvedEdit r = resolve(c, trip.category, 8);
  const PreparedSource src = prepare_source(m, trip.image(), r.share, r.opt.cfg_scale);
  const auto tokens = trip.target_caption().tokens;
  std::vector<double> means;
  for (double lambda : {10.0, 1.0, 0.0}) {
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      r.opt.lambda = lambda;
      r.opt.seed = seed;
      sum += edit_prepared(m, src, tokens, r).metrics.self_sim_distance;
    }
    means.push_back(sum / 5.0);
  }
  return {means[0] < means[1] && means[1] < means[2], "mean self-sim distance at lambda 10/1/0: " +
                                                          fmt(means[0], 8) + " / " + fmt(means[1], 8) + " / " +
                                                          fmt(means[2], 8)};
}

// ------------------------------------------------------------------ 8

Verdict strategy_ablation(Models& m, const fs::path& work) {
  RunConfig c = testing::trained_config();
  c.seed = 800;
  const auto triplets = toy::generate_benchmark(4, 800);
  const std::vector<GatewayStrategy> strategies(std::begin(kAllStrategies), std::end(kAllStrategies));
  const BenchmarkReport rep = run_benchmark(m, triplets, c, strategies);
  const fs::path out = work / "benchmark";
  write_text_atomic(out / "metrics.csv", rep.csv());
  write_text_atomic(out / "table.md", rep.table());
  std::cout << rep.table();
  const double rnd = rep.strategy_mean(GatewayStrategy::Random).alignment;
  const double former = rep.strategy_mean(GatewayStrategy::FormerHalf).alignment;
  const double latter = rep.strategy_mean(GatewayStrategy::LatterHalf).alignment;
  const double strat = rep.strategy_mean(GatewayStrategy::StratifiedIntervals).alignment;
  const bool complete = rep.rows.size() == triplets.size() * strategies.size();
  return {complete && rnd >= former && rnd >= latter,
          std::to_string(triplets.size()) + " triplets; mean alignment random " + fmt(rnd, 6) + ", former " +
              fmt(former, 6) + ", latter " + fmt(latter, 6) + ", stratified " + fmt(strat, 6)};
}

// ------------------------------------------------------------------ 9

Verdict determinism(Models& m, const fs::path& work) {
  RunConfig c = testing::trained_config();
  c.seed = 900;
  c.loops = 2;
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  const toy::EditTriplet trip = toy::make_triplet(toy::TaskCategory::ShapeChange, 0, 900);
  const fs::path image = dir / "source.ppm";
  fs::create_directories(dir);
  write_ppm(image, trip.image());
  c.task = trip.category;
  const ResolvedEdit r = resolve(c, 8);
  const nlohmann::json manifest =
      run_edit(m, c, r, {image.string(), toy::to_string(trip.target_caption())}, dir / "first");
  bool same = true;
  for (int rep = 0; rep < 2; ++rep) {
    ResolvedEdit rr;
    const auto [rc, req] = replay_request(manifest, &rr);
    const fs::path out = dir / ("replay_" + std::to_string(rep));
    const nlohmann::json again = run_edit(m, rc, rr, req, out);
    same = same && slurp(dir / "first" / "final_latent.dea") == slurp(out / "final_latent.dea") &&
           again["final_latent_checksum"] == manifest["final_latent_checksum"];
  }
  return {same, "2 replays of one manifest, final latent checksum " +
                    manifest["final_latent_checksum"].get<std::string>()};
}

}  // namespace
}  // namespace dualedit

int main(int argc, char** argv) {
  using namespace dualedit;
  fs::path work = "acceptance_runs";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work-dir" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      for (int k : parse_int_list(argv[++i])) only.insert(k);
    } else {
      std::cerr << "usage: acceptance [--work-dir DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::create_directories(work);
  Models& models = testing::trained_models();

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"faithful inversion identity", [&] { return faithful_inversion(models); }},
      {"gateway soundness", [&] { return gateway_soundness(models); }},
      {"finite-difference gradient", [&] { return finite_differences(models); }},
      {"memory contract", [&] { return memory_contract(models); }},
      {"attention-share identity", [&] { return attention_identity(models); }},
      {"edit effectiveness trend", [&] { return edit_effectiveness(models); }},
      {"fidelity trade-off", [&] { return fidelity_tradeoff(models); }},
      {"strategy ablation", [&] { return strategy_ablation(models, work); }},
      {"determinism", [&] { return determinism(models, work); }},
  };
  int failed = 0;
  std::ostringstream summary;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    const std::string line = std::string(v.pass ? "PASS" : "FAIL") + " criterion " + std::to_string(id) + " (" +
                             criteria[i].first + "): " + v.detail + " [" + fmt(seconds_since(t0), 3) + " s]";
    std::cout << line << std::endl;
    summary << line << '\n';
  }
  write_text_atomic(work / "acceptance.txt", summary.str());
  return failed == 0 ? 0 : 1;
}

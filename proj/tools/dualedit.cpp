// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train, edit, benchmark, profile, gen-benchmark.
// Exit status: 0 success, 2 usage, 3 configuration, 4 runtime failure.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dualedit/dualedit.hpp"

namespace {

using namespace dualedit;

enum ExitCode { kOk = 0, kUsage = 2, kConfig = 3, kRuntime = 4 };

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

struct EditFlags {
  std::optional<std::string> mode, task, strategy;
  std::optional<double> lambda, learning_rate, cfg_scale;
  std::optional<int> loops, gateways;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "INI run configuration");
  cmd->add_option("--seed", f.seed, "Master seed");
  cmd->add_option("--out", f.out, "Output directory");
}

void add_edit_flags(CLI::App* cmd, EditFlags& f) {
  cmd->add_option("--mode", f.mode, "Feature sharing: structure (queries) or nonrigid (keys/values)")
      ->check(CLI::IsMember({"structure", "nonrigid"}));
  cmd->add_option("--task", f.task, "Task defaults: replacement|attribute|style|pose|shape")
      ->check(CLI::IsMember({"replacement", "attribute", "style", "pose", "shape"}));
  cmd->add_option("--lambda", f.lambda, "Reconstruction strength in [0, 10]");
  cmd->add_option("--lr", f.learning_rate, "Learning rate for the tuned projections");
  cmd->add_option("--loops", f.loops, "Optimisation loops N");
  cmd->add_option("--gateways", f.gateways, "Gateway steps per loop n");
  cmd->add_option("--strategy", f.strategy, "Gateway strategy")
      ->check(CLI::IsMember({"random", "former", "latter", "stratified"}));
  cmd->add_option("--cfg", f.cfg_scale, "Classifier-free guidance scale");
}

RunConfig make_config(const CommonFlags& c, const EditFlags* e = nullptr) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load_ini(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.out_dir = *c.out;
  if (e) {
    if (e->task) cfg.task = toy::parse_task(*e->task);
    if (e->mode) cfg.mode = parse_share_mode(*e->mode);
    if (e->strategy) cfg.strategy = parse_strategy(*e->strategy);
    if (e->lambda) cfg.lambda = *e->lambda;
    if (e->learning_rate) cfg.learning_rate = *e->learning_rate;
    if (e->cfg_scale) cfg.cfg_scale = *e->cfg_scale;
    if (e->loops) cfg.loops = *e->loops;
    if (e->gateways) cfg.gateways = *e->gateways;
  }
  return cfg;
}

void write_curve(const std::filesystem::path& path, const std::vector<double>& curve) {
  std::ostringstream os;
  os << "step,loss\n" << std::setprecision(10);
  for (std::size_t i = 0; i < curve.size(); ++i) os << i << ',' << curve[i] << '\n';
  write_text_atomic(path, os.str());
}

int cmd_train(const CommonFlags& common, const std::string& which) {
  RunConfig cfg = make_config(common);
  const std::filesystem::path out = common.out ? std::filesystem::path(*common.out) : std::filesystem::path(cfg.denoiser_path).parent_path();
  std::filesystem::create_directories(out.empty() ? "." : out);
  nlohmann::json summary = {{"seed", cfg.seed}, {"tool_version", kVersionId}};
  if (which == "denoiser" || which == "all") {
    const auto path = common.out ? out / "denoiser.dea" : std::filesystem::path(cfg.denoiser_path);
    const DenoiserTrainReport r = train_denoiser_checkpoint(cfg, path);
    write_curve(out / "denoiser_curve.csv", r.curve);
    summary["denoiser"] = {{"checkpoint", path.string()},
                           {"eval_loss_untrained", r.eval_loss_untrained},
                           {"eval_loss_trained", r.eval_loss_trained}};
    std::cout << "denoiser: eval loss " << r.eval_loss_untrained << " -> " << r.eval_loss_trained << " (" << path.string()
              << ")\n";
  }
  if (which == "embedder" || which == "all") {
    const auto path = common.out ? out / "embedder.dea" : std::filesystem::path(cfg.embedder_path);
    const EmbedderTrainResult r = train_embedder_checkpoint(cfg, path);
    write_curve(out / "embedder_curve.csv", r.loss);
    summary["embedder"] = {{"checkpoint", path.string()},
                           {"retrieval_accuracy", r.retrieval_accuracy},
                           {"matched_mean", r.matched_mean},
                           {"mismatched_mean", r.mismatched_mean}};
    std::cout << "embedder: retrieval accuracy " << r.retrieval_accuracy << " (" << path.string() << ")\n";
  }
  write_text_atomic(out / "train_summary.json", summary.dump(2) + "\n");
  return kOk;
}

int cmd_edit(const CommonFlags& common, const EditFlags& ef, const std::string& image, const std::string& target,
             const std::string& replay) {
  RunConfig cfg;
  ResolvedEdit resolved;
  EditRequest req;
  if (!replay.empty()) {
    std::ifstream in(replay);
    if (!in) throw InvalidArgument("cannot read manifest " + replay);
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("manifest is not valid JSON: ") + e.what());
    }
    std::tie(cfg, req) = replay_request(manifest, &resolved);
    cfg.out_dir = common.out ? *common.out : cfg.out_dir;
  } else {
    if (image.empty() || target.empty()) throw InvalidArgument("edit needs --image and --target (or --replay)");
    cfg = make_config(common, &ef);
    req = {image, target};
  }
  Models models = load_models(cfg);
  if (replay.empty()) resolved = resolve(cfg, static_cast<int>(models.denoiser.sites().size()));
  const nlohmann::json manifest = run_edit(models, cfg, resolved, req, cfg.out_dir);
  std::cout << "alignment " << manifest["metrics"]["alignment_score"] << ", self-similarity distance "
            << manifest["metrics"]["self_sim_distance"] << "; wrote " << cfg.out_dir << "/manifest.json\n";
  return kOk;
}

int cmd_benchmark(const CommonFlags& common, const EditFlags& ef, const std::string& manifest_path,
                  const std::vector<std::string>& strategy_names) {
  RunConfig cfg = make_config(common, &ef);
  std::vector<GatewayStrategy> strategies;
  for (const auto& s : strategy_names) strategies.push_back(parse_strategy(s));
  if (strategies.empty()) strategies.assign(std::begin(kAllStrategies), std::end(kAllStrategies));
  const auto triplets = toy::read_benchmark_manifest(manifest_path);
  Models models = load_models(cfg);
  const BenchmarkReport rep = run_benchmark(models, triplets, cfg, strategies,
                                            std::filesystem::path(manifest_path).parent_path(), &std::cerr);
  const std::filesystem::path out = cfg.out_dir;
  write_text_atomic(out / "metrics.csv", rep.csv());
  write_text_atomic(out / "table.md", rep.table());
  write_text_atomic(out / "report.json", rep.to_json().dump(2) + "\n");
  std::cout << rep.table();
  return kOk;
}

int cmd_profile(const CommonFlags& common, const EditFlags& ef, const std::vector<int>& counts) {
  RunConfig cfg = make_config(common, &ef);
  Models models = load_models(cfg);
  const toy::EditTriplet probe = toy::make_triplet(cfg.task, 0, cfg.seed);
  const auto rows = run_profile(models, cfg, counts, probe);
  std::ostringstream os;
  os << "gateways,retained_graphs,activation_bytes,peak_graph_bytes,seconds\n";
  for (const auto& r : rows)
    os << r.gateways << ',' << r.retained_graphs << ',' << r.activation_bytes << ',' << r.peak_graph_bytes << ','
       << r.seconds << '\n';
  write_text_atomic(std::filesystem::path(cfg.out_dir) / "profile.csv", os.str());
  std::cout << os.str();
  return kOk;
}

int cmd_gen_benchmark(const CommonFlags& common, int n_per_task) {
  const std::uint64_t seed = common.seed.value_or(0);
  const std::filesystem::path out = common.out.value_or("benchmark");
  auto triplets = toy::generate_benchmark(n_per_task, seed);
  toy::write_benchmark_manifest(out / "manifest.jsonl", triplets, true);
  std::cout << "wrote " << triplets.size() << " triplets to " << (out / "manifest.jsonl").string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch diffusion editing on a desk-scale toy backend"};
  app.require_subcommand(1);

  CommonFlags common;
  EditFlags edit_flags;

  std::string train_which = "all";
  auto* train = app.add_subcommand("train", "Train the toy denoiser and/or embedder");
  add_common(train, common);
  train->add_option("--models", train_which, "denoiser|embedder|all")
      ->check(CLI::IsMember({"denoiser", "embedder", "all"}));

  std::string image, target, replay;
  auto* edit = app.add_subcommand("edit", "Edit one image toward a target caption");
  add_common(edit, common);
  add_edit_flags(edit, edit_flags);
  edit->add_option("--image", image, "Source image (binary PPM)");
  edit->add_option("--target", target, "Target caption, e.g. \"a small blue square at center on plain background\"");
  edit->add_option("--replay", replay, "Re-run the edit recorded in a manifest.json");

  std::string bench_manifest;
  std::vector<std::string> strategies;
  auto* bench = app.add_subcommand("benchmark", "Run the triplet benchmark for each gateway strategy");
  add_common(bench, common);
  add_edit_flags(bench, edit_flags);
  bench->add_option("--manifest", bench_manifest, "Benchmark manifest (JSONL)")->required();
  bench->add_option("--strategies", strategies, "Strategies to compare (default: all four)")->delimiter(',');

  std::vector<int> counts{1, 3, 5, 10};
  auto* profile = app.add_subcommand("profile", "Retained-graph and memory profile per gateway count");
  add_common(profile, common);
  add_edit_flags(profile, edit_flags);
  profile->add_option("--gateway-counts", counts, "Comma-separated gateway counts")->delimiter(',');

  int n_per_task = 20;
  auto* gen = app.add_subcommand("gen-benchmark", "Generate the toy edit-triplet benchmark");
  add_common(gen, common);
  gen->add_option("--n-per-task", n_per_task, "Triplets per task category");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(common, train_which);
    if (*edit) return cmd_edit(common, edit_flags, image, target, replay);
    if (*bench) return cmd_benchmark(common, edit_flags, bench_manifest, strategies);
    if (*profile) return cmd_profile(common, edit_flags, counts);
    if (*gen) return cmd_gen_benchmark(common, n_per_task);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kConfig;
  } catch (const InvalidArgument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}

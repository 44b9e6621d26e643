// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "dualedit/archive.hpp"
#include "dualedit/attention_share.hpp"
#include "dualedit/codec.hpp"
#include "dualedit/embedder.hpp"
#include "dualedit/error.hpp"
#include "dualedit/gateway.hpp"
#include "dualedit/image_io.hpp"
#include "dualedit/inversion.hpp"
#include "dualedit/scheduler.hpp"
#include "dualedit/toy_data.hpp"
#include "dualedit/toy_denoiser.hpp"

#ifndef DUALEDIT_VERSION_ID
#define DUALEDIT_VERSION_ID "dualedit-0.1.0"
#endif

namespace dualedit {

inline constexpr const char* kVersionId = DUALEDIT_VERSION_ID;

// ------------------------------------------------------------------ config

struct TrainSettings {
  int dataset_size = 384;
  DenoiserTrainConfig denoiser;
  EmbedderTrainConfig embedder;
};

/// Everything a run depends on. Unset optionals fall back to the task's
/// defaults when resolved.
struct RunConfig {
  ScheduleSpec schedule;
  std::string denoiser_path = "models/denoiser.dea";
  std::string embedder_path = "models/embedder.dea";

  toy::TaskCategory task = toy::TaskCategory::AttributeManipulation;
  std::optional<ShareMode> mode;
  std::optional<std::vector<int>> shared_layers;
  std::optional<int> first_step;
  std::optional<int> last_step;

  int loops = 3;
  int gateways = 5;
  std::optional<double> learning_rate;
  std::optional<double> lambda;
  double cfg_scale = 7.5;
  bool use_cfg = true;
  GatewayStrategy strategy = GatewayStrategy::Random;

  std::uint64_t seed = 0;
  std::string out_dir = "runs/latest";
  TrainSettings train;

  static RunConfig load_ini(const std::filesystem::path& path);
  void save_ini(const std::filesystem::path& path) const;
};

/// Fully resolved editing parameters (what a manifest records).
struct ResolvedEdit {
  toy::TaskCategory task = toy::TaskCategory::AttributeManipulation;
  ShareConfig share;
  OptimizationConfig opt;
};

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("'" + item + "' is not an integer");
    }
  }
  return out;
}

// Assigns the value under key when present; unparsable text is an error.
template <class T>
void read_key(const boost::property_tree::ptree& tree, const std::string& key, T& out) {
  if (auto child = tree.get_child_optional(boost::property_tree::ptree::path_type(key, '.'))) {
    out = child->get_value<T>();
  }
}

template <class T>
void read_key(const boost::property_tree::ptree& tree, const std::string& key, std::optional<T>& out) {
  if (tree.get_child_optional(boost::property_tree::ptree::path_type(key, '.'))) {
    T v{};
    read_key(tree, key, v);
    out = v;
  }
}

inline RunConfig RunConfig::load_ini(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.what());
  }
  RunConfig c;
  try {
    read_key(tree, "schedule.num_train_steps", c.schedule.num_train_steps);
    read_key(tree, "schedule.beta_start", c.schedule.beta_start);
    read_key(tree, "schedule.beta_end", c.schedule.beta_end);
    read_key(tree, "schedule.steps", c.schedule.inference_steps);
    read_key(tree, "models.denoiser", c.denoiser_path);
    read_key(tree, "models.embedder", c.embedder_path);
    if (auto v = tree.get_optional<std::string>("edit.task")) c.task = toy::parse_task(*v);
    if (auto v = tree.get_optional<std::string>("edit.mode")) c.mode = parse_share_mode(*v);
    if (auto v = tree.get_optional<std::string>("edit.layers")) c.shared_layers = parse_int_list(*v);
    read_key(tree, "edit.first_step", c.first_step);
    read_key(tree, "edit.last_step", c.last_step);
    read_key(tree, "optimize.loops", c.loops);
    read_key(tree, "optimize.gateways", c.gateways);
    read_key(tree, "optimize.learning_rate", c.learning_rate);
    read_key(tree, "optimize.lambda", c.lambda);
    read_key(tree, "optimize.cfg_scale", c.cfg_scale);
    read_key(tree, "optimize.use_cfg", c.use_cfg);
    if (auto v = tree.get_optional<std::string>("optimize.strategy")) c.strategy = parse_strategy(*v);
    read_key(tree, "run.seed", c.seed);
    read_key(tree, "run.out", c.out_dir);
    read_key(tree, "train.dataset_size", c.train.dataset_size);
    read_key(tree, "train.denoiser_steps", c.train.denoiser.steps);
    read_key(tree, "train.denoiser_batch", c.train.denoiser.batch_size);
    read_key(tree, "train.denoiser_lr", c.train.denoiser.learning_rate);
    read_key(tree, "train.embedder_steps", c.train.embedder.steps);
    read_key(tree, "train.embedder_batch", c.train.embedder.batch_size);
    read_key(tree, "train.embedder_lr", c.train.embedder.learning_rate);
  } catch (const pt::ptree_bad_data& e) {
    throw ConfigError(std::string("bad value in config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline void RunConfig::save_ini(const std::filesystem::path& path) const {
  namespace pt = boost::property_tree;
  pt::ptree t;
  t.put("schedule.num_train_steps", schedule.num_train_steps);
  t.put("schedule.beta_start", schedule.beta_start);
  t.put("schedule.beta_end", schedule.beta_end);
  t.put("schedule.steps", schedule.inference_steps);
  t.put("models.denoiser", denoiser_path);
  t.put("models.embedder", embedder_path);
  t.put("edit.task", std::string(toy::task_name(task)));
  if (mode) t.put("edit.mode", std::string(to_string(*mode)));
  if (shared_layers) t.put("edit.layers", join_ints(*shared_layers));
  if (first_step) t.put("edit.first_step", *first_step);
  if (last_step) t.put("edit.last_step", *last_step);
  t.put("optimize.loops", loops);
  t.put("optimize.gateways", gateways);
  if (learning_rate) t.put("optimize.learning_rate", *learning_rate);
  if (lambda) t.put("optimize.lambda", *lambda);
  t.put("optimize.cfg_scale", cfg_scale);
  t.put("optimize.use_cfg", use_cfg);
  t.put("optimize.strategy", std::string(to_string(strategy)));
  t.put("run.seed", seed);
  t.put("run.out", out_dir);
  t.put("train.dataset_size", train.dataset_size);
  t.put("train.denoiser_steps", train.denoiser.steps);
  t.put("train.denoiser_batch", train.denoiser.batch_size);
  t.put("train.denoiser_lr", train.denoiser.learning_rate);
  t.put("train.embedder_steps", train.embedder.steps);
  t.put("train.embedder_batch", train.embedder.batch_size);
  t.put("train.embedder_lr", train.embedder.learning_rate);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  pt::write_ini(path.string(), t);
}

inline ResolvedEdit resolve(const RunConfig& c, toy::TaskCategory task, int site_count) {
  const TaskDefaults d = task_defaults(task);
  ResolvedEdit r;
  r.task = task;
  r.share = ShareConfig::defaults(c.mode.value_or(d.mode), site_count, c.schedule.inference_steps);
  if (c.shared_layers) r.share.shared_layers = *c.shared_layers;
  if (c.first_step) r.share.first_step = *c.first_step;
  if (c.last_step) r.share.last_step = *c.last_step;
  r.opt.loops = c.loops;
  r.opt.gateways = c.gateways;
  r.opt.learning_rate = c.learning_rate.value_or(d.learning_rate);
  r.opt.lambda = c.lambda.value_or(d.lambda);
  r.opt.cfg_scale = c.cfg_scale;
  r.opt.use_cfg = c.use_cfg;
  r.opt.strategy = c.strategy;
  r.opt.seed = c.seed;
  return r;
}
inline ResolvedEdit resolve(const RunConfig& c, int site_count) { return resolve(c, c.task, site_count); }

inline nlohmann::json to_json(const ScheduleSpec& s) {
  return {{"num_train_steps", s.num_train_steps},
          {"beta_start", s.beta_start},
          {"beta_end", s.beta_end},
          {"steps", s.inference_steps}};
}

inline nlohmann::json to_json(const ResolvedEdit& r) {
  return {{"task", toy::task_name(r.task)},
          {"share", {{"mode", to_string(r.share.mode)},
                     {"layers", r.share.shared_layers},
                     {"step_window", {r.share.first_step, r.share.last_step}}}},
          {"optimize", {{"loops", r.opt.loops},
                        {"gateways", r.opt.gateways},
                        {"learning_rate", r.opt.learning_rate},
                        {"betas", {r.opt.beta1, r.opt.beta2}},
                        {"lambda", r.opt.lambda},
                        {"cfg_scale", r.opt.cfg_scale},
                        {"use_cfg", r.opt.use_cfg},
                        {"strategy", to_string(r.opt.strategy)},
                        {"seed", r.opt.seed}}}};
}

inline ResolvedEdit resolved_from_json(const nlohmann::json& j) {
  ResolvedEdit r;
  r.task = toy::parse_task(j.at("task").get<std::string>());
  const auto& s = j.at("share");
  r.share.mode = parse_share_mode(s.at("mode").get<std::string>());
  r.share.shared_layers = s.at("layers").get<std::vector<int>>();
  r.share.first_step = s.at("step_window").at(0);
  r.share.last_step = s.at("step_window").at(1);
  const auto& o = j.at("optimize");
  r.opt.loops = o.at("loops");
  r.opt.gateways = o.at("gateways");
  r.opt.learning_rate = o.at("learning_rate");
  r.opt.beta1 = o.at("betas").at(0);
  r.opt.beta2 = o.at("betas").at(1);
  r.opt.lambda = o.at("lambda");
  r.opt.cfg_scale = o.at("cfg_scale");
  r.opt.use_cfg = o.at("use_cfg");
  r.opt.strategy = parse_strategy(o.at("strategy").get<std::string>());
  r.opt.seed = o.at("seed");
  return r;
}

// ------------------------------------------------------------------ models

struct Models {
  NoiseSchedule schedule;
  ToyUNet denoiser;
  ToyEmbedder embedder;
  ToyCodec codec;

  EditInputs inputs() { return {&denoiser, &schedule, &embedder, &codec}; }
};

inline std::vector<DenoiserSample> make_denoiser_dataset(int n, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("dataset size must be at least 1");
  Rng rng = make_rng(seed, 0xDA7A);
  ToyCodec codec;
  std::vector<DenoiserSample> out;
  for (int i = 0; i < n; ++i) {
    const toy::ToyScene s = toy::random_scene(rng);
    out.push_back({codec.encode(toy::render(s, rng())).data, toy::caption_of(s).tokens});
  }
  return out;
}

struct DenoiserTrainReport {
  std::vector<double> curve;
  double eval_loss_untrained = 0.0;
  double eval_loss_trained = 0.0;
};

inline DenoiserTrainReport train_denoiser_checkpoint(const RunConfig& c, const std::filesystem::path& out) {
  const NoiseSchedule sched = NoiseSchedule::linear(c.schedule);
  const auto data = make_denoiser_dataset(c.train.dataset_size, derive_seed(c.seed, 11));
  const auto held_out = make_denoiser_dataset(64, derive_seed(c.seed, 12));
  ToyUNet model(ToyUNetConfig{}, derive_seed(c.seed, 13));
  DenoiserTrainReport r;
  r.eval_loss_untrained = denoiser_eval_loss(model, held_out, sched, 99, 64);
  DenoiserTrainConfig tc = c.train.denoiser;
  tc.seed = derive_seed(c.seed, 14);
  r.curve = train_toy_denoiser(model, data, sched, tc);
  r.eval_loss_trained = denoiser_eval_loss(model, held_out, sched, 99, 64);
  model.save(out, sched.id());
  return r;
}

inline EmbedderTrainResult train_embedder_checkpoint(const RunConfig& c, const std::filesystem::path& out) {
  ToyEmbedder model(ToyEmbedderConfig{}, derive_seed(c.seed, 21));
  EmbedderTrainConfig tc = c.train.embedder;
  tc.seed = derive_seed(c.seed, 22);
  EmbedderTrainResult r = train_toy_embedder(model, tc);
  model.save(out, {{"retrieval_accuracy", r.retrieval_accuracy},
                   {"matched_mean", r.matched_mean},
                   {"mismatched_mean", r.mismatched_mean},
                   {"final_loss", r.loss.empty() ? 0.0 : r.loss.back()}});
  return r;
}

inline Models load_models(const RunConfig& c) {
  for (const auto& p : {c.denoiser_path, c.embedder_path}) {
    if (!std::filesystem::exists(p)) throw ConfigError("checkpoint " + p + " does not exist (run `dualedit train`)");
  }
  std::string schedule_id;
  ToyUNet unet = ToyUNet::load(c.denoiser_path, &schedule_id);
  NoiseSchedule sched = NoiseSchedule::linear(c.schedule);
  // The inference grid may differ from training; the noise levels may not.
  auto levels = [](const std::string& id) { return id.substr(0, id.rfind(':')); };
  if (levels(schedule_id) != levels(sched.id())) {
    throw ConfigError("denoiser was trained with schedule '" + schedule_id + "', config uses '" + sched.id() + "'");
  }
  return Models{std::move(sched), std::move(unet), ToyEmbedder::load(c.embedder_path), ToyCodec{}};
}

// ------------------------------------------------------------------ edit

struct EditOutcome {
  EditResult result;
  Reconstruction recon;
  MetricReport metrics;
  double source_alignment = 0.0;  // source image vs target caption
  double reconstruction_error = 0.0;
  double seconds_invert = 0.0, seconds_reconstruct = 0.0, seconds_optimize = 0.0;
  std::size_t calls_invert = 0, calls_reconstruct = 0;
};

struct PreparedSource {
  Tensor image;
  InversionTrajectory trajectory;
  Reconstruction recon;
  double seconds_invert = 0.0, seconds_reconstruct = 0.0;
  std::size_t calls_invert = 0, calls_reconstruct = 0;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline PreparedSource prepare_source(Models& m, const Tensor& image, const ShareConfig& share, double cfg_scale) {
  PreparedSource p;
  p.image = image;
  const Latent z0 = m.codec.encode(image);
  auto t0 = std::chrono::steady_clock::now();
  m.denoiser.reset_forward_calls();
  p.trajectory = invert(z0, m.denoiser.null_condition(), m.denoiser, m.schedule, cfg_scale);
  p.calls_invert = m.denoiser.forward_calls();
  p.seconds_invert = seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  m.denoiser.reset_forward_calls();
  p.recon = reconstruct_with_substitution(p.trajectory, share, m.denoiser, m.schedule);
  p.calls_reconstruct = m.denoiser.forward_calls();
  p.seconds_reconstruct = seconds_since(t0);
  return p;
}

inline EditOutcome edit_prepared(Models& m, const PreparedSource& src, const std::vector<int>& target_tokens,
                                 const ResolvedEdit& r) {
  EditOutcome o;
  const TextCondition target = m.denoiser.condition(target_tokens);
  const auto t0 = std::chrono::steady_clock::now();
  o.result = optimize_edit(src.trajectory, src.recon.cache, r.share, target, target_tokens, r.opt, m.inputs());
  o.seconds_optimize = seconds_since(t0);
  o.recon = src.recon;
  o.reconstruction_error = max_abs_diff(src.recon.recon.data, src.trajectory.source().data);
  o.seconds_invert = src.seconds_invert;
  o.seconds_reconstruct = src.seconds_reconstruct;
  o.calls_invert = src.calls_invert;
  o.calls_reconstruct = src.calls_reconstruct;
  o.metrics.task_category = r.task;
  o.metrics.alignment_score = alignment_score(o.result.final_image, target_tokens, m.embedder);
  o.metrics.self_sim_distance = self_similarity_distance(src.image, o.result.final_image, m.embedder);
  o.source_alignment = alignment_score(src.image, target_tokens, m.embedder);
  return o;
}

inline EditOutcome edit_image(Models& m, const Tensor& image, const std::vector<int>& target_tokens,
                              const ResolvedEdit& r) {
  return edit_prepared(m, prepare_source(m, image, r.share, r.opt.cfg_scale), target_tokens, r);
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

struct EditRequest {
  std::string image_path;
  std::string target_caption;  // free text in the closed vocabulary
};

/// Runs one edit end to end and writes images, latent archive, loss stream
/// and manifest.json into out_dir. Returns the manifest.
inline nlohmann::json run_edit(Models& m, const RunConfig& c, const ResolvedEdit& r, const EditRequest& req,
                               const std::filesystem::path& out_dir) {
  const Tensor image = read_ppm(req.image_path);
  const toy::Caption caption = toy::parse_caption(req.target_caption);
  if (caption.tokens.empty()) throw InvalidArgument("target caption has no vocabulary words");
  const auto t0 = std::chrono::steady_clock::now();
  EditOutcome o = edit_image(m, image, caption.tokens, r);
  const double total_seconds = seconds_since(t0);

  std::filesystem::create_directories(out_dir);
  nlohmann::json loops = nlohmann::json::array();
  std::string history;
  for (const LoopRecord& rec : o.result.loops) {
    const std::string img = "loop_" + std::to_string(rec.loss.loop_index) + ".ppm";
    write_ppm(out_dir / img, rec.image);
    nlohmann::json row = {{"loop", rec.loss.loop_index},
                          {"gateways", rec.gateways.steps},
                          {"l_clip", rec.loss.l_clip},
                          {"l_reg", rec.loss.l_reg},
                          {"total", rec.loss.total}};
    history += row.dump() + "\n";
    row["image"] = img;
    row["retained_graphs"] = rec.stats.retained_graphs;
    row["activation_bytes"] = rec.stats.activation_bytes;
    row["peak_graph_bytes"] = rec.stats.peak_graph_bytes;
    row["seconds"] = rec.seconds;
    loops.push_back(row);
  }
  write_text_atomic(out_dir / "loss_history.jsonl", history);
  write_ppm(out_dir / "final.ppm", o.result.final_image, 65535);
  ArrayArchive latent;
  latent.header = {{"format", "dualedit.latent"}, {"version", 1}};
  latent.arrays["final_latent"] = o.result.final_latent;
  latent.save(out_dir / "final_latent.dea");

  nlohmann::json manifest = {
      {"format", "dualedit.run"},
      {"version", 1},
      {"tool_version", kVersionId},
      {"created_at", utc_timestamp()},
      {"schedule", to_json(c.schedule)},
      {"models", {{"denoiser", c.denoiser_path}, {"embedder", c.embedder_path}}},
      {"edit", to_json(r)},
      {"seed", c.seed},
      {"input", {{"image", req.image_path}, {"target_caption", toy::to_string(caption)}}},
      {"loops", loops},
      {"final_image", "final.ppm"},
      {"final_latent", "final_latent.dea"},
      {"final_latent_checksum", hex64(checksum(o.result.final_latent))},
      {"reconstruction_max_error", o.reconstruction_error},
      {"metrics", {{"task", toy::task_name(o.metrics.task_category)},
                   {"alignment_score", o.metrics.alignment_score},
                   {"self_sim_distance", o.metrics.self_sim_distance},
                   {"source_alignment_score", o.source_alignment}}},
      {"counters", {{"forward_calls_inversion", o.calls_invert},
                    {"forward_calls_reconstruction", o.calls_reconstruct},
                    {"feature_cache_entries", o.recon.cache.size()}}},
      {"timing_seconds", {{"invert", o.seconds_invert},
                          {"reconstruct", o.seconds_reconstruct},
                          {"optimize", o.seconds_optimize},
                          {"total", total_seconds}}}};
  write_text_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

/// Rebuilds the config and request recorded in a manifest.
inline std::pair<RunConfig, EditRequest> replay_request(const nlohmann::json& manifest, ResolvedEdit* resolved) {
  if (manifest.value("format", "") != "dualedit.run") throw ConfigError("not a run manifest");
  RunConfig c;
  const auto& s = manifest.at("schedule");
  c.schedule = {s.at("num_train_steps"), s.at("beta_start"), s.at("beta_end"), s.at("steps")};
  c.denoiser_path = manifest.at("models").at("denoiser");
  c.embedder_path = manifest.at("models").at("embedder");
  c.seed = manifest.at("seed");
  *resolved = resolved_from_json(manifest.at("edit"));
  c.task = resolved->task;
  EditRequest req{manifest.at("input").at("image"), manifest.at("input").at("target_caption")};
  return {c, req};
}

// ------------------------------------------------------------------ benchmark

struct BenchmarkRow {
  int id = 0;
  toy::TaskCategory category = toy::TaskCategory::AttributeManipulation;
  GatewayStrategy strategy = GatewayStrategy::Random;
  double alignment = 0.0;
  double self_sim = 0.0;
};

struct MeanCell {
  double alignment = 0.0;
  double self_sim = 0.0;
  int count = 0;
};

struct BenchmarkReport {
  std::vector<BenchmarkRow> rows;
  std::vector<std::string> skipped;  // triplets that could not be loaded
  std::vector<GatewayStrategy> strategies;

  // Mean over the rows selected by pred.
  template <class Pred>
  MeanCell mean_where(Pred pred) const {
    MeanCell m;
    for (const auto& r : rows)
      if (pred(r)) {
        m.alignment += r.alignment;
        m.self_sim += r.self_sim;
        ++m.count;
      }
    if (m.count) {
      m.alignment /= m.count;
      m.self_sim /= m.count;
    }
    return m;
  }
  MeanCell category_mean(GatewayStrategy s, toy::TaskCategory c) const {
    return mean_where([&](const BenchmarkRow& r) { return r.strategy == s && r.category == c; });
  }
  MeanCell group_mean(GatewayStrategy s, bool structure_preserved) const {
    return mean_where([&](const BenchmarkRow& r) {
      return r.strategy == s && toy::is_structure_preserved(r.category) == structure_preserved;
    });
  }
  MeanCell strategy_mean(GatewayStrategy s) const {
    return mean_where([&](const BenchmarkRow& r) { return r.strategy == s; });
  }

  std::string csv() const {
    std::ostringstream os;
    os << "id,category,strategy,alignment_score,self_sim_distance\n";
    os << std::setprecision(10);
    for (const auto& r : rows)
      os << r.id << ',' << toy::task_name(r.category) << ',' << to_string(r.strategy) << ',' << r.alignment << ','
         << r.self_sim << '\n';
    return os.str();
  }

  // Per-category columns in task order, then the two groups; one row per
  // strategy and metric.
  std::string table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << "| strategy | metric |";
    for (auto c : toy::kTaskOrder) os << ' ' << toy::task_name(c) << " |";
    os << " structure | nonrigid | all |\n|---|---|";
    for (std::size_t i = 0; i < toy::kTaskOrder.size() + 3; ++i) os << "---|";
    os << '\n';
    for (GatewayStrategy s : strategies) {
      for (int metric = 0; metric < 2; ++metric) {
        auto pick = [metric](const MeanCell& m) { return metric == 0 ? m.alignment : m.self_sim; };
        os << "| " << to_string(s) << " | " << (metric == 0 ? "alignment" : "self_sim") << " |";
        for (auto c : toy::kTaskOrder) os << ' ' << pick(category_mean(s, c)) << " |";
        os << ' ' << pick(group_mean(s, true)) << " | " << pick(group_mean(s, false)) << " | "
           << pick(strategy_mean(s)) << " |\n";
      }
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"skipped", skipped}};
    for (GatewayStrategy s : strategies) {
      nlohmann::json cats;
      for (auto c : toy::kTaskOrder) {
        const MeanCell m = category_mean(s, c);
        cats[std::string(toy::task_name(c))] = {{"alignment", m.alignment}, {"self_sim", m.self_sim}, {"n", m.count}};
      }
      const MeanCell sp = group_mean(s, true), nr = group_mean(s, false), all = strategy_mean(s);
      j["strategies"][std::string(to_string(s))] = {
          {"categories", cats},
          {"structure", {{"alignment", sp.alignment}, {"self_sim", sp.self_sim}, {"n", sp.count}}},
          {"nonrigid", {{"alignment", nr.alignment}, {"self_sim", nr.self_sim}, {"n", nr.count}}},
          {"all", {{"alignment", all.alignment}, {"self_sim", all.self_sim}, {"n", all.count}}}};
    }
    return j;
  }
};

/// Every triplet is inverted once; each strategy then optimises its own edit
/// with the category's defaults (config overrides still apply). Triplets whose
/// image cannot be read are reported in `skipped`.
inline BenchmarkReport run_benchmark(Models& m, const std::vector<toy::EditTriplet>& triplets, const RunConfig& c,
                                     const std::vector<GatewayStrategy>& strategies,
                                     const std::filesystem::path& image_root = {}, std::ostream* log = nullptr) {
  BenchmarkReport rep;
  rep.strategies = strategies;
  const int sites = static_cast<int>(m.denoiser.sites().size());
  for (const auto& t : triplets) {
    Tensor image;
    if (t.image_path.empty()) {
      image = t.image();
    } else {
      try {
        image = read_ppm(image_root / t.image_path);
      } catch (const IoError& e) {
        rep.skipped.push_back(std::to_string(t.id) + ": " + e.what());
        if (log) *log << "warning: skipping triplet " << t.id << ": " << e.what() << '\n';
        continue;
      }
    }
    ResolvedEdit r = resolve(c, t.category, sites);
    const auto target = t.target_caption().tokens;
    const PreparedSource src = prepare_source(m, image, r.share, r.opt.cfg_scale);
    for (GatewayStrategy s : strategies) {
      r.opt.strategy = s;
      r.opt.seed = derive_seed(c.seed, static_cast<std::uint64_t>(t.id));
      const EditOutcome o = edit_prepared(m, src, target, r);
      rep.rows.push_back({t.id, t.category, s, o.metrics.alignment_score, o.metrics.self_sim_distance});
      if (log) {
        *log << "triplet " << t.id << ' ' << toy::task_name(t.category) << ' ' << to_string(s)
             << " alignment=" << o.metrics.alignment_score << " self_sim=" << o.metrics.self_sim_distance << '\n';
      }
    }
  }
  return rep;
}

// ------------------------------------------------------------------ profile

struct ProfileRow {
  int gateways = 0;
  std::size_t retained_graphs = 0;
  std::size_t activation_bytes = 0;
  std::size_t peak_graph_bytes = 0;
  double seconds = 0.0;
};

/// One optimisation loop per gateway count on a fixed toy case.
inline std::vector<ProfileRow> run_profile(Models& m, const RunConfig& c, const std::vector<int>& gateway_counts,
                                           const toy::EditTriplet& probe) {
  ResolvedEdit r = resolve(c, probe.category, static_cast<int>(m.denoiser.sites().size()));
  r.opt.loops = 1;
  const PreparedSource src = prepare_source(m, probe.image(), r.share, r.opt.cfg_scale);
  const TextCondition target = m.denoiser.condition(probe.target_caption().tokens);
  std::vector<ProfileRow> rows;
  for (int n : gateway_counts) {
    r.opt.gateways = n;
    const EditResult e =
        optimize_edit(src.trajectory, src.recon.cache, r.share, target, probe.target_caption().tokens, r.opt,
                      m.inputs());
    const LoopRecord& l = e.loops.front();
    rows.push_back({n, l.stats.retained_graphs, l.stats.activation_bytes, l.stats.peak_graph_bytes, l.seconds});
  }
  return rows;
}

}  // namespace dualedit

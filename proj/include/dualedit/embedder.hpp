// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualedit/adam.hpp"
#include "dualedit/archive.hpp"
#include "dualedit/autograd.hpp"
#include "dualedit/error.hpp"
#include "dualedit/rng.hpp"
#include "dualedit/toy_data.hpp"

namespace dualedit {

/// Joint text/image embedding space. Images are [3,H,W] in [0,1].
class TextImageEmbedder {
 public:
  virtual ~TextImageEmbedder() = default;
  virtual int dim() const = 0;
  // Unit vector [dim]; differentiable with respect to the image.
  virtual ad::Var embed_image(const ad::Var& image) const = 0;
  // Unit vector [dim].
  virtual Tensor embed_text(const std::vector<int>& tokens) const = 0;
  // [patches, feat_dim]
  virtual ad::Var patch_features(const ad::Var& image) const = 0;

  Tensor embed_image(const Tensor& image) const {
    ad::NoGradGuard no_grad;
    return embed_image(ad::constant(image)).value();
  }
};

struct ToyEmbedderConfig {
  int dim = 64;
  int patch = 4;
  int hidden = 32;
  int image_size = 16;
  int vocab_size = toy::vocab::kSize;

  int patches() const { return (image_size / patch) * (image_size / patch); }

  nlohmann::json to_json() const {
    return {{"dim", dim}, {"patch", patch}, {"hidden", hidden}, {"image_size", image_size}, {"vocab_size", vocab_size}};
  }
  static ToyEmbedderConfig from_json(const nlohmann::json& j) {
    return {j.at("dim"), j.at("patch"), j.at("hidden"), j.at("image_size"), j.at("vocab_size")};
  }
};

/// Patch MLP image tower with a flattened projection (keeps patch position)
/// and a bag-of-tokens text tower, both L2-normalised.
class ToyEmbedder final : public TextImageEmbedder {
 public:
  static constexpr const char* kFormat = "dualedit.toy_embedder";

  ToyEmbedder(ToyEmbedderConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
    if (cfg_.image_size % cfg_.patch) throw InvalidArgument("image size must be a multiple of the patch size");
    Rng rng = make_rng(init_seed, 0xE3BED);
    const int in = 3 * cfg_.patch * cfg_.patch, flat = cfg_.patches() * cfg_.hidden;
    params_["patch.w"] = ad::parameter(Tensor::randn({in, cfg_.hidden}, rng, 1.0 / std::sqrt(in)));
    params_["patch.b"] = ad::parameter(Tensor(Shape{cfg_.hidden}));
    params_["proj.w"] = ad::parameter(Tensor::randn({flat, cfg_.dim}, rng, 1.0 / std::sqrt(flat)));
    params_["proj.b"] = ad::parameter(Tensor(Shape{cfg_.dim}));
    params_["tok"] = ad::parameter(Tensor::randn({cfg_.vocab_size, cfg_.dim}, rng, 1.0));
    set_training(false);
  }

  const ToyEmbedderConfig& config() const { return cfg_; }
  int dim() const override { return cfg_.dim; }

  ad::Var patch_features(const ad::Var& image) const override {
    if (image.shape() != Shape{3, cfg_.image_size, cfg_.image_size}) {
      throw InvalidArgument("embedder expects [3," + std::to_string(cfg_.image_size) + "," +
                            std::to_string(cfg_.image_size) + "] images, got " + shape_str(image.shape()));
    }
    ad::Var centered = ad::add_scalar(ad::scale(image, 2.0), -1.0);
    return ad::silu(ad::add_row_bias(ad::matmul(ad::patchify(centered, cfg_.patch), p("patch.w")), p("patch.b")));
  }

  ad::Var embed_image(const ad::Var& image) const override {
    ad::Var f = patch_features(image);
    ad::Var flat = ad::reshape(f, {1, static_cast<int>(f.size())});
    ad::Var e = ad::add_row_bias(ad::matmul(flat, p("proj.w")), p("proj.b"));
    return ad::l2_normalize(ad::reshape(e, {cfg_.dim}));
  }
  using TextImageEmbedder::embed_image;

  ad::Var embed_text_var(const std::vector<int>& tokens) const {
    check_tokens(tokens);
    return ad::l2_normalize(ad::reshape(ad::mean_rows(ad::gather_rows(p("tok"), tokens)), {cfg_.dim}));
  }

  Tensor embed_text(const std::vector<int>& tokens) const override {
    ad::NoGradGuard no_grad;
    return embed_text_var(tokens).value();
  }

  void check_tokens(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw InvalidArgument("caption has no tokens");
    for (int t : tokens) {
      if (t < 0 || t >= cfg_.vocab_size) {
        throw InvalidArgument("token " + std::to_string(t) + " is outside the embedder vocabulary");
      }
    }
  }

  void set_training(bool on) {
    for (auto& [n, v] : params_) v.set_requires_grad(on);
  }
  std::vector<ad::Var> parameter_list() const {
    std::vector<ad::Var> out;
    for (const auto& [n, v] : params_) out.push_back(v);
    return out;
  }
  std::map<std::string, Tensor> state() const {
    std::map<std::string, Tensor> s;
    for (const auto& [n, v] : params_) s.emplace(n, v.value());
    return s;
  }
  void load_state(const std::map<std::string, Tensor>& s) {
    for (auto& [n, v] : params_) {
      auto it = s.find(n);
      if (it == s.end() || it->second.shape() != v.shape()) throw IoError("embedder checkpoint mismatch at '" + n + "'");
      v.mutable_value() = it->second;
    }
  }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const {
    ArrayArchive a;
    a.header = {{"format", kFormat}, {"version", 1}, {"architecture", cfg_.to_json()}};
    if (!extra.is_null()) a.header["training"] = extra;
    a.arrays = state();
    a.save(path);
  }
  static ToyEmbedder load(const std::filesystem::path& path) {
    ArrayArchive a = ArrayArchive::load(path);
    if (a.header.value("format", "") != kFormat) throw IoError(path.string() + " is not a toy embedder checkpoint");
    ToyEmbedder e(ToyEmbedderConfig::from_json(a.header.at("architecture")), 0);
    e.load_state(a.arrays);
    return e;
  }

 private:
  const ad::Var& p(const std::string& name) const { return params_.at(name); }

  ToyEmbedderConfig cfg_;
  std::map<std::string, ad::Var> params_;
};

// ------------------------------------------------------------------ metrics

inline double alignment_score(const Tensor& image, const std::vector<int>& tokens, const TextImageEmbedder& e) {
  const Tensor a = e.embed_image(image);
  const Tensor b = e.embed_text(tokens);
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
  return 100.0 * d;
}

// Cosine Gram matrix of mean-centred patch features.
inline Tensor self_similarity(const Tensor& image, const TextImageEmbedder& e) {
  ad::NoGradGuard no_grad;
  Tensor f = e.patch_features(ad::constant(image)).value();
  const int n = f.dim(0), d = f.dim(1);
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += f.at(i, j) / n;
    for (int i = 0; i < n; ++i) f.at(i, j) -= mean;
  }
  for (int i = 0; i < n; ++i) {
    double norm = 0.0;
    for (int j = 0; j < d; ++j) norm += f.at(i, j) * f.at(i, j);
    norm = std::sqrt(norm) + 1e-12;
    for (int j = 0; j < d; ++j) f.at(i, j) /= norm;
  }
  Tensor g(Shape{n, n});
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += f.at(i, j) * f.at(k, j);
      g.at(i, k) = s;
    }
  return g;
}

inline double self_similarity_distance(const Tensor& a, const Tensor& b, const TextImageEmbedder& e) {
  const Tensor ga = self_similarity(a, e), gb = self_similarity(b, e);
  double s = 0.0;
  for (std::size_t i = 0; i < ga.size(); ++i) s += (ga[i] - gb[i]) * (ga[i] - gb[i]);
  return std::sqrt(s);
}

struct MetricReport {
  double alignment_score = 0.0;
  double self_sim_distance = 0.0;
  toy::TaskCategory task_category = toy::TaskCategory::AttributeManipulation;
};

// ------------------------------------------------------------------ training

struct EmbedderTrainConfig {
  int steps = 1500;
  int batch_size = 32;
  double learning_rate = 3e-3;
  double logit_scale = 10.0;
  int eval_galleries = 50;
  std::uint64_t seed = 0;
};

struct EmbedderTrainResult {
  std::vector<double> loss;
  double retrieval_accuracy = 0.0;  // held-out colour+shape caption -> image, top-1
  double matched_mean = 0.0;        // mean cosine of matched pairs on a held-out batch
  double mismatched_mean = 0.0;     // mean cosine of mismatched pairs on the same batch
};

struct CaptionedImage {
  Tensor image;
  toy::Caption caption;
};

// Random scene with a caption naming a random subset of its fields
// (colour and shape are named most of the time).
inline CaptionedImage sample_captioned_image(Rng& rng) {
  const toy::ToyScene scene = toy::random_scene(rng);
  std::bernoulli_distribution main(0.85), other(0.5);
  toy::FieldMask m;
  m.color = main(rng);
  m.shape = main(rng);
  m.size = other(rng);
  m.position = other(rng);
  m.background = other(rng);
  if (!(m.color || m.shape || m.size || m.position || m.background)) m.shape = true;
  return {toy::render(scene, rng()), toy::caption_of(scene, m)};
}

/// Top-1 caption-to-image retrieval over galleries of the 12 colour x shape
/// combinations (other fields random per image), queried with two-word captions.
inline double retrieval_accuracy(const TextImageEmbedder& e, int galleries, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x6A11);
  int hits = 0, total = 0;
  for (int g = 0; g < galleries; ++g) {
    std::vector<toy::ToyScene> scenes;
    std::vector<Tensor> embs;
    for (int c = 0; c < 4; ++c)
      for (int s = 0; s < 3; ++s) {
        toy::ToyScene sc = toy::random_scene(rng);
        sc.color = static_cast<toy::Color>(c);
        sc.shape = static_cast<toy::ShapeKind>(s);
        scenes.push_back(sc);
        embs.push_back(e.embed_image(toy::render(sc, rng())));
      }
    for (std::size_t q = 0; q < scenes.size(); ++q) {
      const Tensor t = e.embed_text(toy::caption_of(scenes[q], toy::FieldMask::color_shape()).tokens);
      std::size_t best = 0;
      double best_score = -2.0;
      for (std::size_t i = 0; i < embs.size(); ++i) {
        double d = 0.0;
        for (std::size_t k = 0; k < t.size(); ++k) d += t[k] * embs[i][k];
        if (d > best_score) {
          best_score = d;
          best = i;
        }
      }
      hits += best == q;
      ++total;
    }
  }
  return static_cast<double>(hits) / total;
}

namespace detail {

inline ad::Var stack_rows(const std::vector<ad::Var>& rows) {
  ad::Var out = ad::reshape(rows.front(), {1, static_cast<int>(rows.front().size())});
  for (std::size_t i = 1; i < rows.size(); ++i)
    out = ad::concat0(out, ad::reshape(rows[i], {1, static_cast<int>(rows[i].size())}));
  return out;
}

}  // namespace detail

/// Symmetric InfoNCE over batches of freshly rendered captioned scenes.
inline EmbedderTrainResult train_toy_embedder(ToyEmbedder& model, const EmbedderTrainConfig& cfg) {
  if (cfg.batch_size < 2) throw InvalidArgument("contrastive training needs batch_size >= 2");
  Rng rng = make_rng(cfg.seed, 0xC0B7);
  model.set_training(true);
  Adam opt(model.parameter_list(), {cfg.learning_rate});
  const int b = cfg.batch_size;
  Tensor eye(Shape{b, b});
  for (int i = 0; i < b; ++i) eye.at(i, i) = 1.0;
  const ad::Var diag = ad::constant(eye);
  EmbedderTrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<ad::Var> imgs, txts;
    for (int i = 0; i < b; ++i) {
      CaptionedImage s = sample_captioned_image(rng);
      model.check_tokens(s.caption.tokens);
      imgs.push_back(model.embed_image(ad::constant(std::move(s.image))));
      txts.push_back(model.embed_text_var(s.caption.tokens));
    }
    ad::Var logits = ad::scale(ad::matmul_nt(detail::stack_rows(imgs), detail::stack_rows(txts)), cfg.logit_scale);
    ad::Var picked = ad::add(ad::sum(ad::mul(ad::log_softmax_rows(logits), diag)),
                             ad::sum(ad::mul(ad::log_softmax_rows(ad::transpose(logits)), diag)));
    ad::Var loss = ad::scale(picked, -0.5 / b);
    if (!std::isfinite(loss.item())) throw NumericFailure("embedder training diverged at step " + std::to_string(step));
    opt.zero_grad();
    ad::backward(loss);
    opt.step();
    result.loss.push_back(loss.item());
  }
  model.set_training(false);

  result.retrieval_accuracy = retrieval_accuracy(model, cfg.eval_galleries, cfg.seed ^ 0x5EEDULL);
  Rng eval = make_rng(cfg.seed, 0xE7A15);
  std::vector<Tensor> ei, et;
  for (int i = 0; i < b; ++i) {
    CaptionedImage s = sample_captioned_image(eval);
    ei.push_back(model.embed_image(s.image));
    et.push_back(model.embed_text(s.caption.tokens));
  }
  double matched = 0.0, mismatched = 0.0;
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j) {
      double d = 0.0;
      for (int k = 0; k < model.dim(); ++k) d += ei[i][k] * et[j][k];
      (i == j ? matched : mismatched) += d;
    }
  result.matched_mean = matched / b;
  result.mismatched_mean = mismatched / (b * (b - 1));
  return result;
}

}  // namespace dualedit

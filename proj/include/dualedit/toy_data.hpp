// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualedit/error.hpp"
#include "dualedit/image_io.hpp"
#include "dualedit/rng.hpp"
#include "dualedit/tensor.hpp"

namespace dualedit::toy {

enum class ShapeKind { Square, Circle, Triangle };
enum class Color { Red, Green, Blue, Yellow };
enum class SizeKind { Small, Large };
enum class Background { Plain, Textured };

inline constexpr int kGridCells = 9;
inline constexpr int kImageSize = 16;

struct ToyScene {
  ShapeKind shape = ShapeKind::Square;
  Color color = Color::Red;
  SizeKind size = SizeKind::Large;
  int position = 4;  // 3x3 grid cell, row-major
  Background background = Background::Plain;

  bool operator==(const ToyScene&) const = default;
};

// ------------------------------------------------------------------ vocabulary

// Closed vocabulary; token ids are grouped by field.
namespace vocab {
inline constexpr std::array<std::string_view, 20> kWords = {
    "small", "large",                                                                    // 0-1
    "red",   "green", "blue",  "yellow",                                                 // 2-5
    "square", "circle", "triangle",                                                      // 6-8
    "top-left", "top", "top-right", "left", "center", "right", "bottom-left", "bottom",  // 9-16
    "bottom-right",                                                                      // 17
    "plain", "textured"};                                                                // 18-19
inline constexpr int kSize = static_cast<int>(kWords.size());
inline constexpr int kSizeBase = 0, kColorBase = 2, kShapeBase = 6, kPositionBase = 9, kBackgroundBase = 18;

inline int size_token(SizeKind s) { return kSizeBase + static_cast<int>(s); }
inline int color_token(Color c) { return kColorBase + static_cast<int>(c); }
inline int shape_token(ShapeKind s) { return kShapeBase + static_cast<int>(s); }
inline int position_token(int cell) { return kPositionBase + cell; }
inline int background_token(Background b) { return kBackgroundBase + static_cast<int>(b); }

inline int token_id(std::string_view word) {
  for (int i = 0; i < kSize; ++i)
    if (kWords[i] == word) return i;
  throw InvalidArgument("unknown caption token '" + std::string(word) + "'");
}
}  // namespace vocab

enum class Field { Size, Color, Shape, Position, Background };

inline Field field_of_token(int token) {
  if (token < 0 || token >= vocab::kSize) throw InvalidArgument("token id out of vocabulary");
  if (token < vocab::kColorBase) return Field::Size;
  if (token < vocab::kShapeBase) return Field::Color;
  if (token < vocab::kPositionBase) return Field::Shape;
  if (token < vocab::kBackgroundBase) return Field::Position;
  return Field::Background;
}

/// A caption is an ordered list of vocabulary tokens, at most one per field.
/// Full captions carry all five fields in the order size, color, shape,
/// position, background.
struct Caption {
  std::vector<int> tokens;

  bool operator==(const Caption&) const = default;
  bool operator<(const Caption& o) const { return tokens < o.tokens; }
};

inline void validate(const Caption& c) {
  if (c.tokens.empty()) throw InvalidArgument("empty caption");
  bool seen[5] = {};
  for (int t : c.tokens) {
    const auto f = static_cast<int>(field_of_token(t));
    if (seen[f]) throw InvalidArgument("caption mentions a field twice");
    seen[f] = true;
  }
}

struct FieldMask {
  bool size = true, color = true, shape = true, position = true, background = true;
  static FieldMask color_shape() { return {false, true, true, false, false}; }
};

inline Caption caption_of(const ToyScene& s, FieldMask m = {}) {
  Caption c;
  if (m.size) c.tokens.push_back(vocab::size_token(s.size));
  if (m.color) c.tokens.push_back(vocab::color_token(s.color));
  if (m.shape) c.tokens.push_back(vocab::shape_token(s.shape));
  if (m.position) c.tokens.push_back(vocab::position_token(s.position));
  if (m.background) c.tokens.push_back(vocab::background_token(s.background));
  return c;
}

inline std::string to_string(const Caption& c) {
  std::string out = "a";
  for (int t : c.tokens) {
    const Field f = field_of_token(t);
    if (f == Field::Position) out += " at";
    if (f == Field::Background) out += " on";
    out += ' ';
    out += vocab::kWords[t];
  }
  if (!c.tokens.empty() && field_of_token(c.tokens.back()) == Field::Background) out += " background";
  return out;
}

inline Caption parse_caption(std::string_view text) {
  static constexpr std::array<std::string_view, 6> kFiller = {"a", "an", "at", "on", "the", "background"};
  Caption c;
  std::istringstream is{std::string(text)};
  std::string word;
  while (is >> word) {
    if (std::find(kFiller.begin(), kFiller.end(), word) != kFiller.end()) continue;
    c.tokens.push_back(vocab::token_id(word));
  }
  validate(c);
  std::stable_sort(c.tokens.begin(), c.tokens.end(),
                   [](int a, int b) { return field_of_token(a) < field_of_token(b); });
  return c;
}

// Inverse of caption_of for full captions.
inline ToyScene scene_of(const Caption& c) {
  validate(c);
  if (c.tokens.size() != 5) throw InvalidArgument("scene_of needs a full five-field caption");
  ToyScene s;
  for (int t : c.tokens) {
    switch (field_of_token(t)) {
      case Field::Size: s.size = static_cast<SizeKind>(t - vocab::kSizeBase); break;
      case Field::Color: s.color = static_cast<Color>(t - vocab::kColorBase); break;
      case Field::Shape: s.shape = static_cast<ShapeKind>(t - vocab::kShapeBase); break;
      case Field::Position: s.position = t - vocab::kPositionBase; break;
      case Field::Background: s.background = static_cast<Background>(t - vocab::kBackgroundBase); break;
    }
  }
  return s;
}

// ------------------------------------------------------------------ rendering

// 8-bit-exact palette so PPM round trips are lossless.
inline std::array<double, 3> rgb(Color c) {
  switch (c) {
    case Color::Red: return {230 / 255.0, 25 / 255.0, 25 / 255.0};
    case Color::Green: return {25 / 255.0, 200 / 255.0, 50 / 255.0};
    case Color::Blue: return {40 / 255.0, 60 / 255.0, 230 / 255.0};
    case Color::Yellow: return {240 / 255.0, 215 / 255.0, 25 / 255.0};
  }
  return {0, 0, 0};
}

inline int half_extent(SizeKind s) { return s == SizeKind::Small ? 2 : 3; }
inline int cell_center(int index) { return 4 + 4 * index; }  // 4, 8, 12 on the 16-pixel grid

// Membership test in 16-grid units; dx, dy are offsets from the shape center
// (pixel centers sit on integers at base resolution).
inline bool inside(ShapeKind shape, int h, double dx, double dy) {
  switch (shape) {
    case ShapeKind::Square: return std::abs(dx) <= h + 0.5 && std::abs(dy) <= h + 0.5;
    case ShapeKind::Circle: return dx * dx + dy * dy <= (h + 0.5) * (h + 0.5);
    case ShapeKind::Triangle: {
      // Apex row at dy = -h; each pair of rows widens by one pixel per side.
      const long r = std::lround(dy) + h;
      return r >= 0 && r <= 2 * h && std::labs(std::lround(dx)) <= r / 2;
    }
  }
  return false;
}

/// Deterministic rendering at 16x16 (resolution 16) or an integer multiple.
/// The seed only perturbs background pixels, in whole 8-bit steps.
inline Tensor render(const ToyScene& scene, std::uint64_t seed, int resolution = kImageSize) {
  if (resolution <= 0 || resolution % kImageSize) throw InvalidArgument("resolution must be a multiple of 16");
  if (scene.position < 0 || scene.position >= kGridCells) throw InvalidArgument("position cell out of range");
  const double unit = resolution / static_cast<double>(kImageSize);
  Rng rng = make_rng(seed, 0x5CE7E);
  std::uniform_int_distribution<int> jitter(-6, 6);
  std::uniform_int_distribution<int> phase_dist(0, 3);
  const int phase = phase_dist(rng);
  const int cx = cell_center(scene.position % 3), cy = cell_center(scene.position / 3);
  const int h = half_extent(scene.size);
  const auto color = rgb(scene.color);
  Tensor img(Shape{3, resolution, resolution});
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      const double px = (x + 0.5) / unit - 0.5, py = (y + 0.5) / unit - 0.5;
      if (inside(scene.shape, h, px - cx, py - cy)) {
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[c];
        continue;
      }
      int level = 128;
      if (scene.background == Background::Textured) {
        const int bx = static_cast<int>(x / unit), by = static_cast<int>(y / unit);
        level = ((bx + by + phase) / 2) % 2 ? 90 : 165;
      }
      level += jitter(rng);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = level / 255.0;
    }
  return img;
}

// Pixel count of a shape at base resolution, independent of render().
inline int analytic_area(ShapeKind shape, SizeKind size) {
  const int h = half_extent(size);
  switch (shape) {
    case ShapeKind::Square: return (2 * h + 1) * (2 * h + 1);
    case ShapeKind::Circle: {
      int n = 0;
      for (int dy = -h; dy <= h; ++dy)
        for (int dx = -h; dx <= h; ++dx) n += (dx * dx + dy * dy) * 4 <= (2 * h + 1) * (2 * h + 1);
      return n;
    }
    case ShapeKind::Triangle: {
      int n = 0;
      for (int r = 0; r <= 2 * h; ++r) n += 2 * (r / 2) + 1;
      return n;
    }
  }
  return 0;
}

template <class R>
ToyScene random_scene(R& rng) {
  ToyScene s;
  s.shape = static_cast<ShapeKind>(std::uniform_int_distribution<int>(0, 2)(rng));
  s.color = static_cast<Color>(std::uniform_int_distribution<int>(0, 3)(rng));
  s.size = static_cast<SizeKind>(std::uniform_int_distribution<int>(0, 1)(rng));
  s.position = std::uniform_int_distribution<int>(0, kGridCells - 1)(rng);
  s.background = static_cast<Background>(std::uniform_int_distribution<int>(0, 1)(rng));
  return s;
}

// ------------------------------------------------------------------ benchmark

enum class TaskCategory { ObjectReplacement, AttributeManipulation, StyleTransfer, PoseChange, ShapeChange };

inline constexpr std::array<TaskCategory, 5> kTaskOrder = {
    TaskCategory::ObjectReplacement, TaskCategory::AttributeManipulation, TaskCategory::StyleTransfer,
    TaskCategory::PoseChange, TaskCategory::ShapeChange};

inline std::string_view task_name(TaskCategory t) {
  switch (t) {
    case TaskCategory::ObjectReplacement: return "replacement";
    case TaskCategory::AttributeManipulation: return "attribute";
    case TaskCategory::StyleTransfer: return "style";
    case TaskCategory::PoseChange: return "pose";
    case TaskCategory::ShapeChange: return "shape";
  }
  return "?";
}

inline TaskCategory parse_task(std::string_view name) {
  for (TaskCategory t : kTaskOrder)
    if (task_name(t) == name) return t;
  throw InvalidArgument("unknown task category '" + std::string(name) + "'");
}

inline bool is_structure_preserved(TaskCategory t) {
  return t == TaskCategory::ObjectReplacement || t == TaskCategory::AttributeManipulation ||
         t == TaskCategory::StyleTransfer;
}

// Fields a category is allowed (and required) to change.
inline FieldMask edited_fields(TaskCategory t) {
  FieldMask none{false, false, false, false, false};
  switch (t) {
    case TaskCategory::ObjectReplacement: none.shape = none.color = true; break;
    case TaskCategory::AttributeManipulation: none.color = true; break;
    case TaskCategory::StyleTransfer: none.background = true; break;
    case TaskCategory::PoseChange: none.position = true; break;
    case TaskCategory::ShapeChange: none.shape = true; break;
  }
  return none;
}

struct EditTriplet {
  int id = 0;
  TaskCategory category = TaskCategory::AttributeManipulation;
  ToyScene source;
  ToyScene target;
  std::uint64_t image_seed = 0;
  std::string image_path;  // relative to the manifest directory; empty when in memory only

  Caption source_caption() const { return caption_of(source); }
  Caption target_caption() const { return caption_of(target); }
  Tensor image() const { return render(source, image_seed); }
};

inline FieldMask diff_fields(const ToyScene& a, const ToyScene& b) {
  return {a.size != b.size, a.color != b.color, a.shape != b.shape, a.position != b.position,
          a.background != b.background};
}

inline bool triplet_consistent(const EditTriplet& t) {
  const FieldMask d = diff_fields(t.source, t.target), want = edited_fields(t.category);
  return d.size == want.size && d.color == want.color && d.shape == want.shape && d.position == want.position &&
         d.background == want.background;
}

template <class R, class E>
E pick_other(R& rng, E current, int count) {
  const int offset = std::uniform_int_distribution<int>(1, count - 1)(rng);
  return static_cast<E>((static_cast<int>(current) + offset) % count);
}

inline EditTriplet make_triplet(TaskCategory category, int id, std::uint64_t seed) {
  Rng rng = make_rng(seed, static_cast<std::uint64_t>(id) * 7919 + static_cast<std::uint64_t>(category));
  EditTriplet t;
  t.id = id;
  t.category = category;
  t.source = random_scene(rng);
  t.target = t.source;
  switch (category) {
    case TaskCategory::ObjectReplacement:
      t.target.shape = pick_other(rng, t.source.shape, 3);
      t.target.color = pick_other(rng, t.source.color, 4);
      break;
    case TaskCategory::AttributeManipulation: t.target.color = pick_other(rng, t.source.color, 4); break;
    case TaskCategory::StyleTransfer: t.target.background = pick_other(rng, t.source.background, 2); break;
    case TaskCategory::PoseChange: t.target.position = pick_other(rng, t.source.position, kGridCells); break;
    case TaskCategory::ShapeChange: t.target.shape = pick_other(rng, t.source.shape, 3); break;
  }
  t.image_seed = derive_seed(seed, 1000003ULL + static_cast<std::uint64_t>(id));
  return t;
}

/// n_per_task triplets for every category, in task order.
inline std::vector<EditTriplet> generate_benchmark(int n_per_task, std::uint64_t seed) {
  if (n_per_task < 1) throw InvalidArgument("n_per_task must be at least 1");
  std::vector<EditTriplet> out;
  int id = 0;
  for (TaskCategory c : kTaskOrder)
    for (int i = 0; i < n_per_task; ++i) out.push_back(make_triplet(c, id++, seed));
  return out;
}

// ------------------------------------------------------------------ manifest

inline nlohmann::json scene_json(const ToyScene& s) { return to_string(caption_of(s)); }

// One JSON object per line: id, category, source/target captions, image path, seed.
inline void write_benchmark_manifest(const std::filesystem::path& path, std::vector<EditTriplet>& triplets,
                                     bool write_images = true) {
  const auto dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (auto& t : triplets) {
    if (t.image_path.empty()) t.image_path = "images/" + std::to_string(t.id) + ".ppm";
    if (write_images) write_ppm(dir / t.image_path, t.image());
    nlohmann::json j = {{"id", t.id},
                        {"category", task_name(t.category)},
                        {"source_caption", to_string(t.source_caption())},
                        {"target_caption", to_string(t.target_caption())},
                        {"image", t.image_path},
                        {"seed", t.image_seed}};
    out << j.dump() << '\n';
  }
}

inline std::vector<EditTriplet> read_benchmark_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read benchmark manifest " + path.string());
  std::vector<EditTriplet> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EditTriplet t;
      t.id = j.at("id").get<int>();
      t.category = parse_task(j.at("category").get<std::string>());
      t.source = scene_of(parse_caption(j.at("source_caption").get<std::string>()));
      t.target = scene_of(parse_caption(j.at("target_caption").get<std::string>()));
      t.image_path = j.at("image").get<std::string>();
      t.image_seed = j.value("seed", std::uint64_t{0});
      out.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("benchmark manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dualedit::toy

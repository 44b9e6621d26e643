// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "dualedit/image_io.hpp"
#include "dualedit/toy_data.hpp"

namespace dualedit::toy {
namespace {

std::vector<ToyScene> all_scenes() {
  std::vector<ToyScene> out;
  for (int sh = 0; sh < 3; ++sh)
    for (int co = 0; co < 4; ++co)
      for (int sz = 0; sz < 2; ++sz)
        for (int p = 0; p < kGridCells; ++p)
          for (int bg = 0; bg < 2; ++bg)
            out.push_back({static_cast<ShapeKind>(sh), static_cast<Color>(co), static_cast<SizeKind>(sz), p,
                           static_cast<Background>(bg)});
  return out;
}

int count_colored(const Tensor& img, Color c) {
  const auto want = rgb(c);
  int n = 0;
  for (int y = 0; y < img.dim(1); ++y)
    for (int x = 0; x < img.dim(2); ++x)
      n += img.at(0, y, x) == want[0] && img.at(1, y, x) == want[1] && img.at(2, y, x) == want[2];
  return n;
}

TEST(Render, SameSceneAndSeedIsBitwiseIdentical) {
  const ToyScene s{ShapeKind::Triangle, Color::Blue, SizeKind::Large, 2, Background::Textured};
  EXPECT_EQ(render(s, 42), render(s, 42));
  EXPECT_NE(render(s, 42), render(s, 43));
  EXPECT_EQ(render(s, 42).shape(), (Shape{3, 16, 16}));
  EXPECT_EQ(render(s, 42, 64).shape(), (Shape{3, 64, 64}));
  EXPECT_THROW(render(s, 42, 20), InvalidArgument);
  EXPECT_THROW(render(ToyScene{.position = 9}, 1), InvalidArgument);
}

TEST(Render, DistinctColorsGiveDistinctChannelMeans) {
  std::set<std::array<double, 3>> means;
  for (int co = 0; co < 4; ++co) {
    const Tensor img = render({ShapeKind::Square, static_cast<Color>(co), SizeKind::Large, 4, Background::Plain}, 1);
    std::array<double, 3> m{};
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) m[c] += img.at(c, y, x) / 256.0;
    }
    means.insert(m);
  }
  EXPECT_EQ(means.size(), 4u);
}

// Pixel counts enumerated by hand for each shape at both sizes.
TEST(Render, ShapePixelCountsMatchHandCounts) {
  const std::map<std::pair<ShapeKind, SizeKind>, int> expected = {
      {{ShapeKind::Square, SizeKind::Small}, 25},   {{ShapeKind::Square, SizeKind::Large}, 49},
      {{ShapeKind::Circle, SizeKind::Small}, 21},   {{ShapeKind::Circle, SizeKind::Large}, 37},
      {{ShapeKind::Triangle, SizeKind::Small}, 13}, {{ShapeKind::Triangle, SizeKind::Large}, 25}};
  for (const auto& [key, n] : expected) {
    EXPECT_EQ(analytic_area(key.first, key.second), n);
    for (int p : {0, 4, 8}) {
      for (auto bg : {Background::Plain, Background::Textured}) {
        const ToyScene s{key.first, Color::Red, key.second, p, bg};
        EXPECT_EQ(count_colored(render(s, 17), Color::Red), n) << to_string(caption_of(s));
      }
    }
    if (key.first != ShapeKind::Circle) {
      const Tensor big = render({key.first, Color::Red, key.second, 4, Background::Plain}, 17, 32);
      EXPECT_EQ(count_colored(big, Color::Red), 4 * n) << "2x render";
    }
  }
}

TEST(Render, PaletteSurvivesEightBitRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "dualedit_toy_render.ppm";
  const Tensor img = render({ShapeKind::Circle, Color::Yellow, SizeKind::Small, 7, Background::Textured}, 5);
  write_ppm(path, img);
  EXPECT_EQ(read_ppm(path), img);
  std::filesystem::remove(path);
}

TEST(Captions, EveryCaptionReconstructsItsScene) {
  std::set<Caption> seen;
  for (const ToyScene& s : all_scenes()) {
    const Caption c = caption_of(s);
    EXPECT_EQ(scene_of(c), s);
    EXPECT_EQ(scene_of(parse_caption(to_string(c))), s);
    seen.insert(c);
  }
  EXPECT_EQ(seen.size(), all_scenes().size());
}

TEST(Captions, TextForm) {
  const ToyScene s{ShapeKind::Square, Color::Red, SizeKind::Small, 4, Background::Plain};
  const std::string text = to_string(caption_of(s));
  EXPECT_EQ(parse_caption(text), caption_of(s));
  EXPECT_EQ(to_string(caption_of(s, FieldMask::color_shape())), "a red square");
  EXPECT_THROW(parse_caption("a purple square"), InvalidArgument);
  EXPECT_THROW(parse_caption("a red blue square"), InvalidArgument);
  EXPECT_THROW(parse_caption(""), InvalidArgument);
  EXPECT_THROW(scene_of(parse_caption("a red square")), InvalidArgument);
}

TEST(Benchmark, DefaultSizeIsOneHundred) {
  const auto b = generate_benchmark(20, 0);
  EXPECT_EQ(b.size(), 100u);
  std::map<TaskCategory, int> hist;
  for (const auto& t : b) ++hist[t.category];
  ASSERT_EQ(hist.size(), 5u);
  for (const auto& [cat, n] : hist) EXPECT_EQ(n, 20) << task_name(cat);
}

TEST(Benchmark, CaptionsDifferExactlyInPermittedFields) {
  for (const auto& t : generate_benchmark(20, 3)) {
    EXPECT_TRUE(triplet_consistent(t)) << t.id;
    EXPECT_NE(t.source_caption(), t.target_caption());
  }
}

TEST(Benchmark, OrderedByTaskAndDeterministic) {
  const auto a = generate_benchmark(3, 9), b = generate_benchmark(3, 9), c = generate_benchmark(3, 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].category, kTaskOrder[i / 3]);
    EXPECT_EQ(a[i].id, static_cast<int>(i));
    EXPECT_EQ(a[i].source, b[i].source);
    EXPECT_EQ(a[i].target, b[i].target);
    EXPECT_EQ(a[i].image(), b[i].image());
  }
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) any_diff |= !(a[i].source == c[i].source);
  EXPECT_TRUE(any_diff);
  EXPECT_THROW(generate_benchmark(0, 1), InvalidArgument);
}

TEST(Benchmark, TaskNamesAndGroups) {
  std::vector<std::string> names;
  for (auto t : kTaskOrder) names.emplace_back(task_name(t));
  EXPECT_EQ(names, (std::vector<std::string>{"replacement", "attribute", "style", "pose", "shape"}));
  for (auto t : kTaskOrder) EXPECT_EQ(parse_task(task_name(t)), t);
  EXPECT_THROW(parse_task("recolor"), InvalidArgument);
  EXPECT_TRUE(is_structure_preserved(TaskCategory::StyleTransfer));
  EXPECT_FALSE(is_structure_preserved(TaskCategory::PoseChange));
  EXPECT_FALSE(is_structure_preserved(TaskCategory::ShapeChange));
}

TEST(Benchmark, ManifestRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "dualedit_bench_manifest";
  std::filesystem::remove_all(dir);
  auto triplets = generate_benchmark(2, 4);
  write_benchmark_manifest(dir / "manifest.jsonl", triplets, true);
  const auto back = read_benchmark_manifest(dir / "manifest.jsonl");
  ASSERT_EQ(back.size(), triplets.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, triplets[i].id);
    EXPECT_EQ(back[i].category, triplets[i].category);
    EXPECT_EQ(back[i].source, triplets[i].source);
    EXPECT_EQ(back[i].target, triplets[i].target);
    EXPECT_EQ(back[i].image_seed, triplets[i].image_seed);
    EXPECT_EQ(read_ppm(dir / back[i].image_path), triplets[i].image());
  }
  std::filesystem::remove_all(dir);
}

TEST(Benchmark, MalformedManifestIsConfigError) {
  const auto path = std::filesystem::temp_directory_path() / "dualedit_bad_manifest.jsonl";
  {
    std::ofstream f(path);
    f << "{\"id\": 1}\n";
  }
  EXPECT_THROW(read_benchmark_manifest(path), ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_benchmark_manifest(path), IoError);
}

}  // namespace
}  // namespace dualedit::toy

// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "dualedit/error.hpp"
#include "dualedit/tensor.hpp"

namespace dualedit {

// Binary PPM (P6), 8- or 16-bit. Images are [3,H,W] tensors in [0,1];
// values outside that range are clamped on write.
inline void write_ppm(const std::filesystem::path& path, const Tensor& image, int maxval = 255) {
  if (image.rank() != 3 || image.dim(0) != 3) throw InvalidArgument("write_ppm expects [3,H,W]");
  if (maxval != 255 && maxval != 65535) throw InvalidArgument("write_ppm: maxval must be 255 or 65535");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const int h = image.dim(1), w = image.dim(2);
  out << "P6\n" << w << ' ' << h << '\n' << maxval << '\n';
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const long v = std::lround(std::clamp(image.at(c, y, x), 0.0, 1.0) * maxval);
        if (maxval == 255) {
          out.put(static_cast<char>(v));
        } else {
          out.put(static_cast<char>(v >> 8));
          out.put(static_cast<char>(v & 0xFF));
        }
      }
  if (!out) throw IoError("write failed for " + path.string());
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  auto token = [&in]() {
    std::string t;
    while (in) {
      const int ch = in.get();
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(ch)) {
        if (!t.empty()) return t;
      } else if (ch != EOF) {
        t.push_back(static_cast<char>(ch));
      }
    }
    return t;
  };
  if (token() != "P6") throw IoError(path.string() + " is not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw IoError("malformed PPM header in " + path.string());
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw IoError("bad PPM header in " + path.string());
  Tensor image(Shape{3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        int v = in.get();
        if (maxval > 255) v = (v << 8) | in.get();
        if (!in) throw IoError("truncated PPM " + path.string());
        image.at(c, y, x) = static_cast<double>(v) / maxval;
      }
  return image;
}

}  // namespace dualedit

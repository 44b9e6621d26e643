// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dualedit/error.hpp"

namespace dualedit {

enum class ShareMode {
  QShare,   // editing branch reads source queries; keeps layout
  KVShare,  // editing branch reads source keys/values; keeps appearance
};

inline std::string_view to_string(ShareMode m) { return m == ShareMode::QShare ? "structure" : "nonrigid"; }

inline ShareMode parse_share_mode(std::string_view s) {
  if (s == "structure" || s == "q" || s == "q_share") return ShareMode::QShare;
  if (s == "nonrigid" || s == "kv" || s == "kv_share") return ShareMode::KVShare;
  throw ConfigError("unknown share mode '" + std::string(s) + "' (expected structure|nonrigid)");
}

// (sampling step, site) pairs at which source features are shared.
using FeatureGrid = std::set<std::pair<int, int>>;

/// Which sites share source features, over which sampling-step window.
struct ShareConfig {
  ShareMode mode = ShareMode::QShare;
  std::vector<int> shared_layers;
  int first_step = 5;  // inclusive; 1 = noisiest step
  int last_step = 50;  // inclusive

  // A 16-site backend shares its last 6 sites; smaller backends share their
  // deeper half.
  static int default_layer_count(int site_count) { return site_count >= 16 ? 6 : site_count / 2; }

  static ShareConfig defaults(ShareMode mode, int site_count, int steps) {
    ShareConfig c;
    c.mode = mode;
    for (int i = site_count - default_layer_count(site_count); i < site_count; ++i) c.shared_layers.push_back(i);
    c.first_step = std::min(steps, 1 + static_cast<int>(std::lround(4.0 * steps / 50.0)));
    c.last_step = steps;
    return c;
  }

  bool window_empty() const { return first_step > last_step; }

  bool active(int step, int layer) const {
    if (step < first_step || step > last_step) return false;
    return std::find(shared_layers.begin(), shared_layers.end(), layer) != shared_layers.end();
  }

  void validate(int site_count, int steps) const {
    for (int l : shared_layers) {
      if (l < 0 || l >= site_count) {
        throw ConfigError("shared layer " + std::to_string(l) + " is not a site of the backend (0.." +
                          std::to_string(site_count - 1) + ")");
      }
    }
    std::vector<int> sorted = shared_layers;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("shared layers repeat");
    if (!window_empty() && (first_step < 1 || last_step > steps)) {
      throw ConfigError("share window [" + std::to_string(first_step) + ", " + std::to_string(last_step) +
                        "] exceeds [1, " + std::to_string(steps) + "]");
    }
  }

  FeatureGrid grid() const {
    FeatureGrid g;
    for (int s = first_step; s <= last_step; ++s)
      for (int l : shared_layers) g.emplace(s, l);
    return g;
  }
};

}  // namespace dualedit

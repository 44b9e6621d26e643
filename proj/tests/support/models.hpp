// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iostream>

#include "dualedit/pipeline.hpp"

#ifndef DUALEDIT_TEST_MODEL_DIR
#define DUALEDIT_TEST_MODEL_DIR "test_models"
#endif

namespace dualedit::testing {

// Default configuration pointed at the build tree's trained checkpoints.
inline RunConfig trained_config() {
  RunConfig c;
  c.denoiser_path = std::string(DUALEDIT_TEST_MODEL_DIR) + "/denoiser.dea";
  c.embedder_path = std::string(DUALEDIT_TEST_MODEL_DIR) + "/embedder.dea";
  return c;
}

// Trains the default checkpoints once per build tree, then loads them.
inline Models& trained_models() {
  static Models models = [] {
    const RunConfig c = trained_config();
    if (!std::filesystem::exists(c.embedder_path)) {
      std::cerr << "[models] training toy embedder into " << c.embedder_path << '\n';
      train_embedder_checkpoint(c, c.embedder_path);
    }
    if (!std::filesystem::exists(c.denoiser_path)) {
      std::cerr << "[models] training toy denoiser into " << c.denoiser_path << '\n';
      train_denoiser_checkpoint(c, c.denoiser_path);
    }
    return load_models(c);
  }();
  return models;
}

}  // namespace dualedit::testing
